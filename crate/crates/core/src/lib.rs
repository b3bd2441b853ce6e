//! Core library for planning, monitoring and auditing datasets.
//!
//! The crate is organised around the three stages of the data design loop:
//!
//! - [`plan`]: declare dimensions and expected distributions before collection.
//! - [`monitor`]: ingest collected metadata and compare it with the plan.
//! - [`familiarity`]: score samples by the log-likelihood of their activations
//!   under a variational Gaussian mixture, and pick the unfamiliar tail.
//!
//! [`resample`] turns familiarity scores into dataset edits, [`refmodel`] is a
//! small reference classifier used to run experiments end to end, and
//! [`store`] persists a project as an append-only event log.

pub mod error;
pub mod familiarity;
pub mod io;
pub mod monitor;
pub mod plan;
pub mod refmodel;
pub mod resample;
pub mod store;
pub mod workflow;

pub use error::{Error, Result};
