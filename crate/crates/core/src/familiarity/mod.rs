//! Familiarity scoring over model activations.
//!
//! Activations of one layer are reduced with PCA, a variational Gaussian
//! mixture is fitted in the reduced space, and each sample is scored by its
//! log-likelihood under that mixture. High scores are familiar (dense
//! regions), low scores unfamiliar.

mod kmeans;
pub mod pca;
pub mod vbgmm;

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pca::{fit_pca, PcaModel};
pub use vbgmm::{fit_vbgmm, log_likelihood, GmmComponent, MixtureDensity, VbGmmConfig, VbGmmModel};

use crate::{Error, Result};

/// Default PCA target dimension.
pub const DEFAULT_PROJECTION_DIM: usize = 50;

/// `N x M` activations of one layer, one row per sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub ids: Vec<String>,
    pub data: DMatrix<f64>,
    pub layer_tag: String,
}

impl ActivationMatrix {
    pub fn new(ids: Vec<String>, data: DMatrix<f64>, layer_tag: &str) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(Error::DimensionMismatch {
                expected: data.nrows(),
                found: ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateName(id.clone()));
            }
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            // nalgebra storage is column-major
            let row = pos % data.nrows().max(1);
            return Err(Error::NonFinite(format!("activation row `{}`", ids[row])));
        }
        Ok(Self {
            ids,
            data,
            layer_tag: layer_tag.to_string(),
        })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>], layer_tag: &str) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: bad.len(),
            });
        }
        let data = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
        Self::new(ids, data, layer_tag)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    /// Rows whose ids are in `keep`, in this matrix's order.
    pub fn select(&self, keep: &HashSet<&str>) -> ActivationMatrix {
        let idx: Vec<usize> = (0..self.nrows())
            .filter(|&i| keep.contains(self.ids[i].as_str()))
            .collect();
        ActivationMatrix {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            data: self.data.select_rows(&idx),
            layer_tag: self.layer_tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamiliarityConfig {
    /// PCA target dimension; `None` uses `min(50, M, N - 1)`.
    pub projection_dim: Option<usize>,
    pub gmm: VbGmmConfig,
}

/// Default projection dimension for an `n x m` activation matrix.
pub fn default_projection_dim(n: usize, m: usize) -> usize {
    DEFAULT_PROJECTION_DIM.min(m).min(n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamiliarityModel {
    pub layer_tag: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub fitted_at: DateTime<Utc>,
    pub pca: PcaModel,
    pub gmm: VbGmmModel,
}

impl FamiliarityModel {
    pub fn to_document(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_document(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// PCA followed by a variational mixture fit in the projected space.
pub fn fit_familiarity(acts: &ActivationMatrix, config: &FamiliarityConfig) -> Result<FamiliarityModel> {
    let (n, m) = acts.data.shape();
    let d = config
        .projection_dim
        .unwrap_or_else(|| default_projection_dim(n, m));
    let pca = fit_pca(acts, d)?;
    let projected = pca.transform(&acts.data)?;
    let gmm = fit_vbgmm(&projected, &config.gmm)?;
    Ok(FamiliarityModel {
        layer_tag: acts.layer_tag.clone(),
        n,
        m,
        d,
        fitted_at: Utc::now(),
        pca,
        gmm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamiliarityScores {
    pub entries: Vec<ScoreEntry>,
    /// Name of the model that produced the scores, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl FamiliarityScores {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.score)
    }

    /// Entries ordered from most familiar to least; ties by id.
    pub fn ranked_most_familiar(&self) -> Vec<&ScoreEntry> {
        let mut v: Vec<&ScoreEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        v
    }

    /// Entries ordered from least familiar to most; ties by id.
    pub fn ranked_least_familiar(&self) -> Vec<&ScoreEntry> {
        let mut v: Vec<&ScoreEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.id.cmp(&b.id)));
        v
    }
}

/// Score every row. Scoring the training matrix gives self-familiarity.
pub fn score_all(model: &FamiliarityModel, acts: &ActivationMatrix) -> Result<FamiliarityScores> {
    if acts.ncols() != model.m {
        return Err(Error::DimensionMismatch {
            expected: model.m,
            found: acts.ncols(),
        });
    }
    let projected = model.pca.transform(&acts.data)?;
    let density = model.gmm.density()?;
    let scores: Vec<f64> = (0..projected.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = projected.row(i).iter().copied().collect();
            density.log_density(&row)
        })
        .collect::<Result<_>>()?;
    Ok(FamiliarityScores {
        entries: acts
            .ids
            .iter()
            .zip(scores)
            .map(|(id, score)| ScoreEntry {
                id: id.clone(),
                score,
            })
            .collect(),
        model: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSide {
    Least,
    Most,
}

impl std::str::FromStr for TailSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least" => Ok(TailSide::Least),
            "most" => Ok(TailSide::Most),
            other => Err(Error::Invalid(format!("unknown tail side `{other}`"))),
        }
    }
}

/// Number of items selected by `fraction` of `n`, with a minimum of one.
pub fn tail_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// The `max(1, floor(fraction * N))` most extreme ids on one side, most
/// extreme first.
pub fn tail(scores: &FamiliarityScores, fraction: f64, side: TailSide) -> Result<Vec<String>> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::OutOfRange(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = tail_count(fraction, scores.len());
    let ranked = match side {
        TailSide::Least => scores.ranked_least_familiar(),
        TailSide::Most => scores.ranked_most_familiar(),
    };
    Ok(ranked.into_iter().take(k).map(|e| e.id.clone()).collect())
}
