//! Project-level operations shared by the command line and the HTTP service.
//!
//! Each function reads what it needs from a [`ProjectStore`], does the work
//! through the domain modules and appends the resulting events. Long
//! computations (mixture fits, model training) stay outside so callers can
//! run them without holding the writer.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::familiarity::{ActivationMatrix, FamiliarityModel, FamiliarityScores};
use crate::io;
use crate::monitor::SampleRecord;
use crate::refmodel::{accuracy_delta, AccuracyMatrix};
use crate::resample::{
    build_plan, review_queue, DatasetVersion, ResamplePlan, ReviewEntry, ReviewQueue, SamplingStrategy,
    Verdict,
};
use crate::store::{Event, FitInfo, ProjectState, ProjectStore};
use crate::{Error, Result};

pub const ACTIVATIONS_KIND: &str = "activations-csv";
pub const MODEL_KIND: &str = "familiarity-model";

/// Store activations as a canonical CSV blob.
pub fn put_activations(store: &mut ProjectStore, acts: &ActivationMatrix, name: &str) -> Result<String> {
    let mut buf = Vec::new();
    io::write_activations_csv(&mut buf, acts)?;
    store.put_blob(&buf, name, ACTIVATIONS_KIND)
}

pub fn load_activations(store: &ProjectStore, hash: &str, layer_tag: &str) -> Result<ActivationMatrix> {
    io::read_activations_csv(store.read_blob(hash)?.as_slice(), layer_tag)
}

/// Store a fitted model and make it current.
pub fn record_fit(
    store: &mut ProjectStore,
    model: &FamiliarityModel,
    activations_blob: Option<String>,
) -> Result<FitInfo> {
    let doc = model.to_document()?;
    let model_blob = store.put_blob(doc.as_bytes(), "familiarity-model.json", MODEL_KIND)?;
    let fit = FitInfo {
        model_blob,
        activations_blob,
        layer_tag: model.layer_tag.clone(),
        n: model.n,
        m: model.m,
        d: model.d,
        components: model.gmm.effective_components(),
    };
    store.append(Event::FamiliarityFitted { fit: fit.clone() })?;
    Ok(fit)
}

/// The current training set. The first call creates version 1 from the
/// scored ids, which are the rows the familiarity model was fitted on.
pub fn training_set(store: &mut ProjectStore) -> Result<DatasetVersion> {
    if let Some(d) = store.state().latest_dataset() {
        return Ok(d.clone());
    }
    let scores = store.scores()?;
    let ids = scores.entries.iter().map(|e| e.id.clone()).collect();
    store.append(Event::DatasetCreated { ids })?;
    Ok(store.state().latest_dataset().cloned().expect("dataset just created"))
}

/// Ingested records that are not in `train`.
pub fn candidate_pool(state: &ProjectState, train: &DatasetVersion) -> Vec<SampleRecord> {
    state
        .records
        .iter()
        .filter(|r| !train.ids.contains(&r.id))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleRequest {
    pub strategy: SamplingStrategy,
    /// Metadata dimensions to match on; empty means every plan dimension.
    #[serde(default)]
    pub dims: Vec<String>,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

pub fn match_dimensions(state: &ProjectState, dims: &[String]) -> Vec<String> {
    if !dims.is_empty() {
        return dims.to_vec();
    }
    state.plan.as_ref().map(|p| p.dimension_names()).unwrap_or_default()
}

/// Build a substitution plan against the current training set and save it
/// as pending. `pool` defaults to [`candidate_pool`].
pub fn build_resample(
    store: &mut ProjectStore,
    request: &ResampleRequest,
    pool: Option<Vec<SampleRecord>>,
) -> Result<ResamplePlan> {
    let train = training_set(store)?;
    let scores = store.scores()?;
    let state = store.state();
    let pool = pool.unwrap_or_else(|| candidate_pool(state, &train));
    let dims = match_dimensions(state, &request.dims);
    let plan = build_plan(
        &train,
        &state.records,
        &scores,
        &pool,
        &request.strategy,
        &dims,
        &request.weights,
    )?;
    store.append(Event::ResamplePlanSaved { plan: plan.clone() })?;
    Ok(plan)
}

/// Apply `plan`, or the pending plan, to the dataset version it was built
/// against (the latest one when unspecified).
pub fn apply_resample(store: &mut ProjectStore, plan: Option<ResamplePlan>) -> Result<DatasetVersion> {
    let plan = match plan {
        Some(p) => p,
        None => store
            .state()
            .pending_plan
            .clone()
            .ok_or_else(|| Error::NotFound("no pending resample plan".into()))?,
    };
    let base = match plan.base_version {
        Some(v) => v,
        None => training_set(store)?.version,
    };
    if let Some(added) = plan.add_ids.iter().find(|id| store.state().record(id).is_none()) {
        return Err(Error::NotFound(format!("added id `{added}` has not been ingested")));
    }
    store.append(Event::DatasetEdited { base, plan })?;
    Ok(store.state().latest_dataset().cloned().expect("dataset just edited"))
}

/// Queue the least familiar `fraction` for review. Verdicts already given
/// to the same ids carry over.
pub fn open_review(store: &mut ProjectStore, fraction: f64) -> Result<ReviewQueue> {
    let scores = store.scores()?;
    let mut queue = review_queue(&scores, fraction, &store.state().records)?;
    if let Some(prev) = &store.state().review {
        let verdicts: BTreeMap<String, Verdict> = prev
            .entries
            .iter()
            .filter(|e| e.verdict != Verdict::Undecided)
            .map(|e| (e.id.clone(), e.verdict))
            .collect();
        queue.apply_verdicts(&verdicts);
    }
    store.append(Event::ReviewQueued { queue: queue.clone() })?;
    Ok(queue)
}

pub fn set_verdict(store: &mut ProjectStore, id: &str, verdict: Verdict) -> Result<ReviewEntry> {
    let queue = store
        .state()
        .review
        .as_ref()
        .ok_or_else(|| Error::NotFound("no review queue".into()))?;
    if !queue.entries.iter().any(|e| e.id == id) {
        return Err(Error::NotFound(format!("`{id}` is not in the review queue")));
    }
    store.append(Event::ReviewVerdictSet {
        id: id.to_string(),
        verdict,
    })?;
    let entry = store
        .state()
        .review
        .as_ref()
        .and_then(|q| q.entries.iter().find(|e| e.id == id))
        .cloned()
        .expect("entry checked above");
    Ok(entry)
}

pub fn experiment(state: &ProjectState, name: &str) -> Result<AccuracyMatrix> {
    state
        .experiments
        .get(name)
        .cloned()
        .ok_or_else(|| Error::NotFound(format!("experiment `{name}`")))
}

pub fn experiment_delta(state: &ProjectState, before: &str, after: &str) -> Result<AccuracyMatrix> {
    accuracy_delta(&experiment(state, before)?, &experiment(state, after)?)
}

/// Scores restricted to `ids`, in their original order.
pub fn restrict_scores(scores: &FamiliarityScores, ids: &HashSet<String>) -> FamiliarityScores {
    FamiliarityScores {
        entries: scores.entries.iter().filter(|e| ids.contains(&e.id)).cloned().collect(),
        model: scores.model.clone(),
    }
}
