//! Familiarity-driven dataset edits.
//!
//! The most familiar training samples are swapped out for pool samples whose
//! metadata matches the least familiar ones, keeping the training set size
//! fixed. Three selection strategies are supported:
//!
//! - `topk_swap`: the `k` most familiar out, matches for the `k` least
//!   familiar in.
//! - `window_most`: `k` drawn at random from the `k + i` most familiar; the
//!   `k` least familiar as exemplars.
//! - `window_both`: as `window_most`, with exemplars also drawn from a
//!   `k + i` window on the unfamiliar side.

pub mod matching;
pub mod review;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::familiarity::{FamiliarityScores, ScoreEntry};
use crate::monitor::SampleRecord;
use crate::{Error, Result};

pub use matching::{match_candidates, Pairing};
pub use review::{review_queue, ReviewEntry, ReviewQueue, Verdict};

/// The percentages swept when comparing strategies: 0.5%, 0.1%, 0.05%, 0.01%.
pub const SWEEP_FRACTIONS: [f64; 4] = [0.005, 0.001, 0.0005, 0.0001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    TopkSwap,
    WindowMost,
    WindowBoth,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::TopkSwap,
        StrategyKind::WindowMost,
        StrategyKind::WindowBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::TopkSwap => "topk_swap",
            StrategyKind::WindowMost => "window_most",
            StrategyKind::WindowBoth => "window_both",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "topk_swap" => Ok(StrategyKind::TopkSwap),
            "window_most" => Ok(StrategyKind::WindowMost),
            "window_both" => Ok(StrategyKind::WindowBoth),
            other => Err(Error::Invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    /// `k`, the fraction of the training set swapped.
    pub fraction: f64,
    /// `i`, the window extension as a fraction of the training set.
    pub window: f64,
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn topk_swap(fraction: f64, seed: u64) -> Self {
        Self {
            kind: StrategyKind::TopkSwap,
            fraction,
            window: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::OutOfRange(format!(
                "fraction {} outside (0, 1)",
                self.fraction
            )));
        }
        if !(self.window >= 0.0 && self.window < 1.0) {
            return Err(Error::OutOfRange(format!("window {} outside [0, 1)", self.window)));
        }
        if self.fraction + self.window >= 1.0 {
            return Err(Error::OutOfRange("fraction + window must be below 1".into()));
        }
        if self.kind == StrategyKind::TopkSwap && self.window != 0.0 {
            return Err(Error::Invalid("topk_swap takes no window".into()));
        }
        Ok(())
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Copy)]
enum Side {
    Familiar,
    Unfamiliar,
}

/// Take `count` ids from the first `window_len` entries of `ranked`: all of
/// them when the window is no larger than `count`, otherwise a seeded
/// uniform draw without replacement. The result keeps rank order.
fn draw(ranked: &[&ScoreEntry], count: usize, window_len: usize, seed: u64, side: Side) -> Vec<String> {
    let window_len = window_len.min(ranked.len()).max(count);
    if window_len == count {
        return ranked[..count].iter().map(|e| e.id.clone()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match side {
        Side::Familiar => 1,
        Side::Unfamiliar => 2,
    });
    let mut picked = rand::seq::index::sample(&mut rng, window_len, count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| ranked[i].id.clone()).collect()
}

fn swap_count(scores: &FamiliarityScores, strategy: &SamplingStrategy) -> Result<usize> {
    strategy.validate()?;
    if scores.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    let count = floor_count(strategy.fraction, scores.len());
    if count == 0 {
        return Err(Error::OutOfRange(format!(
            "fraction {} of {} samples selects nothing; use a larger fraction or more data",
            strategy.fraction,
            scores.len()
        )));
    }
    Ok(count)
}

/// Most familiar training ids to take out, most familiar first.
pub fn select_removals(scores: &FamiliarityScores, strategy: &SamplingStrategy) -> Result<Vec<String>> {
    let count = swap_count(scores, strategy)?;
    let ranked = scores.ranked_most_familiar();
    let window_len = match strategy.kind {
        StrategyKind::TopkSwap => count,
        StrategyKind::WindowMost | StrategyKind::WindowBoth => {
            floor_count(strategy.fraction + strategy.window, scores.len())
        }
    };
    Ok(draw(&ranked, count, window_len, strategy.seed, Side::Familiar))
}

/// Least familiar ids whose metadata the additions should match, least
/// familiar first.
pub fn select_exemplars(scores: &FamiliarityScores, strategy: &SamplingStrategy) -> Result<Vec<String>> {
    let count = swap_count(scores, strategy)?;
    let ranked = scores.ranked_least_familiar();
    let window_len = match strategy.kind {
        StrategyKind::TopkSwap | StrategyKind::WindowMost => count,
        StrategyKind::WindowBoth => floor_count(strategy.fraction + strategy.window, scores.len()),
    };
    Ok(draw(&ranked, count, window_len, strategy.seed, Side::Unfamiliar))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Remove and add the same number of samples.
    Substitution,
    /// Remove only (review-driven or automated debugging).
    RemovalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub mode: PlanMode,
    pub remove_ids: Vec<String>,
    pub add_ids: Vec<String>,
    pub pairing: Vec<Pairing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SamplingStrategy>,
    /// Dataset version the plan was generated against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_version: Option<u64>,
}

impl ResamplePlan {
    pub fn empty() -> Self {
        Self {
            mode: PlanMode::Substitution,
            remove_ids: Vec::new(),
            add_ids: Vec::new(),
            pairing: Vec::new(),
            strategy: None,
            base_version: None,
        }
    }

    /// Check internal consistency: no duplicates, disjoint remove/add sets,
    /// and equal sizes for substitution plans.
    pub fn check(&self) -> Result<()> {
        let removes: HashSet<&str> = self.remove_ids.iter().map(String::as_str).collect();
        let adds: HashSet<&str> = self.add_ids.iter().map(String::as_str).collect();
        if removes.len() != self.remove_ids.len() || adds.len() != self.add_ids.len() {
            return Err(Error::Invalid("plan lists an id twice".into()));
        }
        if let Some(id) = removes.intersection(&adds).next() {
            return Err(Error::Invalid(format!("`{id}` is both removed and added")));
        }
        match self.mode {
            PlanMode::Substitution if self.remove_ids.len() != self.add_ids.len() => {
                Err(Error::Invalid("substitution plan breaks sample-size parity".into()))
            }
            PlanMode::RemovalOnly if !self.add_ids.is_empty() => {
                Err(Error::Invalid("removal-only plan adds samples".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_document(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_document(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One immutable version of the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVersion {
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    pub ids: BTreeSet<String>,
}

impl DatasetVersion {
    pub fn new(version: u64, ids: impl IntoIterator<Item = String>) -> Self {
        Self {
            version,
            parent: None,
            ids: ids.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Build a substitution plan for `train`.
///
/// `records` supplies metadata for the training ids; `pool` holds candidate
/// records that are not in the training set.
pub fn build_plan(
    train: &DatasetVersion,
    records: &[SampleRecord],
    scores: &FamiliarityScores,
    pool: &[SampleRecord],
    strategy: &SamplingStrategy,
    dims: &[String],
    weights: &BTreeMap<String, f64>,
) -> Result<ResamplePlan> {
    let scored: HashSet<&str> = scores.entries.iter().map(|e| e.id.as_str()).collect();
    if let Some(missing) = train.ids.iter().find(|id| !scored.contains(id.as_str())) {
        return Err(Error::NotFound(format!("no familiarity score for training id `{missing}`")));
    }
    if let Some(p) = pool.iter().find(|p| train.ids.contains(&p.id)) {
        return Err(Error::Invalid(format!("pool record `{}` is already in the training set", p.id)));
    }
    let train_scores = FamiliarityScores {
        entries: scores
            .entries
            .iter()
            .filter(|e| train.ids.contains(&e.id))
            .cloned()
            .collect(),
        model: scores.model.clone(),
    };
    let remove_ids = select_removals(&train_scores, strategy)?;
    let exemplar_ids = select_exemplars(&train_scores, strategy)?;
    if pool.len() < exemplar_ids.len() {
        return Err(Error::PoolExhausted {
            needed: exemplar_ids.len(),
            available: pool.len(),
        });
    }
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let exemplars = exemplar_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::NotFound(format!("no metadata record for `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairing = match_candidates(&exemplars, pool, dims, weights)?;
    // present pairs in exemplar order, least familiar first
    let rank: HashMap<&str, usize> = exemplar_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    pairing.sort_by_key(|p| rank[p.exemplar_id.as_str()]);
    let plan = ResamplePlan {
        mode: PlanMode::Substitution,
        remove_ids,
        add_ids: pairing.iter().map(|p| p.pool_id.clone()).collect(),
        pairing,
        strategy: Some(*strategy),
        base_version: Some(train.version),
    };
    plan.check()?;
    Ok(plan)
}

/// Apply a plan, producing the next dataset version. The input is not
/// modified.
pub fn apply_plan(train: &DatasetVersion, plan: &ResamplePlan) -> Result<DatasetVersion> {
    plan.check()?;
    if let Some(id) = plan.remove_ids.iter().find(|id| !train.ids.contains(*id)) {
        return Err(Error::StalePlan(format!("`{id}` is not in dataset v{}", train.version)));
    }
    if let Some(id) = plan.add_ids.iter().find(|id| train.ids.contains(*id)) {
        return Err(Error::StalePlan(format!("`{id}` is already in dataset v{}", train.version)));
    }
    let mut ids = train.ids.clone();
    for id in &plan.remove_ids {
        ids.remove(id);
    }
    ids.extend(plan.add_ids.iter().cloned());
    Ok(DatasetVersion {
        version: train.version + 1,
        parent: Some(train.version),
        ids,
    })
}

/// Remove the least familiar `fraction` outright, without review.
///
/// This drops rare-but-valid samples together with noisy ones; prefer the
/// review queue.
pub fn automated_removal(scores: &FamiliarityScores, fraction: f64) -> Result<ResamplePlan> {
    let ids = crate::familiarity::tail(scores, fraction, crate::familiarity::TailSide::Least)?;
    Ok(ResamplePlan {
        mode: PlanMode::RemovalOnly,
        remove_ids: ids,
        add_ids: Vec::new(),
        pairing: Vec::new(),
        strategy: None,
        base_version: None,
    })
}

/// One cell of a strategy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Stable name, e.g. `window_most_k0.0010_i0.0050`.
    pub name: String,
    pub strategy: SamplingStrategy,
    pub plan: ResamplePlan,
}

pub fn sweep_name(strategy: &SamplingStrategy) -> String {
    format!(
        "{}_k{:.4}_i{:.4}",
        strategy.kind.as_str(),
        strategy.fraction,
        strategy.window
    )
}

/// Build one plan per `(kind, fraction)`; window kinds use `window`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    train: &DatasetVersion,
    records: &[SampleRecord],
    scores: &FamiliarityScores,
    pool: &[SampleRecord],
    kinds: &[StrategyKind],
    fractions: &[f64],
    window: f64,
    seed: u64,
    dims: &[String],
    weights: &BTreeMap<String, f64>,
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &fraction in fractions {
            let strategy = SamplingStrategy {
                kind,
                fraction,
                window: if kind == StrategyKind::TopkSwap { 0.0 } else { window },
                seed,
            };
            let plan = build_plan(train, records, scores, pool, &strategy, dims, weights)?;
            out.push(SweepCell {
                name: sweep_name(&strategy),
                strategy,
                plan,
            });
        }
    }
    Ok(out)
}
