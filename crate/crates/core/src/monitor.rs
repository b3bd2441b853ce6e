//! Collection monitoring: observed distributions against the plan.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::plan::{
    enumerate_intersections, resolve_dimensions, CellKey, DatasetPlan, DimensionKind,
};
use crate::{Error, Result};

const NORMALIZED_TOLERANCE: f64 = 1e-6;

/// One collected sample's metadata. A dimension absent from `values` is a
/// missing value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub wave: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    pub values: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn new(id: &str, wave: u32, values: &[(&str, &str)]) -> Self {
        Self {
            id: id.to_string(),
            wave,
            session: None,
            values: values
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn value(&self, dimension: &str) -> Option<&str> {
        self.values.get(dimension).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectReason {
    UnknownDimension { dimension: String },
    UnknownCategory { dimension: String, value: String },
    DuplicateId,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::UnknownDimension { dimension } => {
                write!(f, "unknown-dimension `{dimension}`")
            }
            RejectReason::UnknownCategory { dimension, value } => {
                write!(f, "unknown-category `{value}` for `{dimension}`")
            }
            RejectReason::DuplicateId => f.write_str("duplicate-id"),
        }
    }
}

pub fn check_record(plan: &DatasetPlan, record: &SampleRecord) -> Option<RejectReason> {
    for (dim, value) in &record.values {
        let Some(spec) = plan.dimension(dim) else {
            return Some(RejectReason::UnknownDimension {
                dimension: dim.clone(),
            });
        };
        if spec.category_index(value).is_none() {
            return Some(RejectReason::UnknownCategory {
                dimension: dim.clone(),
                value: value.clone(),
            });
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestMode {
    /// Reject the whole batch when any record is invalid.
    AllOrNothing,
    /// Accept valid records and report the rest.
    #[default]
    PerRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub rejections: Vec<Rejection>,
}

/// Split a batch into records to append and per-record rejections.
///
/// `existing` holds ids already in the project. In [`IngestMode::AllOrNothing`]
/// a single rejection empties the accepted list.
pub fn screen_records(
    plan: &DatasetPlan,
    existing: &HashSet<String>,
    records: Vec<SampleRecord>,
    mode: IngestMode,
) -> (Vec<SampleRecord>, IngestSummary) {
    let mut seen: HashSet<String> = HashSet::new();
    let mut accepted = Vec::new();
    let mut rejections = Vec::new();
    for record in records {
        let reason = if existing.contains(&record.id) || seen.contains(&record.id) {
            Some(RejectReason::DuplicateId)
        } else {
            check_record(plan, &record)
        };
        match reason {
            Some(reason) => rejections.push(Rejection {
                id: record.id,
                reason,
            }),
            None => {
                seen.insert(record.id.clone());
                accepted.push(record);
            }
        }
    }
    if mode == IngestMode::AllOrNothing && !rejections.is_empty() {
        accepted.clear();
    }
    let summary = IngestSummary {
        accepted: accepted.len(),
        rejected: rejections.len(),
        rejections,
    };
    (accepted, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionCounts {
    pub name: String,
    pub categories: Vec<String>,
    pub counts: Vec<usize>,
    pub missing: usize,
    /// `None` when no record carries a value for this dimension.
    pub proportions: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSnapshot {
    pub wave_filter: Option<u32>,
    pub total: usize,
    pub empty: bool,
    pub dimensions: Vec<DimensionCounts>,
}

impl DistributionSnapshot {
    pub fn dimension(&self, name: &str) -> Option<&DimensionCounts> {
        self.dimensions.iter().find(|d| d.name == name)
    }
}

/// Per-dimension category frequencies, optionally restricted to one wave.
pub fn snapshot(
    plan: &DatasetPlan,
    records: &[SampleRecord],
    wave_filter: Option<u32>,
) -> DistributionSnapshot {
    let included: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| wave_filter.is_none_or(|w| r.wave == w))
        .collect();
    let total = included.len();
    let dimensions = plan
        .dimensions
        .iter()
        .map(|dim| {
            let mut counts = vec![0usize; dim.categories.len()];
            let mut missing = 0;
            for r in &included {
                match r.value(&dim.name).and_then(|v| dim.category_index(v)) {
                    Some(i) => counts[i] += 1,
                    None => missing += 1,
                }
            }
            let observed: usize = counts.iter().sum();
            let proportions = (observed > 0)
                .then(|| counts.iter().map(|&c| c as f64 / observed as f64).collect());
            DimensionCounts {
                name: dim.name.clone(),
                categories: dim.categories.clone(),
                counts,
                missing,
                proportions,
            }
        })
        .collect();
    DistributionSnapshot {
        wave_filter,
        total,
        empty: total == 0,
        dimensions,
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty("probability vector".into()));
    }
    for v in [p, q] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Invalid("probability vector has a negative entry".into()));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > NORMALIZED_TOLERANCE {
            return Err(Error::Invalid(format!(
                "probability vector is not normalized (sums to {s})"
            )));
        }
    }
    Ok(())
}

/// Total-variation distance, half the L1 gap.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Earth mover's distance on the line: the CDF gap integrated over the
/// spacing between consecutive positions.
pub fn emd_1d(p: &[f64], q: &[f64], positions: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    if positions.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: positions.len(),
        });
    }
    if positions.windows(2).any(|w| w[1].is_nan() || w[0].is_nan() || w[1] <= w[0]) {
        return Err(Error::Invalid("positions are not strictly increasing".into()));
    }
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() - 1 {
        cdf_p += p[i];
        cdf_q += q[i];
        total += (cdf_p - cdf_q).abs() * (positions[i + 1] - positions[i]);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Emd,
    Tv,
}

/// Divergence thresholds. EMD thresholds are expressed in units of the
/// dimension's mean bin spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub tv: f64,
    pub emd_spacings: f64,
    /// Absolute per-dimension overrides.
    #[serde(default)]
    pub per_dimension: BTreeMap<String, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tv: 0.10,
            emd_spacings: 1.0,
            per_dimension: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEntry {
    pub dimension: String,
    pub metric: Metric,
    pub value: f64,
    pub threshold: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub wave_filter: Option<u32>,
    pub entries: Vec<DivergenceEntry>,
    pub flagged: Vec<String>,
    /// Dimensions with no observed values in the snapshot.
    pub unobserved: Vec<String>,
}

/// Compare each dimension's observed proportions with the plan.
///
/// Ordinal dimensions use [`emd_1d`] over their positions; categorical ones
/// use [`tv_distance`].
pub fn divergence(
    plan: &DatasetPlan,
    snap: &DistributionSnapshot,
    thresholds: &Thresholds,
) -> Result<DivergenceReport> {
    if snap.total == 0 {
        return Err(Error::Empty("snapshot has no records".into()));
    }
    let mut entries = Vec::new();
    let mut unobserved = Vec::new();
    for dim in &plan.dimensions {
        let observed = snap
            .dimension(&dim.name)
            .and_then(|d| d.proportions.as_ref());
        let Some(observed) = observed else {
            unobserved.push(dim.name.clone());
            continue;
        };
        let (metric, value, default_threshold) = match dim.kind {
            DimensionKind::Categorical => {
                (Metric::Tv, tv_distance(&dim.expected, observed)?, thresholds.tv)
            }
            DimensionKind::Ordinal => {
                let pos = dim.effective_positions();
                let spacing = if pos.len() > 1 {
                    (pos[pos.len() - 1] - pos[0]) / (pos.len() - 1) as f64
                } else {
                    1.0
                };
                (
                    Metric::Emd,
                    emd_1d(&dim.expected, observed, &pos)?,
                    thresholds.emd_spacings * spacing,
                )
            }
        };
        let threshold = thresholds
            .per_dimension
            .get(&dim.name)
            .copied()
            .unwrap_or(default_threshold);
        entries.push(DivergenceEntry {
            dimension: dim.name.clone(),
            metric,
            value,
            threshold,
            flagged: value > threshold,
        });
    }
    let flagged = entries
        .iter()
        .filter(|e| e.flagged)
        .map(|e| e.dimension.clone())
        .collect();
    Ok(DivergenceReport {
        wave_filter: snap.wave_filter,
        entries,
        flagged,
        unobserved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub key: CellKey,
    pub observed_count: usize,
    pub expected_count: f64,
    pub deficit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapConfig {
    pub min_count: usize,
    /// Target is `ceil(min_ratio * expected_count)`.
    pub min_ratio: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            min_count: 0,
            min_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub dimensions: Vec<String>,
    pub total: usize,
    pub config: GapConfig,
    pub undersampled: Vec<GapEntry>,
}

/// Intersection cells whose observed count falls short of
/// `max(min_count, ceil(expected_count))`, largest deficit first.
pub fn gap_report(
    plan: &DatasetPlan,
    records: &[SampleRecord],
    dim_names: &[String],
    config: &GapConfig,
) -> Result<GapReport> {
    let dims = resolve_dimensions(plan, dim_names)?;
    let cells = enumerate_intersections(plan, dim_names)?;
    let mut observed: BTreeMap<CellKey, usize> = BTreeMap::new();
    for r in records {
        let key: Option<Vec<(String, String)>> = dims
            .iter()
            .map(|d| r.value(&d.name).map(|v| (d.name.clone(), v.to_string())))
            .collect();
        if let Some(key) = key {
            *observed.entry(CellKey(key)).or_default() += 1;
        }
    }
    let total = records.len();
    let mut undersampled: Vec<GapEntry> = cells
        .into_iter()
        .filter_map(|cell| {
            let expected_count = cell.expected_proportion * total as f64;
            let scaled = config.min_ratio * expected_count;
            // guard against 0.1 * 30 = 3.0000000000000004 style rounding
            let ceil = (scaled - 1e-9).ceil().max(0.0) as usize;
            let target = config.min_count.max(ceil);
            let count = observed.get(&cell.key).copied().unwrap_or(0);
            (count < target).then(|| GapEntry {
                key: cell.key,
                observed_count: count,
                expected_count,
                deficit: target - count,
            })
        })
        .collect();
    undersampled.sort_by(|a, b| b.deficit.cmp(&a.deficit).then_with(|| a.key.cmp(&b.key)));
    Ok(GapReport {
        dimensions: dims.iter().map(|d| d.name.clone()).collect(),
        total,
        config: config.clone(),
        undersampled,
    })
}
