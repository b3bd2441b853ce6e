//! Leave-one-group-out training splits and per-group accuracy matrices.
//!
//! Every group in the training split is downsampled to the smallest group
//! size, so each leave-one-out variant and the mixed "diverse" variant train
//! on the same number of samples and are evaluated on one shared test set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RefModel;
use crate::familiarity::ActivationMatrix;
use crate::monitor::{tv_distance, SampleRecord};
use crate::plan::CellKey;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooConfig {
    pub test_fraction: f64,
    pub seed: u64,
    /// A diverse draw is accepted when every marginal is within this TV
    /// distance of the pool it was drawn from.
    pub skew_tolerance: f64,
    pub max_skew_attempts: usize,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
            skew_tolerance: 0.05,
            max_skew_attempts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub category: String,
    /// `None` marks the diverse split.
    pub held_out: Option<String>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Training samples per group.
    pub group_counts: BTreeMap<String, usize>,
    /// Largest marginal TV distance of the accepted diverse draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<f64>,
}

impl DatasetSplit {
    pub fn label(&self) -> String {
        match &self.held_out {
            Some(g) => format!("without_{g}"),
            None => "diverse".to_string(),
        }
    }
}

/// Largest per-dimension TV distance between the marginals of `sample` and
/// `pool`, over every dimension present in `pool`.
fn marginal_skew(sample: &[&SampleRecord], pool: &[&SampleRecord]) -> f64 {
    let dims: BTreeSet<&str> = pool.iter().flat_map(|r| r.values.keys().map(String::as_str)).collect();
    let mut worst: f64 = 0.0;
    for d in dims {
        let cats: BTreeSet<&str> = pool.iter().filter_map(|r| r.value(d)).collect();
        let hist = |rs: &[&SampleRecord]| -> Option<Vec<f64>> {
            let vals: Vec<&str> = rs.iter().filter_map(|r| r.value(d)).collect();
            if vals.is_empty() {
                return None;
            }
            Some(
                cats.iter()
                    .map(|c| vals.iter().filter(|v| *v == c).count() as f64 / vals.len() as f64)
                    .collect(),
            )
        };
        if let (Some(p), Some(q)) = (hist(sample), hist(pool)) {
            worst = worst.max(tv_distance(&p, &q).unwrap_or(1.0));
        }
    }
    worst
}

pub fn make_loo_splits(records: &[SampleRecord], category: &str, config: &LooConfig) -> Result<Vec<DatasetSplit>> {
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(Error::OutOfRange(format!("test fraction {}", config.test_fraction)));
    }
    let mut sorted: Vec<&SampleRecord> = records.iter().filter(|r| r.value(category).is_some()).collect();
    if sorted.is_empty() {
        return Err(Error::UnknownDimension(category.to_string()));
    }
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut groups: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &sorted {
        groups.entry(r.value(category).unwrap()).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(Error::Invalid(format!("`{category}` has fewer than two groups")));
    }
    if let Some((g, _)) = groups.iter().find(|(_, rs)| rs.len() < 2) {
        return Err(Error::Invalid(format!("group `{g}` has fewer than two samples")));
    }

    // Records sharing a session move together; a record without one is its
    // own unit. A unit counts toward the group of its first record.
    let mut units: BTreeMap<String, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &sorted {
        let key = match &r.session {
            Some(s) => format!("s:{s}"),
            None => format!("r:{}", r.id),
        };
        units.entry(key).or_default().push(r);
    }
    let mut unit_list: Vec<Vec<&SampleRecord>> = units.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    unit_list.shuffle(&mut rng);

    let target: HashMap<&str, usize> = groups
        .iter()
        .map(|(g, rs)| {
            let t = (config.test_fraction * rs.len() as f64).round() as usize;
            (*g, t.clamp(1, rs.len() - 1))
        })
        .collect();
    let mut in_test: HashMap<&str, usize> = HashMap::new();
    let mut train: Vec<&SampleRecord> = Vec::new();
    let mut test: Vec<&SampleRecord> = Vec::new();
    for unit in unit_list {
        let g = unit[0].value(category).unwrap();
        let have = in_test.entry(g).or_insert(0);
        if *have < target[g] {
            *have += unit.len();
            test.extend(unit);
        } else {
            train.extend(unit);
        }
    }

    let mut train_groups: BTreeMap<&str, Vec<&SampleRecord>> = groups.keys().map(|g| (*g, Vec::new())).collect();
    for r in &train {
        train_groups.get_mut(r.value(category).unwrap()).unwrap().push(r);
    }
    if let Some((g, _)) = train_groups.iter().find(|(_, rs)| rs.is_empty()) {
        return Err(Error::Invalid(format!(
            "group `{g}` has no training samples once sessions are kept whole"
        )));
    }
    let n_min = train_groups.values().map(Vec::len).min().unwrap();
    let mut kept: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for (g, rs) in &mut train_groups {
        rs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut pick = index::sample(&mut rng, rs.len(), n_min).into_vec();
        pick.sort_unstable();
        kept.insert(g, pick.into_iter().map(|i| rs[i]).collect());
    }

    let mut test_ids: Vec<String> = test.iter().map(|r| r.id.clone()).collect();
    test_ids.sort();
    let train_size = (groups.len() - 1) * n_min;
    let mut splits = Vec::with_capacity(groups.len() + 1);
    for g in groups.keys() {
        let mut ids: Vec<String> = kept
            .iter()
            .filter(|(h, _)| *h != g)
            .flat_map(|(_, rs)| rs.iter().map(|r| r.id.clone()))
            .collect();
        ids.sort();
        let group_counts = kept
            .keys()
            .map(|h| (h.to_string(), if h == g { 0 } else { n_min }))
            .collect();
        splits.push(DatasetSplit {
            category: category.to_string(),
            held_out: Some(g.to_string()),
            train_ids: ids,
            test_ids: test_ids.clone(),
            group_counts,
            skew: None,
        });
    }

    let pool: Vec<&SampleRecord> = kept.values().flatten().copied().collect();
    let mut best: Option<(f64, Vec<&SampleRecord>)> = None;
    for _ in 0..config.max_skew_attempts.max(1) {
        let draw: Vec<&SampleRecord> = index::sample(&mut rng, pool.len(), train_size)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let skew = marginal_skew(&draw, &pool);
        if best.as_ref().is_none_or(|(s, _)| skew < *s) {
            best = Some((skew, draw));
        }
        if skew < config.skew_tolerance {
            break;
        }
    }
    let (skew, draw) = best.unwrap();
    let mut group_counts: BTreeMap<String, usize> = kept.keys().map(|g| (g.to_string(), 0)).collect();
    for r in &draw {
        *group_counts.get_mut(r.value(category).unwrap()).unwrap() += 1;
    }
    let mut ids: Vec<String> = draw.iter().map(|r| r.id.clone()).collect();
    ids.sort();
    splits.push(DatasetSplit {
        category: category.to_string(),
        held_out: None,
        train_ids: ids,
        test_ids,
        group_counts,
        skew: Some(skew),
    });
    Ok(splits)
}

/// Accuracy of each model (columns) on each group's test subset (rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub dimensions: Vec<String>,
    pub groups: Vec<String>,
    pub models: Vec<String>,
    /// `cells[group][model]`; `None` when the group has no test samples.
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<usize>,
    pub overall: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn cell(&self, group: &str, model: &str) -> Option<f64> {
        let g = self.groups.iter().position(|x| x == group)?;
        let m = self.models.iter().position(|x| x == model)?;
        self.cells[g][m]
    }

    /// Delimited text, one row per group; empty cells are blank.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string(), "n".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (g, row) in self.groups.iter().zip(&self.cells) {
            let n = self.counts[self.groups.iter().position(|x| x == g).unwrap()];
            let mut line = vec![g.clone(), n.to_string()];
            line.extend(row.iter().map(fmt));
            w.write_record(&line)?;
        }
        let total: usize = self.counts.iter().sum();
        let mut line = vec!["overall".to_string(), total.to_string()];
        line.extend(self.overall.iter().map(fmt));
        w.write_record(&line)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Groups are every combination of the categories observed in `records`
/// across `dims`, in sorted order. `test` rows are matched to `records` and
/// `labels` by id.
pub fn group_accuracy_matrix(
    models: &[(String, &RefModel)],
    test: &ActivationMatrix,
    labels: &BTreeMap<String, usize>,
    records: &[SampleRecord],
    dims: &[String],
) -> Result<AccuracyMatrix> {
    if dims.is_empty() {
        return Err(Error::Empty("dimension subset".into()));
    }
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut keys = vec![Vec::<(String, String)>::new()];
    for d in dims {
        let cats: BTreeSet<&str> = records.iter().filter_map(|r| r.value(d)).collect();
        if cats.is_empty() {
            return Err(Error::UnknownDimension(d.clone()));
        }
        keys = keys
            .iter()
            .flat_map(|k| {
                cats.iter().map(move |c| {
                    let mut k = k.clone();
                    k.push((d.clone(), c.to_string()));
                    k
                })
            })
            .collect();
    }
    let groups: Vec<String> = keys.into_iter().map(|k| CellKey(k).label()).collect();
    let group_pos: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();

    let mut truth = Vec::with_capacity(test.nrows());
    let mut row_group = Vec::with_capacity(test.nrows());
    for id in &test.ids {
        truth.push(*labels.get(id).ok_or_else(|| Error::NotFound(format!("no label for `{id}`")))?);
        let rec = by_id.get(id.as_str());
        let key = rec.and_then(|r| {
            dims.iter()
                .map(|d| r.value(d).map(|v| (d.clone(), v.to_string())))
                .collect::<Option<Vec<_>>>()
        });
        row_group.push(key.map(|k| group_pos[CellKey(k).label().as_str()]));
    }
    let mut counts = vec![0usize; groups.len()];
    for g in row_group.iter().flatten() {
        counts[*g] += 1;
    }

    let mut cells = vec![vec![None; models.len()]; groups.len()];
    let mut overall = Vec::with_capacity(models.len());
    for (m, (_, model)) in models.iter().enumerate() {
        let pred = model.predict(&test.data)?;
        let mut hits = vec![0usize; groups.len()];
        for ((p, y), g) in pred.iter().zip(&truth).zip(&row_group) {
            if let (Some(g), true) = (g, p == y) {
                hits[*g] += 1;
            }
        }
        for g in 0..groups.len() {
            if counts[g] > 0 {
                cells[g][m] = Some(hits[g] as f64 / counts[g] as f64);
            }
        }
        let correct = pred.iter().zip(&truth).filter(|(p, y)| p == y).count();
        overall.push((!pred.is_empty()).then(|| correct as f64 / pred.len() as f64));
    }
    Ok(AccuracyMatrix {
        dimensions: dims.to_vec(),
        groups,
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        counts,
        overall,
    })
}

/// `after - before` per cell; model labels come from `after`.
pub fn accuracy_delta(before: &AccuracyMatrix, after: &AccuracyMatrix) -> Result<AccuracyMatrix> {
    if before.groups != after.groups || before.dimensions != after.dimensions {
        return Err(Error::Invalid("accuracy matrices have different group axes".into()));
    }
    if before.models.len() != after.models.len() {
        return Err(Error::DimensionMismatch {
            expected: before.models.len(),
            found: after.models.len(),
        });
    }
    let sub = |a: &Option<f64>, b: &Option<f64>| match (a, b) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    Ok(AccuracyMatrix {
        dimensions: after.dimensions.clone(),
        groups: after.groups.clone(),
        models: after.models.clone(),
        cells: before
            .cells
            .iter()
            .zip(&after.cells)
            .map(|(b, a)| b.iter().zip(a).map(|(x, y)| sub(x, y)).collect())
            .collect(),
        counts: after.counts.clone(),
        overall: before.overall.iter().zip(&after.overall).map(|(x, y)| sub(x, y)).collect(),
    })
}
