//! Human triage of the least familiar samples.
//!
//! Familiarity alone does not separate mislabelled or corrupted samples from
//! rare but valid ones; each queue entry carries a verdict set by a reviewer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{PlanMode, ResamplePlan};
use crate::familiarity::{tail, FamiliarityScores, TailSide};
use crate::monitor::SampleRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Noisy,
    Rare,
    Ok,
    #[default]
    Undecided,
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(Verdict::Noisy),
            "rare" => Ok(Verdict::Rare),
            "ok" => Ok(Verdict::Ok),
            "undecided" => Ok(Verdict::Undecided),
            other => Err(Error::Invalid(format!("unknown verdict `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub id: String,
    pub score: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub verdict: Verdict,
}

/// Ordered least familiar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub fraction: f64,
    pub entries: Vec<ReviewEntry>,
}

impl ReviewQueue {
    pub fn set_verdict(&mut self, id: &str, verdict: Verdict) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("`{id}` is not in the review queue")))?;
        entry.verdict = verdict;
        Ok(())
    }

    /// Carry verdicts over from an earlier review of the same samples.
    pub fn apply_verdicts(&mut self, verdicts: &BTreeMap<String, Verdict>) {
        for e in &mut self.entries {
            if let Some(v) = verdicts.get(&e.id) {
                e.verdict = *v;
            }
        }
    }

    /// Removal-only plan for every entry marked noisy, in queue order.
    pub fn removal_plan(&self) -> ResamplePlan {
        ResamplePlan {
            mode: PlanMode::RemovalOnly,
            remove_ids: self
                .entries
                .iter()
                .filter(|e| e.verdict == Verdict::Noisy)
                .map(|e| e.id.clone())
                .collect(),
            add_ids: Vec::new(),
            pairing: Vec::new(),
            strategy: None,
            base_version: None,
        }
    }
}

pub fn review_queue(
    scores: &FamiliarityScores,
    fraction: f64,
    records: &[SampleRecord],
) -> Result<ReviewQueue> {
    let ids = tail(scores, fraction, TailSide::Least)?;
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let entries = ids
        .into_iter()
        .map(|id| {
            let score = scores.get(&id).unwrap_or(f64::NAN);
            let metadata = by_id.get(id.as_str()).map(|r| r.values.clone()).unwrap_or_default();
            ReviewEntry {
                id,
                score,
                metadata,
                verdict: Verdict::Undecided,
            }
        })
        .collect();
    Ok(ReviewQueue { fraction, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::familiarity::ScoreEntry;
    use crate::resample::{apply_plan, DatasetVersion};

    fn scores(n: usize) -> FamiliarityScores {
        FamiliarityScores {
            entries: (0..n)
                .map(|i| ScoreEntry { id: format!("s{i:05}"), score: -(i as f64) })
                .collect(),
            model: None,
        }
    }

    #[test]
    fn queue_is_least_familiar_first() {
        let s = scores(10_000);
        let records = vec![SampleRecord::new("s09999", 1, &[("hand", "L")])];
        let q = review_queue(&s, 0.001, &records).unwrap();
        assert_eq!(q.entries.len(), 10);
        assert_eq!(q.entries[0].id, "s09999");
        assert_eq!(q.entries[0].metadata["hand"], "L");
        assert!(q.entries.windows(2).all(|w| w[0].score <= w[1].score));
        assert!(q.entries.iter().all(|e| e.verdict == Verdict::Undecided));
    }

    #[test]
    fn verdicts_round_trip_and_export() {
        let s = scores(10_000);
        let mut q = review_queue(&s, 0.001, &[]).unwrap();
        q.set_verdict("s09995", Verdict::Rare).unwrap();
        assert!(q.set_verdict("s00000", Verdict::Noisy).is_err());
        let back: ReviewQueue = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.entries.iter().find(|e| e.id == "s09995").unwrap().verdict, Verdict::Rare);

        let ids: Vec<String> = q.entries.iter().map(|e| e.id.clone()).collect();
        for id in &ids {
            q.set_verdict(id, Verdict::Noisy).unwrap();
        }
        let plan = q.removal_plan();
        assert_eq!(plan.remove_ids.len(), 10);
        assert!(plan.add_ids.is_empty());
        let ds = DatasetVersion::new(1, s.entries.iter().map(|e| e.id.clone()));
        assert_eq!(apply_plan(&ds, &plan).unwrap().len(), 9_990);
    }
}
