//! Metadata matching between unfamiliar exemplars and a candidate pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::monitor::SampleRecord;
use crate::{Error, Result};

/// Above this many exemplar-pool pairs, matching falls back to greedy.
pub const EXACT_PAIR_LIMIT: usize = 512 * 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub exemplar_id: String,
    pub pool_id: String,
    pub cost: f64,
}

/// Weighted count of dimensions on which two records disagree. Dimensions
/// without an explicit weight count 1.
pub fn mismatch_cost(
    a: &SampleRecord,
    b: &SampleRecord,
    dims: &[String],
    weights: &BTreeMap<String, f64>,
) -> f64 {
    dims.iter()
        .filter(|d| a.value(d) != b.value(d))
        .map(|d| weights.get(d.as_str()).copied().unwrap_or(1.0))
        .sum()
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Shortest augmenting path with dual potentials, `O(rows^2 * cols)`.
/// Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Cheapest pairs first; ties by row then column index.
pub fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    let mut pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (cost[i][j], i, j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_done = vec![false; n];
    let mut col_done = vec![false; m];
    let mut assignment = vec![usize::MAX; n];
    let mut left = n;
    for (_, i, j) in pairs {
        if row_done[i] || col_done[j] {
            continue;
        }
        row_done[i] = true;
        col_done[j] = true;
        assignment[i] = j;
        left -= 1;
        if left == 0 {
            break;
        }
    }
    assignment
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Pair each exemplar with a distinct pool record minimising total weighted
/// metadata mismatch. Exact up to [`EXACT_PAIR_LIMIT`] pairs, greedy above.
/// Inputs are ordered by id first so the result does not depend on input
/// order.
pub fn match_candidates(
    exemplars: &[SampleRecord],
    pool: &[SampleRecord],
    dims: &[String],
    weights: &BTreeMap<String, f64>,
) -> Result<Vec<Pairing>> {
    if let Some((d, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidWeight {
            index: dims.iter().position(|x| x == d).unwrap_or(0),
            value: *w,
        });
    }
    if pool.len() < exemplars.len() {
        return Err(Error::PoolExhausted {
            needed: exemplars.len(),
            available: pool.len(),
        });
    }
    let mut ex: Vec<&SampleRecord> = exemplars.iter().collect();
    ex.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pl: Vec<&SampleRecord> = pool.iter().collect();
    pl.sort_by(|a, b| a.id.cmp(&b.id));
    let cost: Vec<Vec<f64>> = ex
        .iter()
        .map(|e| pl.iter().map(|p| mismatch_cost(e, p, dims, weights)).collect())
        .collect();
    let assignment = if ex.len() * pl.len() <= EXACT_PAIR_LIMIT {
        min_cost_assignment(&cost)
    } else {
        greedy_assignment(&cost)
    };
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| Pairing {
            exemplar_id: ex[i].id.clone(),
            pool_id: pl[j].id.clone(),
            cost: cost[i][j],
        })
        .collect())
}
