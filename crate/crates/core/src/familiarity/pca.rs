//! Principal component projection of activation matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ActivationMatrix;
use crate::{Error, Result};

/// Relative singular-value cutoff below which the data is treated as rank 0.
const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` rows of length `M`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    fn component_matrix(&self) -> DMatrix<f64> {
        let m = self.input_dim();
        DMatrix::from_fn(self.output_dim(), m, |r, c| self.components[r][c])
    }

    /// `(x - mean) * components^T` for every row.
    pub fn transform(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: data.ncols(),
            });
        }
        let mean = DVector::from_column_slice(&self.mean).transpose();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        Ok(centered * self.component_matrix().transpose())
    }

    /// Map projected rows back to the input space.
    pub fn inverse_transform(&self, projected: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if projected.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: projected.ncols(),
            });
        }
        let mut out = projected * self.component_matrix();
        let mean = DVector::from_column_slice(&self.mean).transpose();
        for mut row in out.row_iter_mut() {
            row += &mean;
        }
        Ok(out)
    }
}

/// Fit a `d`-component PCA by SVD of the centered data.
///
/// Each component's sign is fixed so that its largest-magnitude entry is
/// positive.
pub fn fit_pca(acts: &ActivationMatrix, d: usize) -> Result<PcaModel> {
    let data = &acts.data;
    let (n, m) = data.shape();
    if n < 2 {
        return Err(Error::OutOfRange(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d < 1 || d > (n - 1).min(m) {
        return Err(Error::OutOfRange(format!(
            "target dimension {d} outside 1..={}",
            (n - 1).min(m)
        )));
    }
    let mean: Vec<f64> = data.column_iter().map(|c| c.mean()).collect();
    let mean_row = DVector::from_column_slice(&mean).transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean_row;
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let top = svd.singular_values[order[0]];
    let scale = data.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    if top <= RANK_EPS * scale * (n as f64).sqrt() {
        return Err(Error::ZeroVariance);
    }

    let mut components = Vec::with_capacity(d);
    let mut explained_variance = Vec::with_capacity(d);
    for &idx in order.iter().take(d) {
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(row);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}
