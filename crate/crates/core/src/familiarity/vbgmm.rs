//! Variational Bayesian Gaussian mixture with full covariances.
//!
//! The model places a symmetric Dirichlet prior on the mixing weights and a
//! Gaussian-Wishart prior on each component's mean and precision. Fitting
//! alternates the responsibility update with the closed-form updates of the
//! variational posteriors, and records the evidence lower bound after every
//! sweep. Because both half-steps are exact coordinate-ascent moves, the
//! recorded bound never decreases beyond round-off.
//!
//! Scoring uses the plug-in mixture: expected weights `alpha_k / sum(alpha)`,
//! posterior mean locations `m_k` and covariances `W_k^{-1} / nu_k`, with the
//! regularization floor added to the diagonal.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::kmeans::kmeans_pp;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VbGmmConfig {
    pub k_max: usize,
    /// Dirichlet concentration; defaults to `1 / k_max`.
    pub weight_concentration_prior: Option<f64>,
    pub mean_precision_prior: f64,
    /// Absolute change in the bound below which fitting stops.
    pub convergence_tol: f64,
    pub max_iter: usize,
    pub regularization_floor: f64,
    /// Components whose expected share of the data falls below this are
    /// dropped from the plug-in mixture.
    pub prune_threshold: f64,
    /// Components explaining fewer points than this are also dropped; such
    /// a component memorises its members rather than estimating a density.
    /// `None` means `d + 1`, the fewest points that determine a full
    /// covariance.
    #[serde(default)]
    pub min_support: Option<f64>,
    pub seed: u64,
}

impl Default for VbGmmConfig {
    fn default() -> Self {
        Self {
            k_max: 32,
            weight_concentration_prior: None,
            mean_precision_prior: 1.0,
            convergence_tol: 1e-3,
            max_iter: 100,
            regularization_floor: 1e-6,
            prune_threshold: 1e-4,
            min_support: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub weight_concentration: f64,
    pub mean_precision: f64,
    pub mean: Vec<f64>,
    pub degrees_of_freedom: f64,
    /// Inverse Wishart scale, `W0^{-1}`.
    pub scale_inverse: Vec<Vec<f64>>,
}

/// Posterior hyper-parameters of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalComponent {
    pub concentration: f64,
    pub mean_precision: f64,
    pub mean: Vec<f64>,
    pub degrees_of_freedom: f64,
    /// `W_k^{-1}`.
    pub scale_inverse: Vec<Vec<f64>>,
}

/// One plug-in Gaussian of the scoring mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbGmmModel {
    pub dim: usize,
    pub k_max: usize,
    pub config: VbGmmConfig,
    pub prior: Prior,
    pub variational: Vec<VariationalComponent>,
    pub components: Vec<GmmComponent>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |r, c| rows[r][c])
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `ln B(W, nu)` of the Wishart normaliser, given `ln|W|`.
fn ln_wishart_norm(ln_det_w: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    let mut s = -0.5 * nu * ln_det_w - 0.5 * nu * df * std::f64::consts::LN_2
        - 0.25 * df * (df - 1.0) * std::f64::consts::PI.ln();
    for i in 1..=d {
        s -= ln_gamma(0.5 * (nu + 1.0 - i as f64));
    }
    s
}

/// Working state for one component: posterior parameters plus factors of
/// `W_k^{-1} = L L^T`. Means are relative to the data mean.
struct Component {
    alpha: f64,
    beta: f64,
    nu: f64,
    mean: DVector<f64>,
    scale_inv: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `L^{-1}`, so that `(x - m)^T W (x - m) = |L^{-1} (x - m)|^2`.
    linv: DMatrix<f64>,
}

impl Component {
    /// `ln|W_k|` from the factor of its inverse.
    fn ln_det_w(&self) -> f64 {
        -2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    fn expected_ln_det_precision(&self, d: usize) -> f64 {
        let mut s = d as f64 * std::f64::consts::LN_2 + self.ln_det_w();
        for i in 1..=d {
            s += digamma(0.5 * (self.nu + 1.0 - i as f64));
        }
        s
    }

    fn mahalanobis_w(&self, v: &DVector<f64>) -> f64 {
        (&self.linv * v).norm_squared()
    }
}

/// Sufficient statistics of one component under the current responsibilities.
struct Stats {
    count: f64,
    xbar: DVector<f64>,
    scatter: DMatrix<f64>,
}

/// Rows per block in the blocked products; bounds scratch memory.
const BLOCK: usize = 2048;

struct Fitter {
    /// Points minus their mean, `N x d`.
    points: DMatrix<f64>,
    n: usize,
    d: usize,
    prior: PriorState,
}

/// Prior hyper-parameters; the prior mean is the data mean, which is the
/// origin of the working coordinates.
struct PriorState {
    alpha: f64,
    beta: f64,
    nu: f64,
    scale_inv: DMatrix<f64>,
    ln_det_w: f64,
}

impl Fitter {
    fn stats(&self, resp: &DMatrix<f64>) -> Vec<Stats> {
        let (n, d, k) = (self.n, self.d, resp.ncols());
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect();
        let first = resp.transpose() * &self.points;
        // Second moments sum_i r_ik x_i x_i^T, one packed upper triangle per row.
        let mut second = DMatrix::<f64>::zeros(k, pairs.len());
        let mut start = 0;
        while start < n {
            let rows = BLOCK.min(n - start);
            let block = self.points.rows(start, rows);
            let mut outer = DMatrix::<f64>::zeros(rows, pairs.len());
            for (t, &(a, b)) in pairs.iter().enumerate() {
                let (ca, cb) = (block.column(a), block.column(b));
                for (o, (x, y)) in outer.column_mut(t).iter_mut().zip(ca.iter().zip(cb.iter())) {
                    *o = x * y;
                }
            }
            second += resp.rows(start, rows).transpose() * outer;
            start += rows;
        }
        (0..k)
            .map(|j| {
                let count: f64 = resp.column(j).sum();
                if count <= 0.0 {
                    return Stats {
                        count: 0.0,
                        xbar: DVector::zeros(d),
                        scatter: DMatrix::zeros(d, d),
                    };
                }
                let xbar: DVector<f64> = first.row(j).transpose() / count;
                let mut scatter = DMatrix::zeros(d, d);
                for (t, &(a, b)) in pairs.iter().enumerate() {
                    let v = second[(j, t)] - count * xbar[a] * xbar[b];
                    scatter[(a, b)] = v;
                    scatter[(b, a)] = v;
                }
                Stats { count, xbar, scatter }
            })
            .collect()
    }

    fn update(&self, stats: &[Stats]) -> Result<Vec<Component>> {
        let p = &self.prior;
        let identity = DMatrix::<f64>::identity(self.d, self.d);
        stats
            .iter()
            .map(|s| {
                let beta = p.beta + s.count;
                let mean = &s.xbar * (s.count / beta);
                let mut scale_inv =
                    &p.scale_inv + &s.scatter + (&s.xbar * s.xbar.transpose()) * (p.beta * s.count / beta);
                symmetrize(&mut scale_inv);
                let chol = Cholesky::new(scale_inv.clone()).ok_or_else(|| {
                    Error::Invalid("component scale matrix lost positive definiteness".into())
                })?;
                let linv = chol
                    .l_dirty()
                    .solve_lower_triangular(&identity)
                    .ok_or_else(|| Error::Invalid("singular component scale".into()))?
                    .lower_triangle();
                Ok(Component {
                    alpha: p.alpha + s.count,
                    beta,
                    nu: p.nu + s.count,
                    mean,
                    scale_inv,
                    chol,
                    linv,
                })
            })
            .collect()
    }

    /// Responsibilities and `sum r ln r` under the current posteriors.
    fn responsibilities(&self, comps: &[Component]) -> (DMatrix<f64>, f64) {
        let (n, d, k) = (self.n, self.d, comps.len());
        let alpha_sum: f64 = comps.iter().map(|c| c.alpha).sum();
        let dg_sum = digamma(alpha_sum);
        // Column block j of `whiten` is linv_j^T, so row i of X * whiten
        // holds linv_j x_i for every component.
        let mut whiten = DMatrix::<f64>::zeros(d, k * d);
        let mut shifts = Vec::with_capacity(k);
        let mut bases = Vec::with_capacity(k);
        for (j, c) in comps.iter().enumerate() {
            whiten.columns_mut(j * d, d).copy_from(&c.linv.transpose());
            shifts.push(&c.linv * &c.mean);
            let ln_pi = digamma(c.alpha) - dg_sum;
            let ln_lambda = c.expected_ln_det_precision(d);
            bases.push(ln_pi + 0.5 * ln_lambda - 0.5 * d as f64 * LN_2PI - 0.5 * d as f64 / c.beta);
        }
        // Column-major scratch: column j holds ln rho_ij, later r_ij.
        let mut resp = DMatrix::<f64>::zeros(n, k);
        let out = resp.as_mut_slice();
        let mut start = 0;
        while start < n {
            let rows = BLOCK.min(n - start);
            let y = self.points.rows(start, rows) * &whiten;
            let y = y.as_slice();
            for (j, c) in comps.iter().enumerate() {
                let dst = &mut out[j * n + start..j * n + start + rows];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..d {
                    let shift = shifts[j][a];
                    let col = &y[(j * d + a) * rows..(j * d + a + 1) * rows];
                    for (q, v) in dst.iter_mut().zip(col) {
                        let t = v - shift;
                        *q += t * t;
                    }
                }
                let (base, half_nu) = (bases[j], 0.5 * c.nu);
                dst.iter_mut().for_each(|q| *q = base - half_nu * *q);
            }
            start += rows;
        }
        // Normalise each row in column passes: e = exp(l - max), r = e / sum(e),
        // and sum_j r ln r = sum_j e (l - max) / sum(e) - ln sum(e).
        let mut max = vec![f64::NEG_INFINITY; n];
        for col in out.chunks_exact(n) {
            for (m, l) in max.iter_mut().zip(col) {
                *m = m.max(*l);
            }
        }
        let mut sum = vec![0.0; n];
        let mut weighted = vec![0.0; n];
        for col in out.chunks_exact_mut(n) {
            for (i, l) in col.iter_mut().enumerate() {
                let shifted = *l - max[i];
                // exp underflows to zero below about -745
                let e = if shifted < -750.0 { 0.0 } else { shifted.exp() };
                sum[i] += e;
                weighted[i] += e * shifted;
                *l = e;
            }
        }
        let inv: Vec<f64> = sum.iter().map(|s| 1.0 / s).collect();
        for col in out.chunks_exact_mut(n) {
            for (r, s) in col.iter_mut().zip(&inv) {
                *r *= s;
            }
        }
        let entropy_term = (0..n).map(|i| weighted[i] / sum[i] - sum[i].ln()).sum();
        (resp, entropy_term)
    }

    fn elbo(&self, stats: &[Stats], comps: &[Component], r_ln_r: f64) -> f64 {
        let d = self.d;
        let df = d as f64;
        let p = &self.prior;
        let k = comps.len() as f64;
        let alpha_sum: f64 = comps.iter().map(|c| c.alpha).sum();
        let dg_sum = digamma(alpha_sum);

        let mut total = 0.0;
        let mut ln_q_pi = ln_gamma(alpha_sum);
        let mut ln_p_pi = ln_gamma(k * p.alpha) - k * ln_gamma(p.alpha);
        for (s, c) in stats.iter().zip(comps) {
            let ln_pi = digamma(c.alpha) - dg_sum;
            let ln_lambda = c.expected_ln_det_precision(d);
            let w = c.linv.tr_mul(&c.linv);

            // E[ln p(X | Z, mu, Lambda)]
            let tr_sw = (&s.scatter * &w).trace();
            let dev_w = c.mahalanobis_w(&(&s.xbar - &c.mean));
            total += 0.5
                * (s.count * (ln_lambda - df / c.beta - df * LN_2PI)
                    - c.nu * tr_sw
                    - c.nu * s.count * dev_w);

            // E[ln p(Z | pi)]
            total += s.count * ln_pi;

            ln_p_pi += (p.alpha - 1.0) * ln_pi;
            ln_q_pi += (c.alpha - 1.0) * ln_pi - ln_gamma(c.alpha);

            // E[ln p(mu, Lambda)]; the prior mean is the origin
            let mdev_w = c.mahalanobis_w(&c.mean);
            total += 0.5
                * (df * (p.beta / std::f64::consts::TAU).ln() + ln_lambda
                    - df * p.beta / c.beta
                    - p.beta * c.nu * mdev_w);
            total += ln_wishart_norm(p.ln_det_w, p.nu, d);
            total += 0.5 * (p.nu - df - 1.0) * ln_lambda;
            total -= 0.5 * c.nu * (&p.scale_inv * &w).trace();

            // E[ln q(mu, Lambda)]
            let entropy_wishart = -ln_wishart_norm(c.ln_det_w(), c.nu, d)
                - 0.5 * (c.nu - df - 1.0) * ln_lambda
                + 0.5 * c.nu * df;
            total -= 0.5 * ln_lambda + 0.5 * df * (c.beta / std::f64::consts::TAU).ln()
                - 0.5 * df
                - entropy_wishart;
        }
        total + ln_p_pi - ln_q_pi - r_ln_r
    }
}

/// Fit a variational Gaussian mixture to the rows of `points`.
pub fn fit_vbgmm(points: &DMatrix<f64>, config: &VbGmmConfig) -> Result<VbGmmModel> {
    let (n, d) = points.shape();
    if d == 0 {
        return Err(Error::Empty("points have no columns".into()));
    }
    if n <= d {
        return Err(Error::OutOfRange(format!(
            "need more points than dimensions (N={n}, d={d})"
        )));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mixture input".into()));
    }
    if config.max_iter < 1 {
        return Err(Error::OutOfRange("max_iter must be at least 1".into()));
    }
    if config.k_max < 1 {
        return Err(Error::OutOfRange("k_max must be at least 1".into()));
    }
    let alpha0 = config
        .weight_concentration_prior
        .unwrap_or(1.0 / config.k_max as f64);
    if [alpha0, config.mean_precision_prior].iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::OutOfRange("prior concentrations must be positive".into()));
    }

    let mean0: DVector<f64> = points.row_mean().transpose();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean0.transpose();
    }
    let mut scale_inv0 = centered.tr_mul(&centered) / (n - 1) as f64;
    for i in 0..d {
        scale_inv0[(i, i)] += config.regularization_floor;
    }
    symmetrize(&mut scale_inv0);
    let chol0 = Cholesky::new(scale_inv0.clone())
        .ok_or_else(|| Error::Invalid("data covariance is not positive definite".into()))?;
    let ln_det_w0 = -2.0 * chol0.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();

    let fitter = Fitter {
        points: centered,
        n,
        d,
        prior: PriorState {
            alpha: alpha0,
            beta: config.mean_precision_prior,
            nu: d as f64,
            scale_inv: scale_inv0,
            ln_det_w: ln_det_w0,
        },
    };

    let k = config.k_max.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rows: Vec<Vec<f64>> = points.row_iter().map(|r| r.iter().copied().collect()).collect();
    let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let labels = kmeans_pp(&row_refs, k, 20, &mut rng);
    let mut resp = DMatrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }

    let mut comps = fitter.update(&fitter.stats(&resp))?;
    let mut elbo_trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        let (r, r_ln_r) = fitter.responsibilities(&comps);
        let stats = fitter.stats(&r);
        comps = fitter.update(&stats)?;
        let bound = fitter.elbo(&stats, &comps, r_ln_r);
        if !bound.is_finite() {
            return Err(Error::NonFinite("evidence lower bound".into()));
        }
        let prev = elbo_trace.last().copied();
        elbo_trace.push(bound);
        if let Some(prev) = prev {
            if (bound - prev).abs() < config.convergence_tol {
                converged = true;
                break;
            }
        }
    }

    // A component is pruned when its share of the data, N_k / N, is below the
    // threshold (E[pi_k] itself never drops below alpha0 / (K alpha0 + N)), or
    // when N_k is below the minimum support.
    let min_support = config.min_support.unwrap_or(d as f64 + 1.0);
    let alpha_sum: f64 = comps.iter().map(|c| c.alpha).sum();
    let mut kept: Vec<GmmComponent> = comps
        .iter()
        .filter(|c| {
            let support = c.alpha - alpha0;
            support / n as f64 >= config.prune_threshold && support >= min_support
        })
        .map(|c| {
            let mut cov = &c.scale_inv / c.nu;
            for i in 0..d {
                cov[(i, i)] += config.regularization_floor;
            }
            GmmComponent {
                weight: c.alpha / alpha_sum,
                mean: (&c.mean + &mean0).iter().copied().collect(),
                covariance: to_rows(&cov),
            }
        })
        .collect();
    if kept.is_empty() {
        // every component is below the bar; fall back to the largest
        let c = comps
            .iter()
            .max_by(|a, b| a.alpha.total_cmp(&b.alpha))
            .expect("k_max >= 1");
        let mut cov = &c.scale_inv / c.nu;
        for i in 0..d {
            cov[(i, i)] += config.regularization_floor;
        }
        kept.push(GmmComponent {
            weight: 1.0,
            mean: (&c.mean + &mean0).iter().copied().collect(),
            covariance: to_rows(&cov),
        });
    }
    let kept_sum: f64 = kept.iter().map(|c| c.weight).sum();
    for c in &mut kept {
        c.weight /= kept_sum;
    }

    Ok(VbGmmModel {
        dim: d,
        k_max: config.k_max,
        config: config.clone(),
        prior: Prior {
            weight_concentration: alpha0,
            mean_precision: fitter.prior.beta,
            mean: mean0.iter().copied().collect(),
            degrees_of_freedom: fitter.prior.nu,
            scale_inverse: to_rows(&fitter.prior.scale_inv),
        },
        variational: comps
            .iter()
            .map(|c| VariationalComponent {
                concentration: c.alpha,
                mean_precision: c.beta,
                mean: (&c.mean + &mean0).iter().copied().collect(),
                degrees_of_freedom: c.nu,
                scale_inverse: to_rows(&c.scale_inv),
            })
            .collect(),
        components: kept,
        elbo_trace,
        converged,
        seed: config.seed,
    })
}

/// Precomputed plug-in mixture for repeated log-density evaluation.
pub struct MixtureDensity {
    dim: usize,
    terms: Vec<DensityTerm>,
}

struct DensityTerm {
    /// `ln w_k - d/2 ln 2pi - 1/2 ln|Sigma_k|`.
    offset: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl MixtureDensity {
    pub fn new(components: &[GmmComponent]) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::Empty("mixture has no components".into()))?;
        let terms = components
            .iter()
            .map(|c| {
                let chol = Cholesky::new(from_rows(&c.covariance)).ok_or_else(|| {
                    Error::Invalid("component covariance is not positive definite".into())
                })?;
                let half_ln_det: f64 = chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum();
                Ok(DensityTerm {
                    offset: c.weight.ln() - 0.5 * dim as f64 * LN_2PI - half_ln_det,
                    mean: DVector::from_column_slice(&c.mean),
                    chol,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim, terms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `ln sum_k w_k N(x; mu_k, Sigma_k)` via log-sum-exp.
    pub fn log_density(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: point.len(),
            });
        }
        if point.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("scored point".into()));
        }
        let x = DVector::from_column_slice(point);
        let logs: Vec<f64> = self
            .terms
            .iter()
            .map(|t| {
                let diff = &x - &t.mean;
                let y = t
                    .chol
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("non-singular factor");
                t.offset - 0.5 * y.norm_squared()
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

impl VbGmmModel {
    pub fn density(&self) -> Result<MixtureDensity> {
        MixtureDensity::new(&self.components)
    }

    pub fn effective_components(&self) -> usize {
        self.components.len()
    }
}

/// Log-likelihood of one point under the plug-in mixture.
pub fn log_likelihood(gmm: &VbGmmModel, point: &[f64]) -> Result<f64> {
    gmm.density()?.log_density(point)
}
