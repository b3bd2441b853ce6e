//! Acceptance suite. Each check prints one `acceptance NN <name>: PASS|FAIL`
//! line on stderr (uncaptured) and then asserts, so a failing run shows both
//! the summary line and the panic.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tempfile::TempDir;

use datadesign_cli::run_with;
use datadesign_core::familiarity::{
    default_projection_dim, fit_familiarity, fit_pca, fit_vbgmm, log_likelihood, score_all, ActivationMatrix,
    FamiliarityConfig, GmmComponent, MixtureDensity, VbGmmConfig,
};
use datadesign_core::monitor::{emd_1d, SampleRecord};
use datadesign_core::plan::{create_plan, DimensionDraft};
use datadesign_core::refmodel::{penultimate, train, RefModel, TrainConfig};
use datadesign_core::resample::matching::{assignment_cost, greedy_assignment, match_candidates, min_cost_assignment};
use datadesign_core::resample::{apply_plan, build_plan, DatasetVersion, SamplingStrategy};
use datadesign_core::store::{init_project, read_snapshot, replay, Event, ProjectStore};

/// Checks run one at a time so the runtime limits measure one check, not
/// several sharing the CPU.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "acceptance {id:02} {name}: {} ({detail}) [{:.2}s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

struct Cli {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(project: &Path, args: &[&str]) -> Cli {
    let mut argv = vec!["datadesign", "--project", project.to_str().unwrap(), "-q"];
    argv.extend_from_slice(args);
    let mut input: &[u8] = b"";
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut input, &mut out, &mut err);
    Cli {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn cli_ok(project: &Path, args: &[&str]) -> String {
    let r = cli(project, args);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.stdout
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn write_text(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn matrix_csv(ids: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = String::from("id");
    for j in 0..rows[0].len() {
        s.push_str(&format!(",a{j}"));
    }
    s.push('\n');
    for (id, row) in ids.iter().zip(rows) {
        s.push_str(id);
        for x in row {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_mixture_log_density() {
    let _g = gate();
    let t = Instant::now();

    // single unit-variance component: the density at its mean is 1/sqrt(2 pi)
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<f64> = (0..200).map(|_| 0.7 + normal(&mut rng)).collect();
    let mut gmm = fit_vbgmm(
        &DMatrix::from_column_slice(200, 1, &pts),
        &VbGmmConfig { k_max: 1, ..Default::default() },
    )
    .unwrap();
    gmm.components = vec![GmmComponent { weight: 1.0, mean: vec![0.7], covariance: vec![vec![1.0]] }];
    let at_mean = log_likelihood(&gmm, &[0.7]).unwrap();
    let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let err1 = (at_mean - expected).abs();

    // a fitted 2-D mixture integrates to one over a +-8 sigma box
    let mut rows = Vec::new();
    for i in 0..1200 {
        let (cx, cy, sx, sy) = if i % 3 == 0 { (-3.0, 0.0, 0.6, 1.2) } else { (3.0, 1.0, 1.0, 0.5) };
        rows.push(cx + sx * normal(&mut rng));
        rows.push(cy + sy * normal(&mut rng));
    }
    let data = DMatrix::from_row_slice(1200, 2, &rows);
    let fitted = fit_vbgmm(&data, &VbGmmConfig { k_max: 6, seed: 3, ..Default::default() }).unwrap();
    let density = MixtureDensity::new(&fitted.components).unwrap();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &fitted.components {
        for a in 0..2 {
            let s = c.covariance[a][a].sqrt();
            lo[a] = lo[a].min(c.mean[a] - 8.0 * s);
            hi[a] = hi[a].max(c.mean[a] + 8.0 * s);
        }
    }
    let n = 700;
    let (hx, hy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = [lo[0] + (i as f64 + 0.5) * hx, lo[1] + (j as f64 + 0.5) * hy];
            total += density.log_density(&p).unwrap().exp();
        }
    }
    let integral = total * hx * hy;
    let err2 = (integral - 1.0).abs();

    let el = t.elapsed();
    let pass = err1 <= 1e-9 && err2 <= 1e-3 && el < Duration::from_secs(5);
    verdict(
        1,
        "mixture_log_density",
        pass,
        &format!(
            "ln p(mu) error {err1:.2e}, 2-D integral {integral:.6} over {} components",
            fitted.components.len()
        ),
        el,
    );
    assert!(err1 <= 1e-9, "log density at the mean off by {err1}");
    assert!(err2 <= 1e-3, "integral {integral}");
    assert!(el < Duration::from_secs(5));
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_variational_mixture_recovery() {
    let _g = gate();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pts = Vec::new();
    for c in [-10.0, 10.0] {
        for _ in 0..500 {
            pts.push(c + normal(&mut rng));
        }
    }
    let data = DMatrix::from_column_slice(1000, 1, &pts);
    let model = fit_vbgmm(&data, &VbGmmConfig { k_max: 8, seed: 7, ..Default::default() }).unwrap();
    let mut means: Vec<f64> = model.components.iter().map(|c| c.mean[0]).collect();
    means.sort_by(f64::total_cmp);
    let count_ok = means.len() == 2;
    let mean_err = if count_ok { (means[0] + 10.0).abs().max((means[1] - 10.0).abs()) } else { f64::INFINITY };

    // every fit made here must have a non-decreasing bound
    let mut traces = vec![model.elbo_trace.clone()];
    for seed in 0..4u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        for d in [2usize, 5] {
            let n = 600;
            let rows: Vec<f64> = (0..n * d)
                .map(|i| if (i / d) % 4 == 0 { 4.0 } else { 0.0 } + normal(&mut r))
                .collect();
            let m = fit_vbgmm(
                &DMatrix::from_row_slice(n, d, &rows),
                &VbGmmConfig { k_max: 10, seed, ..Default::default() },
            )
            .unwrap();
            traces.push(m.elbo_trace);
        }
    }
    let worst_drop = traces
        .iter()
        .flat_map(|tr| tr.windows(2).map(|w| w[0] - w[1]))
        .fold(f64::NEG_INFINITY, f64::max);
    let monotone = worst_drop <= 1e-6;

    let el = t.elapsed();
    let pass = count_ok && mean_err <= 0.3 && monotone && el < Duration::from_secs(10);
    verdict(
        2,
        "variational_mixture_recovery",
        pass,
        &format!(
            "{} components at {means:.3?}, worst bound decrease {worst_drop:.2e} over {} fits",
            means.len(),
            traces.len()
        ),
        el,
    );
    assert!(count_ok, "expected 2 components, got {means:?}");
    assert!(mean_err <= 0.3, "means {means:?}");
    assert!(monotone, "bound decreased by {worst_drop}");
    assert!(el < Duration::from_secs(10));
}

// ---------------------------------------------------------------------------

/// Mahalanobis distance of every row from the sample mean, computed with a
/// plain Gauss-Jordan inverse of the sample covariance.
fn mahalanobis(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    // [cov | I] -> [I | cov^-1]
    let mut aug: Vec<Vec<f64>> = cov
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        for x in aug[c].iter_mut() {
            *x /= piv;
        }
        for r in 0..d {
            if r != c {
                let f = aug[r][c];
                let src = aug[c].clone();
                for (x, s) in aug[r].iter_mut().zip(src) {
                    *x -= f * s;
                }
            }
        }
    }
    rows.iter()
        .map(|r| {
            let diff: Vec<f64> = (0..d).map(|j| r[j] - mean[j]).collect();
            (0..d)
                .map(|a| (0..d).map(|b| diff[a] * aug[a][d + b] * diff[b]).sum::<f64>())
                .sum()
        })
        .collect()
}

#[test]
fn acceptance_03_outlier_capture() {
    let _g = gate();
    let t = Instant::now();
    let (n, m, k) = (10_000usize, 8usize, 10usize);
    let mut caught = Vec::new();
    let mut oracle_caught = Vec::new();
    let mut agreement = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| normal(&mut rng)).collect()).collect();
        for _ in 0..k {
            let dir: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.push(dir.iter().map(|x| 50.0 * x / norm).collect());
        }
        // hide the outliers at random positions in the id sequence
        let mut order: Vec<usize> = (0..n + k).collect();
        order.shuffle(&mut rng);
        let ids: Vec<String> = (0..n + k).map(|i| format!("r{i:05}")).collect();
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&o| rows[o].clone()).collect();
        let planted: HashSet<String> = order
            .iter()
            .enumerate()
            .filter(|(_, &o)| o >= n)
            .map(|(pos, _)| ids[pos].clone())
            .collect();

        let tmp = TempDir::new().unwrap();
        let project = tmp.path().join("p");
        let acts = write_text(tmp.path(), "acts.csv", &matrix_csv(&ids, &shuffled));
        let s = seed.to_string();
        cli_ok(&project, &["--seed", &s, "fam", "fit", "--activations", &acts]);
        let out = cli_ok(&project, &["fam", "tail", "--fraction", "0.001"]);
        let tail: Vec<String> = out.lines().map(str::to_string).collect();
        assert_eq!(tail.len(), 10);
        caught.push(tail.iter().filter(|id| planted.contains(*id)).count());

        let d2 = mahalanobis(&shuffled);
        let mut rank: Vec<usize> = (0..n + k).collect();
        rank.sort_by(|&a, &b| d2[b].total_cmp(&d2[a]));
        let oracle: HashSet<&String> = rank[..tail.len()].iter().map(|&i| &ids[i]).collect();
        oracle_caught.push(oracle.iter().filter(|id| planted.contains(**id)).count());
        agreement.push(tail.iter().filter(|id| oracle.contains(id)).count());
    }
    let el = t.elapsed();
    let worst = |v: &[usize]| *v.iter().min().unwrap();
    let pass = worst(&caught) >= 9 && worst(&oracle_caught) >= 9 && worst(&agreement) >= 9 && el < Duration::from_secs(60);
    verdict(
        3,
        "outlier_capture",
        pass,
        &format!("planted ids in tail per seed {caught:?}, oracle {oracle_caught:?}, overlap {agreement:?}"),
        el,
    );
    assert!(worst(&caught) >= 9, "{caught:?}");
    assert!(worst(&oracle_caught) >= 9, "{oracle_caught:?}");
    assert!(worst(&agreement) >= 9, "{agreement:?}");
    assert!(el < Duration::from_secs(60));
}

// ---------------------------------------------------------------------------

/// Minimum transport cost between two histograms, solved as a generic LP.
fn transport_lp(p: &[f64], q: &[f64], x: &[f64]) -> f64 {
    let n = p.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..n)
        .map(|i| (0..n).map(|j| lp.add_var((x[i] - x[j]).abs(), (0.0, f64::INFINITY))).collect())
        .collect();
    for i in 0..n {
        lp.add_constraint(vars[i].iter().map(|v| (*v, 1.0)), ComparisonOp::Le, p[i]);
    }
    for j in 0..n {
        lp.add_constraint((0..n).map(|i| (vars[i][j], 1.0)), ComparisonOp::Eq, q[j]);
    }
    lp.solve().unwrap().into_solution().unwrap().objective()
}

fn random_histogram(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() }).collect();
    if w.iter().all(|x| *x == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

#[test]
fn acceptance_04_emd_matches_transport_lp() {
    let _g = gate();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        x.sort_by(f64::total_cmp);
        x.dedup();
        let n = x.len();
        let (p, q) = (random_histogram(&mut rng, n), random_histogram(&mut rng, n));
        let got = emd_1d(&p, &q, &x).unwrap();
        let want = if n == 1 { 0.0 } else { transport_lp(&p, &q, &x) };
        worst = worst.max((got - want).abs());
    }
    let el = t.elapsed();
    let pass = worst <= 1e-9;
    verdict(4, "emd_matches_transport_lp", pass, &format!("200 instances, max abs error {worst:.2e}"), el);
    assert!(pass, "max error {worst}");
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_projection() {
    let _g = gate();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // general data: orthonormal components, ordered variances that match an
    // eigen-decomposition of the sample covariance
    let (n, m, d) = (300usize, 20usize, 12usize);
    let scales: Vec<f64> = (0..m).map(|j| 0.2 + j as f64 * 0.3).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|j| scales[j] * normal(&mut rng) + j as f64).collect()).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let acts = ActivationMatrix::from_rows(ids.clone(), &rows, "t").unwrap();
    let pca = fit_pca(&acts, d).unwrap();
    let mut ortho = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = pca.components[a].iter().zip(&pca.components[b]).map(|(x, y)| x * y).sum();
            ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    let ev = &pca.explained_variance;
    let non_increasing = ev.windows(2).all(|w| w[0] >= w[1]);
    let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(m, m, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let eig_err = ev.iter().zip(&eig).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max);

    // exact rank-r data survives a rank-r round trip
    let r = 4;
    let basis: Vec<Vec<f64>> = (0..r).map(|_| (0..m).map(|_| normal(&mut rng)).collect()).collect();
    let low: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..r).map(|_| 3.0 * normal(&mut rng)).collect();
            (0..m).map(|j| 1.5 + (0..r).map(|k| z[k] * basis[k][j]).sum::<f64>()).collect()
        })
        .collect();
    let low_acts = ActivationMatrix::from_rows(ids, &low, "t").unwrap();
    let low_pca = fit_pca(&low_acts, r).unwrap();
    let back = low_pca.inverse_transform(&low_pca.transform(&low_acts.data).unwrap()).unwrap();
    let round_trip = (back - &low_acts.data).abs().max();

    // default target dimension is 50, clamped by width and row count
    let defaults = [
        (default_projection_dim(200, 80), 50),
        (default_projection_dim(40, 80), 39),
        (default_projection_dim(500, 12), 12),
    ];
    let wide_rows: Vec<Vec<f64>> = (0..120).map(|_| (0..64).map(|_| normal(&mut rng)).collect()).collect();
    let wide = ActivationMatrix::from_rows((0..120).map(|i| format!("w{i}")).collect(), &wide_rows, "t").unwrap();
    let fitted = fit_familiarity(
        &wide,
        &FamiliarityConfig { gmm: VbGmmConfig { k_max: 2, ..Default::default() }, ..Default::default() },
    )
    .unwrap();
    let default_ok = defaults.iter().all(|(a, b)| a == b) && fitted.d == 50 && fitted.pca.output_dim() == 50;

    let el = t.elapsed();
    let pass = ortho <= 1e-8 && non_increasing && eig_err <= 1e-8 && round_trip < 1e-6 && default_ok;
    verdict(
        5,
        "projection",
        pass,
        &format!(
            "orthonormality {ortho:.1e}, variance vs eigenvalues {eig_err:.1e}, rank-{r} round trip {round_trip:.1e}, default d {}",
            fitted.d
        ),
        el,
    );
    assert!(ortho <= 1e-8);
    assert!(non_increasing, "{ev:?}");
    assert!(eig_err <= 1e-8, "{eig_err}");
    assert!(round_trip < 1e-6, "{round_trip}");
    assert!(default_ok, "{defaults:?} fitted d {}", fitted.d);
}

// ---------------------------------------------------------------------------

const LOO_GROUPS: [&str; 3] = ["a", "b", "g"];

/// Three groups separated along `x1`; the label follows the sign of `x0`,
/// except in group `g` where the relation is inverted.
fn write_loo_data(dir: &Path, seed: u64, per_group: usize) -> (String, String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut f, mut l, mut r) = (
        String::from("id,a0,a1\n"),
        String::from("id,label\n"),
        String::from("id,wave,group\n"),
    );
    let mut i = 0;
    for (gi, g) in LOO_GROUPS.iter().enumerate() {
        for _ in 0..per_group {
            let y = rng.random_range(0..2usize);
            let sign = if y == 1 { 1.0 } else { -1.0 } * if *g == "g" { -1.0 } else { 1.0 };
            let x0 = sign * 1.5 + 0.5 * normal(&mut rng);
            let x1 = (gi as f64 - 1.0) * 4.0 + 0.5 * normal(&mut rng);
            f.push_str(&format!("x{i:05},{x0},{x1}\n"));
            l.push_str(&format!("x{i:05},{}\n", ["neg", "pos"][y]));
            r.push_str(&format!("x{i:05},1,{g}\n"));
            i += 1;
        }
    }
    (write_text(dir, "f.csv", &f), write_text(dir, "l.csv", &l), write_text(dir, "r.csv", &r))
}

#[test]
fn acceptance_06_leave_one_out_dip() {
    let _g = gate();
    let t = Instant::now();
    let dims = r#"[{"name": "group", "kind": "categorical", "categories": ["a", "b", "g"], "weights": [1, 1, 1]}]"#;
    let mut dip = Vec::new();
    let mut other: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut parity = true;
    for seed in 0..10u64 {
        let tmp = TempDir::new().unwrap();
        let project = tmp.path().join("p");
        let dims = write_text(tmp.path(), "dims.json", dims);
        cli_ok(&project, &["plan", "init", "--name", "loo", "--dims", &dims]);
        let (f, l, r) = write_loo_data(tmp.path(), 6000 + seed, 300);
        cli_ok(&project, &["ingest", "--records", &r]);
        let out = tmp.path().join("loo.json");
        let s = seed.to_string();
        cli_ok(
            &project,
            &[
                "--seed", &s, "--out", out.to_str().unwrap(), "model", "loo", "--features", &f, "--labels", &l,
                "--category", "group", "--repeats", "3x3",
            ],
        );
        let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        let sizes: BTreeSet<usize> = doc["detail"]["splits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["train_ids"].as_array().unwrap().len())
            .collect();
        parity &= sizes.len() == 1;
        let m = &doc["matrix"];
        let groups: Vec<&str> = m["groups"].as_array().unwrap().iter().map(|g| g.as_str().unwrap()).collect();
        let models: Vec<&str> = m["models"].as_array().unwrap().iter().map(|g| g.as_str().unwrap()).collect();
        let cell = |g: &str, model: &str| {
            let gi = groups.iter().position(|x| *x == g).unwrap();
            let mi = models.iter().position(|x| *x == model).unwrap();
            m["cells"][gi][mi].as_f64().unwrap()
        };
        dip.push(cell("group=g", "diverse") - cell("group=g", "without_g"));
        for g in ["group=a", "group=b"] {
            other.entry(g.to_string()).or_default().push(cell(g, "without_g") - cell(g, "diverse"));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_dip = mean(&dip);
    let other_means: Vec<f64> = other.values().map(|v| mean(v)).collect();
    let worst_other = other_means.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let el = t.elapsed();
    let pass = mean_dip >= 0.2 && worst_other < 0.05 && parity && el < Duration::from_secs(120);
    verdict(
        6,
        "leave_one_out_dip",
        pass,
        &format!("mean dip on held-out group {mean_dip:.3}, largest other-cell mean gap {worst_other:.3}, equal train sizes {parity}"),
        el,
    );
    assert!(mean_dip >= 0.2, "{dip:?}");
    assert!(worst_other < 0.05, "{other:?}");
    assert!(parity);
    assert!(el < Duration::from_secs(120));
}

// ---------------------------------------------------------------------------

struct Sample {
    id: String,
    x: Vec<f64>,
    y: usize,
    minority: bool,
    site: &'static str,
}

/// Majority rows label by `x0 + x1 > 0`. The minority is shifted and
/// spread out along `x2, x3`, and labels by `x0 - x1 > 0`.
fn intervention_sample(rng: &mut ChaCha8Rng, id: String, minority: bool) -> Sample {
    let (shift, spread) = (3.0, 4.0);
    let mut x: Vec<f64> = (0..4).map(|_| normal(rng)).collect();
    let y = if minority {
        x[2] = shift + spread * x[2];
        x[3] = shift + spread * x[3];
        usize::from(x[0] - x[1] > 0.0)
    } else {
        usize::from(x[0] + x[1] > 0.0)
    };
    let site = if rng.random::<bool>() { "s1" } else { "s2" };
    Sample { id, x, y, minority, site }
}

fn design(samples: &[&Sample]) -> (ActivationMatrix, Vec<usize>) {
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    (
        ActivationMatrix::from_rows(ids, &rows, "features").unwrap(),
        samples.iter().map(|s| s.y).collect(),
    )
}

fn record(s: &Sample) -> SampleRecord {
    SampleRecord::new(&s.id, 1, &[("group", if s.minority { "minority" } else { "majority" }), ("site", s.site)])
}

fn accuracy_on(m: &RefModel, s: &[Sample]) -> f64 {
    let refs: Vec<&Sample> = s.iter().collect();
    let (x, y) = design(&refs);
    m.accuracy(&x.data, &y).unwrap()
}

#[test]
fn acceptance_07_intervention_direction() {
    let _g = gate();
    let t = Instant::now();
    let (n_train, n_pool, n_test) = (4000usize, 1000usize, 4000usize);
    // before and after accuracies are averaged over the same training seeds
    let runs: u64 = 20;
    let mut sub_delta = Vec::new();
    let mut overall_delta = Vec::new();
    let mut swaps = Vec::new();
    let mut sub_before = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let make = |prefix: &str, n: usize, share: f64, rng: &mut ChaCha8Rng| -> Vec<Sample> {
            let minority_n = (share * n as f64).round() as usize;
            (0..n).map(|i| intervention_sample(rng, format!("{prefix}{i:05}"), i < minority_n)).collect()
        };
        let train_set = make("t", n_train, 0.05, &mut rng);
        let pool = make("p", n_pool, 0.5, &mut rng);
        let test = make("e", n_test, 0.05, &mut rng);
        let sub_test = make("m", 2000, 1.0, &mut rng);

        let fit = |samples: &[&Sample], run: u64| {
            let (x, y) = design(samples);
            train(&x.data, &y, &TrainConfig { seed: seed * 1000 + run, ..Default::default() }).unwrap()
        };
        let refs: Vec<&Sample> = train_set.iter().collect();
        let before: Vec<RefModel> = (0..runs).map(|r| fit(&refs, r)).collect();

        // familiarity of the first reference model's penultimate layer
        let (x0, _) = design(&refs);
        let acts = penultimate(&before[0], &x0).unwrap();
        let fam = fit_familiarity(
            &acts,
            &FamiliarityConfig { gmm: VbGmmConfig { seed, ..Default::default() }, ..Default::default() },
        )
        .unwrap();
        let scores = score_all(&fam, &acts).unwrap();
        let version = DatasetVersion::new(1, train_set.iter().map(|s| s.id.clone()));
        let records: Vec<SampleRecord> = train_set.iter().chain(&pool).map(record).collect();
        let pool_records: Vec<SampleRecord> = pool.iter().map(record).collect();
        let plan = build_plan(
            &version,
            &records,
            &scores,
            &pool_records,
            &SamplingStrategy::topk_swap(0.001, seed),
            &["group".to_string(), "site".to_string()],
            &BTreeMap::new(),
        )
        .unwrap();
        let added_minority = pool.iter().filter(|s| s.minority && plan.add_ids.contains(&s.id)).count();
        swaps.push((plan.add_ids.len(), added_minority));
        let next = apply_plan(&version, &plan).unwrap();
        // each added row takes the slot of a removed one, so row order, the
        // validation split and the shuffles match the reference runs
        let by_id: BTreeMap<&str, &Sample> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
        let slot: BTreeMap<&str, &str> =
            plan.remove_ids.iter().map(String::as_str).zip(plan.add_ids.iter().map(String::as_str)).collect();
        let chosen: Vec<&Sample> = train_set
            .iter()
            .map(|s| slot.get(s.id.as_str()).map_or(s, |a| by_id[a]))
            .collect();
        assert!(chosen.iter().all(|s| next.ids.contains(&s.id)) && chosen.len() == next.len());
        let after: Vec<RefModel> = (0..runs).map(|r| fit(&chosen, r)).collect();

        let avg = |models: &[RefModel], s: &[Sample]| models.iter().map(|m| accuracy_on(m, s)).sum::<f64>() / runs as f64;
        sub_before.push(avg(&before, &sub_test));
        sub_delta.push(avg(&after, &sub_test) - avg(&before, &sub_test));
        overall_delta.push(avg(&after, &test) - avg(&before, &test));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (sub, overall) = (mean(&sub_delta), mean(&overall_delta));
    let el = t.elapsed();
    let pass = sub > 0.0 && overall > -0.02 && el < Duration::from_secs(180);
    verdict(
        7,
        "intervention_direction",
        pass,
        &format!(
            "(added, of which subgroup) per seed {swaps:?}, subgroup accuracy before {:.3}, mean subgroup delta {sub:+.4}, mean overall delta {overall:+.4}; subgroup deltas {sub_delta:.4?}",
            mean(&sub_before)
        ),
        el,
    );
    assert!(sub > 0.0, "{sub_delta:?}");
    assert!(overall > -0.02, "{overall_delta:?}");
    assert!(el < Duration::from_secs(180));
}

// ---------------------------------------------------------------------------

/// Cheapest injective assignment by exhaustive search.
fn exhaustive(cost: &[Vec<f64>]) -> f64 {
    fn go(row: usize, cost: &[Vec<f64>], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost[row].len() {
            if !used[c] {
                used[c] = true;
                go(row + 1, cost, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, cost, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

fn assignment_lp(cost: &[Vec<f64>]) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = cost
        .iter()
        .map(|row| row.iter().map(|c| lp.add_var(*c, (0.0, 1.0))).collect())
        .collect();
    for row in &vars {
        lp.add_constraint(row.iter().map(|v| (*v, 1.0)), ComparisonOp::Eq, 1.0);
    }
    for c in 0..cost[0].len() {
        lp.add_constraint(vars.iter().map(|row| (row[c], 1.0)), ComparisonOp::Le, 1.0);
    }
    lp.solve().unwrap().into_solution().unwrap().objective()
}

#[test]
fn acceptance_08_matching_optimality() {
    let _g = gate();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims: Vec<String> = (0..5).map(|d| format!("d{d}")).collect();
    let mut sizes: Vec<(usize, usize)> = vec![(64, 128), (64, 64), (1, 1), (1, 128)];
    for _ in 0..36 {
        let r = rng.random_range(1..=64);
        sizes.push((r, rng.random_range(r..=128)));
    }
    for _ in 0..20 {
        let r = rng.random_range(1..=5);
        sizes.push((r, rng.random_range(r..=7)));
    }
    let mut worst = 0.0f64;
    let mut greedy_ok = true;
    let mut exhaustive_checked = 0;
    for (ri, &(rows, cols)) in sizes.iter().enumerate() {
        let weights: BTreeMap<String, f64> = dims.iter().map(|d| (d.clone(), rng.random_range(0.1..3.0))).collect();
        let rec = |prefix: &str, i: usize, rng: &mut ChaCha8Rng| -> (String, Vec<usize>) {
            (format!("{prefix}{ri}_{i:03}"), (0..dims.len()).map(|_| rng.random_range(0..3)).collect())
        };
        let ex: Vec<(String, Vec<usize>)> = (0..rows).map(|i| rec("e", i, &mut rng)).collect();
        let pool: Vec<(String, Vec<usize>)> = (0..cols).map(|i| rec("p", i, &mut rng)).collect();
        let to_records = |v: &[(String, Vec<usize>)]| -> Vec<SampleRecord> {
            v.iter()
                .map(|(id, vals)| {
                    let cats: Vec<String> = vals.iter().map(|c| format!("c{c}")).collect();
                    let pairs: Vec<(&str, &str)> = dims.iter().map(String::as_str).zip(cats.iter().map(String::as_str)).collect();
                    SampleRecord::new(id, 1, &pairs)
                })
                .collect()
        };
        // the oracle builds its own weighted Hamming costs from the raw codes
        let cost: Vec<Vec<f64>> = ex
            .iter()
            .map(|(_, a)| {
                pool.iter()
                    .map(|(_, b)| (0..dims.len()).filter(|&d| a[d] != b[d]).map(|d| weights[&dims[d]]).sum())
                    .collect()
            })
            .collect();
        let oracle = assignment_lp(&cost);
        if cols <= 7 {
            let e = exhaustive(&cost);
            worst = worst.max((e - oracle).abs());
            exhaustive_checked += 1;
        }
        let pairing = match_candidates(&to_records(&ex), &to_records(&pool), &dims, &weights).unwrap();
        let matched: f64 = pairing.iter().map(|p| p.cost).sum();
        let used: HashSet<&str> = pairing.iter().map(|p| p.pool_id.as_str()).collect();
        assert_eq!(used.len(), rows);
        let direct = assignment_cost(&cost, &min_cost_assignment(&cost));
        let greedy = assignment_cost(&cost, &greedy_assignment(&cost));
        worst = worst.max((matched - oracle).abs()).max((direct - oracle).abs());
        greedy_ok &= greedy >= oracle - 1e-9;
    }
    let el = t.elapsed();
    let pass = worst <= 1e-9 && greedy_ok;
    verdict(
        8,
        "matching_optimality",
        pass,
        &format!(
            "{} instances up to 64x128 ({exhaustive_checked} also searched exhaustively), max gap to oracle {worst:.1e}, greedy never below optimum {greedy_ok}",
            sizes.len()
        ),
        el,
    );
    assert!(worst <= 1e-9, "{worst}");
    assert!(greedy_ok);
}

// ---------------------------------------------------------------------------

fn tv_flag(project: &Path, dir: &Path, name: &str) -> (f64, bool) {
    let out = dir.join(name);
    cli_ok(project, &["--out", out.to_str().unwrap(), "audit", "divergence"]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let e = &doc["entries"][0];
    (e["value"].as_f64().unwrap(), e["flagged"].as_bool().unwrap())
}

fn bundle(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn acceptance_09_monitoring_round_trip() {
    let _g = gate();
    let t = Instant::now();
    let tmp = TempDir::new().unwrap();
    let project = tmp.path().join("p");
    let dims = write_text(
        tmp.path(),
        "dims.json",
        r#"[{"name": "site", "kind": "categorical", "categories": ["north", "south", "west"], "weights": [30, 30, 60]}]"#,
    );
    let out = tmp.path().join("plan.json");
    cli_ok(&project, &["--out", out.to_str().unwrap(), "plan", "init", "--name", "field", "--dims", &dims]);
    let plan: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let expected: Vec<f64> = plan["dimensions"][0]["expected"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();

    let wave = |w: u32, counts: [usize; 3], start: usize| {
        let mut s = String::from("id,wave,site\n");
        let mut i = start;
        for (c, n) in ["north", "south", "west"].iter().zip(counts) {
            for _ in 0..n {
                s.push_str(&format!("s{i:04},{w},{c}\n"));
                i += 1;
            }
        }
        s
    };
    let w1 = write_text(tmp.path(), "w1.csv", &wave(1, [14, 4, 2], 0));
    cli_ok(&project, &["ingest", "--records", &w1]);
    let (tv1, flag1) = tv_flag(&project, tmp.path(), "d1.json");
    let w2 = write_text(tmp.path(), "w2.csv", &wave(2, [11, 21, 48], 100));
    cli_ok(&project, &["ingest", "--records", &w2]);
    let (tv2, flag2) = tv_flag(&project, tmp.path(), "d2.json");

    let (a, b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    cli_ok(&project, &["report", "--out-dir", a.to_str().unwrap()]);
    cli_ok(&project, &["report", "--out-dir", b.to_str().unwrap()]);
    let (ba, bb) = (bundle(&a), bundle(&b));
    let identical = !ba.is_empty() && ba == bb;

    let el = t.elapsed();
    let weights_ok = expected == [0.25, 0.25, 0.5];
    let pass = weights_ok
        && (tv1 - 0.45).abs() < 1e-12
        && flag1
        && tv2.abs() < 1e-12
        && !flag2
        && identical
        && el < Duration::from_secs(5);
    verdict(
        9,
        "monitoring_round_trip",
        pass,
        &format!(
            "expected {expected:?}, skewed TV {tv1:.4} flagged {flag1}, corrected TV {tv2:.4} flagged {flag2}, {} report files identical {identical}",
            ba.len()
        ),
        el,
    );
    assert!(weights_ok, "{expected:?}");
    assert!((tv1 - 0.45).abs() < 1e-12 && flag1, "{tv1} {flag1}");
    assert!(tv2.abs() < 1e-12 && !flag2, "{tv2} {flag2}");
    assert!(identical);
    assert!(el < Duration::from_secs(5));
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_gradient_check() {
    let _g = gate();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for inst in 0..50u64 {
        let (f, h, c) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(2..=5));
        let n = rng.random_range(1..=20);
        let config = TrainConfig { hidden: h, seed: inst, ..Default::default() };
        let mut model = RefModel::init(f, c, &config);
        let p0: Vec<f64> = model.params().iter().map(|_| normal(&mut rng)).collect();
        model.set_params(&p0).unwrap();
        let x = DMatrix::from_fn(n, f, |_, _| normal(&mut rng));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, grad) = model.loss_and_gradient(&x, &y).unwrap();
        let step = 1e-5;
        for i in 0..p0.len() {
            let mut probe = model.clone();
            let mut p = p0.clone();
            p[i] += step;
            probe.set_params(&p).unwrap();
            let up = probe.loss_and_gradient(&x, &y).unwrap().0;
            p[i] -= 2.0 * step;
            probe.set_params(&p).unwrap();
            let down = probe.loss_and_gradient(&x, &y).unwrap().0;
            let numeric = (up - down) / (2.0 * step);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let el = t.elapsed();
    let pass = worst <= 1e-4;
    verdict(
        10,
        "gradient_check",
        pass,
        &format!("50 instances, {checked} parameters, max relative error {worst:.2e}"),
        el,
    );
    assert!(pass, "{worst}");
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_11_store_replay() {
    let _g = gate();
    let t = Instant::now();
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("p");
    let mut store = init_project(&root, "replay").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cats = ["x", "y", "z"];
    let mut plan = create_plan("r", vec![DimensionDraft::categorical("k", &cats, &[1.0, 1.0, 2.0])]).unwrap();
    let mut snapshots: Vec<String> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut next_id = 0;
    let event = |store: &mut ProjectStore, e: Event| {
        store.append(e).unwrap();
    };
    while store.state().last_seq < 1000 {
        let seq = store.state().last_seq;
        let roll = rng.random_range(0..100);
        if seq == 0 || roll < 2 {
            if seq > 0 {
                plan.version += 1;
            }
            event(&mut store, Event::PlanSaved { plan: plan.clone() });
        } else if roll < 80 || ids.len() < 20 {
            let batch: Vec<SampleRecord> = (0..rng.random_range(1..4))
                .map(|_| {
                    next_id += 1;
                    let c = cats[rng.random_range(0..3)];
                    SampleRecord::new(&format!("r{next_id:05}"), rng.random_range(1..4), &[("k", c)])
                })
                .collect();
            ids.extend(batch.iter().map(|r| r.id.clone()));
            event(&mut store, Event::RecordsIngested { records: batch });
        } else if roll < 88 {
            let bytes: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            store.put_blob(&bytes, "noise", "bytes").unwrap();
        } else if roll < 92 || store.state().datasets.is_empty() {
            let take = ids.len() / 2;
            event(&mut store, Event::DatasetCreated { ids: ids[..take].to_vec() });
        } else {
            let base = store.state().latest_dataset().unwrap().clone();
            let outside: Vec<String> = ids.iter().filter(|id| !base.ids.contains(*id)).cloned().collect();
            let remove = base.ids.iter().next().cloned().into_iter().collect::<Vec<_>>();
            let add = outside.into_iter().take(remove.len()).collect::<Vec<_>>();
            let mut p = datadesign_core::resample::ResamplePlan::empty();
            p.remove_ids = remove;
            p.add_ids = add;
            if p.remove_ids.len() == p.add_ids.len() {
                event(&mut store, Event::DatasetEdited { base: base.version, plan: p });
            } else {
                event(&mut store, Event::DatasetCreated { ids: ids.clone() });
            }
        }
        snapshots.push(serde_json::to_string(store.state()).unwrap());
    }
    let live = serde_json::to_string(store.state()).unwrap();
    drop(store);

    let events = fs::read_to_string(root.join("log/events.jsonl")).unwrap();
    let lines: Vec<&str> = events.lines().collect();
    let full = replay(&root).unwrap();
    let mut prefix_ok = true;
    for k in (50..=lines.len()).step_by(50) {
        let text: String = lines[..k].iter().map(|l| format!("{l}\n")).collect();
        let r = datadesign_core::store::replay_text(&text);
        prefix_ok &= r.damage.is_none() && serde_json::to_string(&r.state).unwrap() == snapshots[k - 1];
    }
    let replayed = serde_json::to_string(&full.state).unwrap();
    let on_disk = serde_json::to_string(&read_snapshot(&root).unwrap()).unwrap();
    let reopened = serde_json::to_string(ProjectStore::open(&root).unwrap().state()).unwrap();
    let bitwise = full.events == 1000 && replayed == live && on_disk == live && reopened == live && prefix_ok;

    // an interrupted append leaves half a line behind
    let torn_line = r#"{"seq":1001,"timestamp":"2030-01-01T00:00:00Z","kind":"records_ingested","records":[{"id":"torn","wa"#;
    fs::OpenOptions::new().append(true).open(root.join("log/events.jsonl")).unwrap().write_all(torn_line.as_bytes()).unwrap();
    let reader = ProjectStore::open(&root).unwrap();
    let torn_state = serde_json::to_string(reader.state()).unwrap();
    let torn_reported = reader.damage().is_some_and(|d| d.torn);
    let mut writer = ProjectStore::open_writer(&root).unwrap();
    let after_writer = serde_json::to_string(writer.state()).unwrap();
    let seq = writer.append(Event::DatasetCreated { ids: vec![] }).unwrap();
    drop(writer);
    let recovered = torn_state == live && torn_reported && after_writer == live && seq == 1001 && replay(&root).unwrap().damage.is_none();

    let el = t.elapsed();
    let pass = bitwise && recovered;
    verdict(
        11,
        "store_replay",
        pass,
        &format!("{} events replayed bitwise {bitwise}, torn tail loads previous state {recovered}", full.events),
        el,
    );
    assert!(bitwise);
    assert!(recovered);
}
