//! Static report bundle: CSV tables plus `series.json` for charting. The
//! output depends only on the project log, so two runs over the same project
//! produce identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use datadesign_core::monitor::{divergence, gap_report, snapshot, DistributionSnapshot, Metric};
use datadesign_core::plan::DatasetPlan;
use datadesign_core::store::ProjectStore;
use datadesign_core::Error;

use crate::args::ReportArgs;
use crate::{write_file, CliResult, Ctx};

struct Bundle<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Bundle<'_> {
    fn put(&mut self, name: &str, contents: &str) -> CliResult<()> {
        write_file(&self.dir.join(name), contents.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn wave_label(w: Option<u32>) -> String {
    w.map_or_else(|| "all".to_string(), |w| w.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn report(ctx: &mut Ctx, args: ReportArgs) -> CliResult<()> {
    if args.bins == 0 {
        return Err(Error::OutOfRange("--bins must be at least 1".into()).into());
    }
    let store = ctx.reader()?;
    let state = store.state();
    let plan = state
        .plan
        .as_ref()
        .ok_or_else(|| Error::NotFound("project has no plan yet; run `plan init`".into()))?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut b = Bundle {
        dir: &args.out_dir,
        files: Vec::new(),
    };
    b.put("plan.json", &(plan.to_document()? + "\n"))?;

    let waves: BTreeSet<u32> = state.records.iter().map(|r| r.wave).collect();
    let filters: Vec<Option<u32>> = std::iter::once(None).chain(waves.iter().map(|w| Some(*w))).collect();
    let snaps: Vec<DistributionSnapshot> = filters.iter().map(|w| snapshot(plan, &state.records, *w)).collect();

    let mut overlays = String::from("wave,dimension,category,expected,count,observed\n");
    let mut overlay_series = Vec::new();
    for snap in &snaps {
        for (d, spec) in snap.dimensions.iter().zip(&plan.dimensions) {
            for (i, c) in d.categories.iter().enumerate() {
                let observed = d.proportions.as_ref().map(|p| p[i]);
                let _ = writeln!(
                    overlays,
                    "{},{},{},{},{},{}",
                    wave_label(snap.wave_filter),
                    csv_field(&d.name),
                    csv_field(c),
                    spec.expected[i],
                    d.counts[i],
                    opt(observed)
                );
            }
            overlay_series.push(json!({
                "wave": snap.wave_filter,
                "dimension": d.name,
                "categories": d.categories,
                "expected": spec.expected,
                "observed": d.proportions,
                "counts": d.counts,
            }));
        }
    }
    b.put("overlays.csv", &overlays)?;

    let mut div = String::from("wave,dimension,metric,value,threshold,flagged\n");
    let mut div_series = Vec::new();
    for snap in snaps.iter().filter(|s| s.total > 0) {
        let report = divergence(plan, snap, &ctx.config.thresholds)?;
        for e in &report.entries {
            let metric = match e.metric {
                Metric::Tv => "tv",
                Metric::Emd => "emd",
            };
            let _ = writeln!(
                div,
                "{},{},{metric},{},{},{}",
                wave_label(snap.wave_filter),
                csv_field(&e.dimension),
                e.value,
                e.threshold,
                e.flagged
            );
            div_series.push(json!({
                "wave": snap.wave_filter,
                "dimension": e.dimension,
                "metric": metric,
                "value": e.value,
                "threshold": e.threshold,
                "flagged": e.flagged,
            }));
        }
    }
    b.put("divergence.csv", &div)?;

    let mut gaps = String::from("cell,observed,expected,deficit\n");
    let mut gap_series = Vec::new();
    if !state.records.is_empty() {
        let report = gap_report(plan, &state.records, &plan.dimension_names(), &ctx.config.gaps)?;
        for g in &report.undersampled {
            let _ = writeln!(
                gaps,
                "{},{},{},{}",
                csv_field(&g.key.label()),
                g.observed_count,
                g.expected_count,
                g.deficit
            );
            gap_series.push(json!({
                "cell": g.key.label(),
                "observed": g.observed_count,
                "expected": g.expected_count,
                "deficit": g.deficit,
            }));
        }
    }
    b.put("gaps.csv", &gaps)?;

    let histogram = scores_section(&store, &mut b, args.bins)?;

    let mut experiments = Vec::new();
    for (name, matrix) in &state.experiments {
        let file = format!("experiments/{}.csv", file_safe(name));
        b.put(&file, &matrix.to_csv()?)?;
        experiments.push(json!({ "name": name, "file": file, "matrix": matrix }));
    }

    let mut datasets = String::from("version,parent,size\n");
    for v in &state.datasets {
        let _ = writeln!(
            datasets,
            "{},{},{}",
            v.version,
            v.parent.map(|p| p.to_string()).unwrap_or_default(),
            v.len()
        );
    }
    b.put("datasets.csv", &datasets)?;

    let series = json!({
        "plan": plan_summary(plan),
        "waves": waves,
        "overlays": overlay_series,
        "divergence": div_series,
        "gaps": gap_series,
        "score_histogram": histogram,
        "experiments": experiments,
    });
    b.put("series.json", &(serde_json::to_string_pretty(&series)? + "\n"))?;

    let mut files = b.files.clone();
    files.push("index.json".to_string());
    let index = json!({
        "project": store.meta().name,
        "plan_version": plan.version,
        "last_seq": state.last_seq,
        "records": state.records.len(),
        "files": files,
    });
    b.put("index.json", &(serde_json::to_string_pretty(&index)? + "\n"))?;

    let text = format!("wrote {} file(s) to {}\n", b.files.len(), args.out_dir.display());
    ctx.emit(&text, &index)
}

fn plan_summary(plan: &DatasetPlan) -> Value {
    json!({ "name": plan.name, "version": plan.version, "dimensions": plan.dimension_names() })
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes `scores.csv` and `score_histogram.csv` when scores exist.
fn scores_section(store: &ProjectStore, b: &mut Bundle, bins: usize) -> CliResult<Value> {
    if store.state().scores.is_none() {
        return Ok(Value::Null);
    }
    let scores = store.scores()?;
    let mut text = String::from("id,score\n");
    for e in &scores.entries {
        let _ = writeln!(text, "{},{}", csv_field(&e.id), e.score);
    }
    b.put("scores.csv", &text)?;

    let values: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return Ok(Value::Null);
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let mut hist = String::from("lower,upper,count\n");
    let mut edges = Vec::with_capacity(bins + 1);
    for (i, c) in counts.iter().enumerate() {
        let lower = lo + width * i as f64;
        let upper = if i + 1 == bins && hi > lo { hi } else { lo + width * (i + 1) as f64 };
        let _ = writeln!(hist, "{lower},{upper},{c}");
        edges.push(lower);
    }
    edges.push(if hi > lo { hi } else { lo + width * bins as f64 });
    b.put("score_histogram.csv", &hist)?;
    Ok(json!({ "edges": edges, "counts": counts }))
}
