use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use datadesign_core::familiarity::{fit_familiarity, score_all, tail, ActivationMatrix, TailSide};
use datadesign_core::io;
use datadesign_core::monitor::{divergence, gap_report, snapshot, SampleRecord};
use datadesign_core::plan::{
    create_plan, validate_plan, DatasetPlan, DimensionDraft, PromptAnswer, Questionnaire, Taxonomy,
};
use datadesign_core::refmodel::{
    group_accuracy_matrix, make_loo_splits, penultimate, train, train_repeated, AccuracyMatrix, RefModel, Repeats,
    TrainConfig,
};
use datadesign_core::resample::{sweep, ResamplePlan, SamplingStrategy, StrategyKind, Verdict, SWEEP_FRACTIONS};
use datadesign_core::store::{Event, ProjectStore};
use datadesign_core::workflow::{self, ResampleRequest};
use datadesign_core::Error;

use crate::args::*;
use crate::{read_file, write_file, CliError, CliResult, Ctx};

pub(crate) fn dispatch(ctx: &mut Ctx, command: Command) -> CliResult<()> {
    match command {
        Command::Plan(c) => plan(ctx, c),
        Command::Ingest(a) => ingest(ctx, a),
        Command::Audit(c) => audit(ctx, c),
        Command::Fam(c) => fam(ctx, c),
        Command::Resample(c) => resample(ctx, c),
        Command::Model(c) => model(ctx, c),
        Command::Serve(a) => serve(ctx, a),
        Command::Report(a) => crate::report::report(ctx, a),
    }
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Dimension drafts from a JSON list or `{ "dimensions": [...] }`.
fn read_drafts(path: &Path) -> CliResult<Vec<DimensionDraft>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Drafts {
        List(Vec<DimensionDraft>),
        Wrapped { dimensions: Vec<DimensionDraft> },
    }
    let text = read_file(path)?;
    let drafts: Drafts = serde_json::from_str(&text)
        .map_err(|e| CliError::user("bad-dims", format!("{}: not a list of dimensions ({e})", path.display())))?;
    Ok(match drafts {
        Drafts::List(d) | Drafts::Wrapped { dimensions: d } => d,
    })
}

fn plan_table(plan: &DatasetPlan) -> String {
    let mut s = format!("plan `{}` v{}\n", plan.name, plan.version);
    for d in &plan.dimensions {
        let cells: Vec<String> = d
            .categories
            .iter()
            .zip(&d.expected)
            .map(|(c, p)| format!("{c}={p:.4}"))
            .collect();
        let kind = serde_json::to_value(d.kind).ok().and_then(|v| v.as_str().map(str::to_string));
        let _ = writeln!(s, "  {} ({}): {}", d.name, kind.unwrap_or_default(), cells.join(" "));
    }
    s
}

fn require_plan(store: &ProjectStore) -> CliResult<DatasetPlan> {
    store
        .state()
        .plan
        .clone()
        .ok_or_else(|| Error::NotFound("project has no plan yet; run `plan init`".into()).into())
}

fn plan(ctx: &mut Ctx, cmd: PlanCmd) -> CliResult<()> {
    match cmd {
        PlanCmd::Init { name, dims } => {
            let drafts = read_drafts(&dims)?;
            let plan = create_plan(&name, drafts)?;
            let mut store = ctx.writer()?;
            if let Some(cur) = &store.state().plan {
                return Err(CliError::user(
                    "plan-exists",
                    format!("project already has plan v{}; use `plan edit`", cur.version),
                ));
            }
            let saved = store.save_plan(plan, None)?;
            ctx.emit(&plan_table(&saved), &to_value(&saved)?)
        }
        PlanCmd::Edit {
            dims,
            remove,
            rename,
            expected_version,
        } => {
            if dims.is_none() && remove.is_empty() && rename.is_none() {
                return Err(CliError::user("usage", "nothing to change; pass --dims, --remove or --rename"));
            }
            let mut store = ctx.writer()?;
            let current = require_plan(&store)?;
            let mut next = current.clone();
            if let Some(path) = dims {
                for d in read_drafts(&path)? {
                    next = next.upsert_dimension(d)?;
                }
            }
            for name in &remove {
                next = next.remove_dimension(name)?;
            }
            if let Some(n) = rename {
                next.name = n;
            }
            let saved = store.save_plan(next, Some(expected_version.unwrap_or(current.version)))?;
            ctx.emit(&plan_table(&saved), &to_value(&saved)?)
        }
        PlanCmd::Validate { file } => {
            let plan = match file {
                Some(p) => DatasetPlan::from_document(&read_file(&p)?)?,
                None => require_plan(&ctx.reader()?)?,
            };
            let report = validate_plan(&plan);
            let mut text = String::new();
            for f in &report.findings {
                let _ = writeln!(text, "{}: {}", f.dimension.as_deref().unwrap_or("plan"), f.reason);
            }
            if report.is_valid() {
                text.push_str(&format!("plan `{}` v{} is valid\n", plan.name, plan.version));
            }
            ctx.emit(&text, &to_value(&report)?)?;
            if report.is_valid() {
                Ok(())
            } else {
                Err(CliError::user(
                    "invalid-plan",
                    format!("{} finding(s)", report.findings.len()),
                ))
            }
        }
        PlanCmd::Reflect {
            answers,
            taxonomy,
            questionnaire,
            interactive,
        } => reflect(ctx, answers, taxonomy, questionnaire, interactive),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerFile {
    #[serde(default)]
    answers: BTreeMap<String, String>,
    #[serde(default)]
    team: BTreeMap<String, BTreeSet<String>>,
}

fn reflect(
    ctx: &mut Ctx,
    answers: Option<PathBuf>,
    taxonomy: Option<PathBuf>,
    questionnaire: Option<PathBuf>,
    interactive: bool,
) -> CliResult<()> {
    let taxonomy: Taxonomy = match taxonomy {
        Some(p) => serde_json::from_str(&read_file(&p)?)?,
        None => Taxonomy::default(),
    };
    let questionnaire: Questionnaire = match questionnaire {
        Some(p) => serde_json::from_str(&read_file(&p)?)?,
        None => Questionnaire::default(),
    };
    let file = match (answers, interactive) {
        (Some(p), _) => serde_json::from_str::<AnswerFile>(&read_file(&p)?)
            .map_err(|e| CliError::user("bad-answers", format!("{}: {e}", p.display())))?,
        (None, true) => ask_reflexive(ctx, &questionnaire, &taxonomy)?,
        (None, false) => {
            return Err(CliError::user("usage", "pass --answers <file>, or --interactive to answer on the terminal"))
        }
    };
    let mut store = ctx.writer()?;
    let current = require_plan(&store)?;
    let mut list = Vec::new();
    for (id, response) in &file.answers {
        let prompt = questionnaire
            .prompt(id)
            .ok_or_else(|| CliError::user("unknown-prompt", format!("no prompt `{id}` in the questionnaire")))?;
        list.push(PromptAnswer {
            prompt_id: id.clone(),
            prompt: prompt.text.clone(),
            response: response.clone(),
        });
    }
    let next = current.record_reflexive(list, file.team, &taxonomy)?;
    let saved = store.save_plan(next, Some(current.version))?;
    let record = saved.reflexive.clone().expect("just recorded");
    ctx.emit(&record.notice_text(), &to_value(&record)?)
}

fn ask_line(ctx: &mut Ctx, prompt: &str) -> CliResult<String> {
    write!(ctx.err, "{prompt}\n> ")?;
    ctx.err.flush()?;
    let mut line = String::new();
    ctx.input.read_line(&mut line)?;
    Ok(line.trim().to_string())
}

fn ask_reflexive(ctx: &mut Ctx, q: &Questionnaire, t: &Taxonomy) -> CliResult<AnswerFile> {
    let mut file = AnswerFile::default();
    for p in &q.prompts {
        let a = ask_line(ctx, &p.text)?;
        if !a.is_empty() {
            file.answers.insert(p.id.clone(), a);
        }
    }
    for d in &t.dimensions {
        let a = ask_line(
            ctx,
            &format!("Groups on the team for {} ({}), comma-separated:", d.name, d.categories.join(", ")),
        )?;
        let groups: BTreeSet<String> = a.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
        file.team.insert(d.name.clone(), groups);
    }
    Ok(file)
}

fn read_records_file(path: &Path) -> CliResult<Vec<SampleRecord>> {
    let text = read_file(path)?;
    Ok(io::read_records(text.as_bytes())?)
}

fn ingest(ctx: &mut Ctx, a: IngestArgs) -> CliResult<()> {
    let records = read_records_file(&a.records)?;
    let mut store = ctx.writer()?;
    let mode = a.mode.into();
    let summary = store.ingest_records(records, mode)?;
    let mut text = format!("accepted {}, rejected {}\n", summary.accepted, summary.rejected);
    for r in &summary.rejections {
        let reason = serde_json::to_value(&r.reason).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(text, "  rejected {}: {reason}", r.id);
    }
    ctx.emit(&text, &to_value(&summary)?)?;
    if matches!(a.mode, ModeArg::AllOrNothing) && summary.rejected > 0 {
        return Err(CliError::user(
            "rejected",
            format!("{} invalid record(s); nothing was ingested", summary.rejected),
        ));
    }
    Ok(())
}

fn audit(ctx: &mut Ctx, cmd: AuditCmd) -> CliResult<()> {
    let store = ctx.reader()?;
    let plan = require_plan(&store)?;
    let records = &store.state().records;
    match cmd {
        AuditCmd::Snapshot { wave } => {
            let snap = snapshot(&plan, records, wave);
            let mut text = format!("{} record(s)\n", snap.total);
            for (d, spec) in snap.dimensions.iter().zip(&plan.dimensions) {
                let _ = writeln!(text, "{} (missing {})", d.name, d.missing);
                for (i, c) in d.categories.iter().enumerate() {
                    let observed = d.proportions.as_ref().map(|p| format!("{:.4}", p[i])).unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        text,
                        "  {c:<16} count {:>6}  observed {observed:>6}  expected {:.4}",
                        d.counts[i], spec.expected[i]
                    );
                }
            }
            ctx.emit(&text, &to_value(&snap)?)
        }
        AuditCmd::Divergence { wave, tv, emd_spacings } => {
            let mut thresholds = ctx.config.thresholds.clone();
            if let Some(t) = tv {
                thresholds.tv = t;
            }
            if let Some(e) = emd_spacings {
                thresholds.emd_spacings = e;
            }
            let snap = snapshot(&plan, records, wave);
            let report = divergence(&plan, &snap, &thresholds)?;
            let mut text = String::new();
            for e in &report.entries {
                let metric = if matches!(e.metric, datadesign_core::monitor::Metric::Tv) { "tv" } else { "emd" };
                let _ = writeln!(
                    text,
                    "{:<16} {metric:<3} {:.4} (threshold {:.4}){}",
                    e.dimension,
                    e.value,
                    e.threshold,
                    if e.flagged { "  FLAGGED" } else { "" }
                );
            }
            for d in &report.unobserved {
                let _ = writeln!(text, "{d:<16} no observations");
            }
            let _ = writeln!(
                text,
                "{} flagged",
                if report.flagged.is_empty() { "none".to_string() } else { report.flagged.join(", ") }
            );
            ctx.emit(&text, &to_value(&report)?)
        }
        AuditCmd::Gaps {
            dims,
            wave,
            min_count,
            min_ratio,
        } => {
            let mut config = ctx.config.gaps.clone();
            if let Some(c) = min_count {
                config.min_count = c;
            }
            if let Some(r) = min_ratio {
                config.min_ratio = r;
            }
            let dims = if dims.is_empty() { plan.dimension_names() } else { dims };
            let filtered: Vec<SampleRecord> =
                records.iter().filter(|r| wave.is_none_or(|w| r.wave == w)).cloned().collect();
            let report = gap_report(&plan, &filtered, &dims, &config)?;
            let mut text = format!("{} record(s), {} under-sampled cell(s)\n", report.total, report.undersampled.len());
            for g in &report.undersampled {
                let _ = writeln!(
                    text,
                    "  {:<32} observed {:>6}  expected {:>9.2}  deficit {}",
                    g.key.label(),
                    g.observed_count,
                    g.expected_count,
                    g.deficit
                );
            }
            ctx.emit(&text, &to_value(&report)?)
        }
    }
}

fn load_acts(path: &Path, tag: &str) -> CliResult<ActivationMatrix> {
    if !path.exists() {
        return Err(Error::NotFound(format!("file {}", path.display())).into());
    }
    Ok(io::load_activations(path, tag)?)
}

fn fam(ctx: &mut Ctx, cmd: FamCmd) -> CliResult<()> {
    match cmd {
        FamCmd::Fit {
            activations,
            layer_tag,
            dim,
            k_max,
            max_iter,
            no_score,
        } => {
            let mut config = ctx.config.familiarity.clone();
            if dim.is_some() {
                config.projection_dim = dim;
            }
            if let Some(k) = k_max {
                config.gmm.k_max = k;
            }
            if let Some(m) = max_iter {
                config.gmm.max_iter = m;
            }
            if let Some(s) = ctx.seed {
                config.gmm.seed = s;
            }
            let mut store = ctx.writer()?;
            ctx.progress(&format!("loading {}", activations.display()));
            let acts = load_acts(&activations, &layer_tag)?;
            ctx.progress(&format!(
                "fitting {} x {} activations (k_max {}, up to {} iterations)",
                acts.nrows(),
                acts.ncols(),
                config.gmm.k_max,
                config.gmm.max_iter
            ));
            let started = std::time::Instant::now();
            let model = fit_familiarity(&acts, &config)?;
            ctx.progress(&format!(
                "fitted in {:.1}s: {} iterations, {}",
                started.elapsed().as_secs_f64(),
                model.gmm.elbo_trace.len(),
                if model.gmm.converged { "converged" } else { "iteration cap reached" }
            ));
            let acts_blob = workflow::put_activations(&mut store, &acts, &file_label(&activations))?;
            let fit = workflow::record_fit(&mut store, &model, Some(acts_blob))?;
            let mut doc = json!({ "fit": fit, "converged": model.gmm.converged, "elbo_trace": model.gmm.elbo_trace });
            if !no_score {
                ctx.progress("scoring fitted rows");
                let mut scores = score_all(&model, &acts)?;
                scores.model = Some(fit.model_blob.clone());
                doc["scores_blob"] = json!(store.save_scores(&scores)?);
            }
            let text = format!(
                "model {} on {} rows: d={}, {} component(s)\n",
                &fit.model_blob[..12],
                fit.n,
                fit.d,
                fit.components
            );
            ctx.emit(&text, &doc)
        }
        FamCmd::Score {
            activations,
            layer_tag,
            scores_out,
        } => {
            let mut store = ctx.writer()?;
            let model = store.familiarity_model()?;
            let acts = load_acts(&activations, &layer_tag)?;
            let mut scores = score_all(&model, &acts)?;
            scores.model = store.state().familiarity.as_ref().map(|f| f.model_blob.clone());
            let hash = store.save_scores(&scores)?;
            if let Some(p) = scores_out {
                let mut buf = Vec::new();
                io::write_scores(&mut buf, &scores)?;
                write_file(&p, &buf)?;
            }
            ctx.emit(
                &format!("scored {} row(s)\n", scores.len()),
                &json!({ "scores_blob": hash, "count": scores.len() }),
            )
        }
        FamCmd::Tail { fraction, side } => {
            let store = ctx.reader()?;
            let scores = store.scores()?;
            let side: TailSide = side.into();
            let ids = tail(&scores, fraction, side)?;
            let entries: Vec<Value> = ids.iter().map(|id| json!({ "id": id, "score": scores.get(id) })).collect();
            let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
            ctx.emit(&text, &json!({ "fraction": fraction, "side": side, "entries": entries }))
        }
        FamCmd::Review {
            fraction,
            verdicts,
            interactive,
            apply,
        } => review(ctx, fraction, verdicts, interactive, apply),
    }
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `id,verdict` CSV or a JSON object.
fn read_verdicts(path: &Path) -> CliResult<BTreeMap<String, Verdict>> {
    let text = read_file(path)?;
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(&text)
            .map_err(|e| CliError::user("bad-verdicts", format!("{}: {e}", path.display())));
    }
    let mut out = BTreeMap::new();
    for (id, v) in io::read_labels(text.as_bytes())? {
        out.insert(id, v.parse::<Verdict>()?);
    }
    Ok(out)
}

fn review(ctx: &mut Ctx, fraction: f64, verdicts: Option<PathBuf>, interactive: bool, apply: bool) -> CliResult<()> {
    let mut store = ctx.writer()?;
    let reopen = store.state().review.as_ref().is_none_or(|q| q.fraction != fraction);
    if reopen {
        workflow::open_review(&mut store, fraction)?;
    }
    if let Some(p) = verdicts {
        for (id, v) in read_verdicts(&p)? {
            workflow::set_verdict(&mut store, &id, v)?;
        }
    }
    if interactive {
        let pending: Vec<(String, String)> = store
            .state()
            .review
            .as_ref()
            .map(|q| {
                q.entries
                    .iter()
                    .filter(|e| e.verdict == Verdict::Undecided)
                    .map(|e| (e.id.clone(), format!("{} score {:.3} {:?}", e.id, e.score, e.metadata)))
                    .collect()
            })
            .unwrap_or_default();
        for (id, label) in pending {
            let answer = ask_line(ctx, &format!("{label}\nverdict [noisy/rare/ok, empty to skip]:"))?;
            if !answer.is_empty() {
                workflow::set_verdict(&mut store, &id, answer.parse()?)?;
            }
        }
    }
    let queue = store.state().review.clone().expect("queue opened above");
    let mut text = String::new();
    for e in &queue.entries {
        let meta: Vec<String> = e.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let verdict = serde_json::to_value(e.verdict)?.as_str().unwrap_or("").to_string();
        let _ = writeln!(text, "{:<16} {:>12.4}  {verdict:<9} {}", e.id, e.score, meta.join(" "));
    }
    let mut doc = to_value(&queue)?;
    if apply {
        let plan = queue.removal_plan();
        let removed = plan.remove_ids.len();
        let version = workflow::apply_resample(&mut store, Some(plan))?;
        let _ = writeln!(text, "removed {removed} noisy sample(s): dataset v{} has {}", version.version, version.len());
        doc = json!({ "queue": doc, "dataset": { "version": version.version, "parent": version.parent, "size": version.len() } });
    }
    ctx.emit(&text, &doc)
}

fn parse_weights(list: &[String]) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in list {
        let (d, w) = item
            .split_once('=')
            .ok_or_else(|| CliError::user("usage", format!("weight `{item}` is not dim=value")))?;
        let w: f64 = w
            .parse()
            .map_err(|_| CliError::user("usage", format!("weight `{item}` is not a number")))?;
        out.insert(d.to_string(), w);
    }
    Ok(out)
}

fn plan_summary(plan: &ResamplePlan) -> String {
    let mut s = format!("remove {} / add {}\n", plan.remove_ids.len(), plan.add_ids.len());
    if plan.pairing.is_empty() {
        for id in &plan.remove_ids {
            let _ = writeln!(s, "  - {id}");
        }
    } else {
        for (r, p) in plan.remove_ids.iter().zip(&plan.pairing) {
            let _ = writeln!(s, "  - {r:<16} + {:<16} (like {}, cost {})", p.pool_id, p.exemplar_id, p.cost);
        }
    }
    s
}

fn resample(ctx: &mut Ctx, cmd: ResampleCmd) -> CliResult<()> {
    match cmd {
        ResampleCmd::Build {
            strategy,
            fraction,
            window,
            matching,
        } => {
            let strategy = SamplingStrategy {
                kind: strategy,
                fraction,
                window,
                seed: ctx.seed.unwrap_or(0),
            };
            strategy.validate()?;
            let request = ResampleRequest {
                strategy,
                dims: matching.dims.clone(),
                weights: parse_weights(&matching.weight)?,
            };
            let pool = matching.pool.as_deref().map(read_records_file).transpose()?;
            let mut store = ctx.writer()?;
            let plan = workflow::build_resample(&mut store, &request, pool)?;
            ctx.emit(&plan_summary(&plan), &to_value(&plan)?)
        }
        ResampleCmd::Apply { plan } => {
            let plan = plan
                .map(|p| -> CliResult<ResamplePlan> { Ok(ResamplePlan::from_document(&read_file(&p)?)?) })
                .transpose()?;
            let mut store = ctx.writer()?;
            if let Some(p) = &plan {
                // a plan from a file may add records that exist only in its pool file
                if let Some(id) = p.add_ids.iter().find(|id| store.state().record(id).is_none()) {
                    return Err(Error::NotFound(format!("added id `{id}` has not been ingested")).into());
                }
            }
            let version = workflow::apply_resample(&mut store, plan)?;
            ctx.emit(
                &format!("dataset v{} ({} samples)\n", version.version, version.len()),
                &json!({ "version": version.version, "parent": version.parent, "size": version.len() }),
            )
        }
        ResampleCmd::Sweep {
            strategies,
            fractions,
            window,
            out_dir,
            matching,
        } => {
            let kinds = if strategies.is_empty() { StrategyKind::ALL.to_vec() } else { strategies };
            let fractions = if fractions.is_empty() { SWEEP_FRACTIONS.to_vec() } else { fractions };
            let weights = parse_weights(&matching.weight)?;
            let pool_file = matching.pool.as_deref().map(read_records_file).transpose()?;
            let mut store = ctx.writer()?;
            let train_set = workflow::training_set(&mut store)?;
            let scores = store.scores()?;
            let state = store.state();
            let pool = pool_file.unwrap_or_else(|| workflow::candidate_pool(state, &train_set));
            let dims = workflow::match_dimensions(state, &matching.dims);
            let cells = sweep(
                &train_set,
                &state.records,
                &scores,
                &pool,
                &kinds,
                &fractions,
                window,
                ctx.seed.unwrap_or(0),
                &dims,
                &weights,
            )?;
            std::fs::create_dir_all(&out_dir)?;
            let mut index = Vec::new();
            let mut text = String::new();
            for cell in &cells {
                let file = format!("{}.json", cell.name);
                write_file(&out_dir.join(&file), cell.plan.to_document()?.as_bytes())?;
                let _ = writeln!(text, "{file}: remove {} / add {}", cell.plan.remove_ids.len(), cell.plan.add_ids.len());
                index.push(json!({ "name": cell.name, "file": file, "strategy": cell.strategy }));
            }
            let index = json!({ "base_version": train_set.version, "cells": index });
            write_file(&out_dir.join("index.json"), (serde_json::to_string_pretty(&index)? + "\n").as_bytes())?;
            ctx.emit(&text, &index)
        }
    }
}

/// A trained reference model with its label vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelFile {
    pub labels: Vec<String>,
    pub model: RefModel,
}

struct LabelledData {
    features: ActivationMatrix,
    /// Label vocabulary, sorted.
    vocab: Vec<String>,
    /// Class index per id.
    labels: BTreeMap<String, usize>,
}

impl LabelledData {
    fn load(args: &DataArgs) -> CliResult<Self> {
        let features = load_acts(&args.features, "features")?;
        let raw = io::read_labels(read_file(&args.labels)?.as_bytes())?;
        let vocab: Vec<String> = raw.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let labels = raw
            .iter()
            .map(|(id, l)| (id.clone(), vocab.binary_search(l).expect("label is in the vocabulary")))
            .collect();
        Ok(Self { features, vocab, labels })
    }

    /// Rows for `ids` (all labelled feature rows when `None`), in feature order.
    fn rows(&self, ids: Option<&HashSet<String>>) -> CliResult<(ActivationMatrix, Vec<usize>)> {
        if let Some(ids) = ids {
            let have: HashSet<&str> = self.features.ids.iter().map(String::as_str).collect();
            let mut sorted: Vec<&String> = ids.iter().collect();
            sorted.sort();
            if let Some(missing) = sorted.iter().find(|id| !have.contains(id.as_str()) || !self.labels.contains_key(**id)) {
                return Err(Error::NotFound(format!("no features or label for `{missing}`")).into());
            }
        }
        let keep: HashSet<&str> = self
            .features
            .ids
            .iter()
            .filter(|id| self.labels.contains_key(*id) && ids.is_none_or(|s| s.contains(*id)))
            .map(String::as_str)
            .collect();
        if keep.is_empty() {
            return Err(Error::Empty("no labelled feature rows".into()).into());
        }
        let subset = self.features.select(&keep);
        let y = subset.ids.iter().map(|id| self.labels[id]).collect();
        Ok((subset, y))
    }
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> CliResult<(TrainConfig, Option<Repeats>)> {
    let mut c = ctx.config.train.clone();
    if let Some(h) = a.hidden {
        c.hidden = h;
    }
    if let Some(e) = a.epochs {
        c.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        c.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(p) = a.patience {
        c.patience = p;
    }
    if let Some(s) = ctx.seed {
        c.seed = s;
    }
    let repeats = match &a.repeats {
        Some(r) => {
            let (s, n) = r
                .split_once('x')
                .and_then(|(s, n)| Some((s.parse().ok()?, n.parse().ok()?)))
                .ok_or_else(|| CliError::user("usage", format!("repeats `{r}` is not SEEDSxRUNS")))?;
            Some(Repeats { seeds: s, runs_per_seed: n })
        }
        None => ctx.config.repeats,
    };
    Ok((c, repeats))
}

fn fit_model(x: &ActivationMatrix, y: &[usize], config: &TrainConfig, repeats: Option<Repeats>) -> CliResult<RefModel> {
    Ok(match repeats {
        Some(r) => train_repeated(&x.data, y, config, r)?,
        None => train(&x.data, y, config)?,
    })
}

fn read_model(path: &Path) -> CliResult<ModelFile> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| CliError::user("bad-model", format!("{}: {e}", path.display())))
}

fn model(ctx: &mut Ctx, cmd: ModelCmd) -> CliResult<()> {
    match cmd {
        ModelCmd::Train {
            data,
            train: targs,
            dataset,
            model_out,
            activations_out,
        } => {
            let (config, repeats) = train_config(ctx, &targs)?;
            let d = LabelledData::load(&data)?;
            let ids = match dataset {
                Some(v) => {
                    let store = ctx.reader()?;
                    let ds = store
                        .state()
                        .dataset(v)
                        .ok_or_else(|| Error::NotFound(format!("dataset v{v}")))?;
                    Some(ds.ids.iter().cloned().collect::<HashSet<_>>())
                }
                None => None,
            };
            let (x, y) = d.rows(ids.as_ref())?;
            ctx.progress(&format!("training on {} rows, {} classes", x.nrows(), d.vocab.len()));
            let model = fit_model(&x, &y, &config, repeats)?;
            let acc = model.accuracy(&x.data, &y)?;
            let file = ModelFile { labels: d.vocab.clone(), model };
            write_file(&model_out, (serde_json::to_string(&file)? + "\n").as_bytes())?;
            if let Some(p) = activations_out {
                let acts = penultimate(&file.model, &d.features)?;
                let mut buf = Vec::new();
                io::write_activations_csv(&mut buf, &acts)?;
                write_file(&p, &buf)?;
            }
            let epochs = file.model.history.len();
            ctx.emit(
                &format!("trained {} epoch(s), training accuracy {acc:.4}\n", epochs),
                &json!({ "rows": x.nrows(), "classes": d.vocab, "epochs": epochs, "best_epoch": file.model.best_epoch, "train_accuracy": acc }),
            )
        }
        ModelCmd::Loo {
            data,
            train: targs,
            category,
            dims,
            name,
            matrix_out,
        } => {
            let (config, repeats) = train_config(ctx, &targs)?;
            let mut loo = ctx.config.loo.clone();
            if let Some(s) = ctx.seed {
                loo.seed = s;
            }
            let d = LabelledData::load(&data)?;
            let mut store = ctx.writer()?;
            let have: HashSet<&str> = d.features.ids.iter().map(String::as_str).collect();
            let records: Vec<SampleRecord> = store
                .state()
                .records
                .iter()
                .filter(|r| have.contains(r.id.as_str()) && d.labels.contains_key(&r.id))
                .cloned()
                .collect();
            let splits = make_loo_splits(&records, &category, &loo)?;
            let test_ids: HashSet<String> = splits[0].test_ids.iter().cloned().collect();
            let (test_x, _) = d.rows(Some(&test_ids))?;
            let mut models = Vec::new();
            for split in &splits {
                let ids: HashSet<String> = split.train_ids.iter().cloned().collect();
                let (x, y) = d.rows(Some(&ids))?;
                ctx.progress(&format!("training {} on {} rows", split.label(), x.nrows()));
                models.push((split.label(), fit_model(&x, &y, &config, repeats)?));
            }
            let refs: Vec<(String, &RefModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let dims = if dims.is_empty() { vec![category.clone()] } else { dims };
            let matrix = group_accuracy_matrix(&refs, &test_x, &d.labels, &records, &dims)?;
            let name = name.unwrap_or_else(|| format!("loo-{category}"));
            store.append(Event::ExperimentRecorded { name: name.clone(), matrix: matrix.clone() })?;
            finish_matrix(ctx, &name, &matrix, matrix_out.as_deref(), json!({ "splits": splits }))
        }
        ModelCmd::Matrix {
            data,
            models,
            test_ids,
            dims,
            name,
            matrix_out,
        } => {
            let d = LabelledData::load(&data)?;
            let mut loaded = Vec::new();
            for spec in &models {
                let (n, p) = spec
                    .split_once('=')
                    .ok_or_else(|| CliError::user("usage", format!("model `{spec}` is not name=path")))?;
                let file = read_model(Path::new(p))?;
                if file.labels != d.vocab {
                    return Err(CliError::user(
                        "label-mismatch",
                        format!("model `{n}` was trained on labels {:?}, data has {:?}", file.labels, d.vocab),
                    ));
                }
                loaded.push((n.to_string(), file.model));
            }
            let mut store = if name.is_some() { ctx.writer()? } else { ctx.reader()? };
            let test: HashSet<String> = match test_ids {
                Some(p) => read_file(&p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
                None => {
                    let train_ids = store.state().latest_dataset().map(|v| v.ids.clone()).unwrap_or_default();
                    d.features
                        .ids
                        .iter()
                        .filter(|id| d.labels.contains_key(*id) && !train_ids.contains(*id))
                        .cloned()
                        .collect()
                }
            };
            let (test_x, _) = d.rows(Some(&test))?;
            let refs: Vec<(String, &RefModel)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
            let matrix = group_accuracy_matrix(&refs, &test_x, &d.labels, &store.state().records, &dims)?;
            if let Some(n) = &name {
                store.append(Event::ExperimentRecorded { name: n.clone(), matrix: matrix.clone() })?;
            }
            let label = name.unwrap_or_else(|| "matrix".into());
            finish_matrix(ctx, &label, &matrix, matrix_out.as_deref(), Value::Null)
        }
        ModelCmd::Delta {
            before,
            after,
            name,
            matrix_out,
        } => {
            let mut store = if name.is_some() { ctx.writer()? } else { ctx.reader()? };
            let delta = workflow::experiment_delta(store.state(), &before, &after)?;
            if let Some(n) = &name {
                store.append(Event::ExperimentRecorded { name: n.clone(), matrix: delta.clone() })?;
            }
            let label = name.unwrap_or_else(|| format!("{after}-minus-{before}"));
            finish_matrix(ctx, &label, &delta, matrix_out.as_deref(), Value::Null)
        }
    }
}

fn finish_matrix(ctx: &mut Ctx, name: &str, matrix: &AccuracyMatrix, out: Option<&Path>, extra: Value) -> CliResult<()> {
    let csv = matrix.to_csv()?;
    if let Some(p) = out {
        write_file(p, csv.as_bytes())?;
    }
    let mut doc = json!({ "name": name, "matrix": matrix });
    if !extra.is_null() {
        doc["detail"] = extra;
    }
    ctx.emit(&csv, &doc)
}

fn serve(ctx: &mut Ctx, a: ServeArgs) -> CliResult<()> {
    let store = ctx.writer()?;
    let config = datadesign_api::ApiConfig {
        token: a.token,
        workers: a.workers,
        ui_dir: a.with_ui,
    };
    ctx.progress(&format!("serving {} on http://{}", ctx.project.display(), a.addr));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    runtime
        .block_on(datadesign_api::serve(store, a.addr, config))
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse || e.kind() == std::io::ErrorKind::AddrNotAvailable {
                CliError::user("bind", format!("cannot bind {}: {e}", a.addr))
            } else {
                CliError::Internal(e.to_string())
            }
        })
}
