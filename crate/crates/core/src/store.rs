//! Project persistence as an append-only event log.
//!
//! Layout under the project root:
//!
//! ```text
//! project.json          name, format version, creation time
//! plan/plan.json        current plan document
//! log/events.jsonl      one event per line, seq 1, 2, 3, ...
//! blobs/<sha256>        content-addressed payloads (models, scores, activations)
//! snapshots/state.json  fold of the log, rewritten after every append
//! lock                  present while a writer holds the project
//! ```
//!
//! The log is the source of truth; the plan document and the snapshot are
//! derived from it and can be regenerated by replay.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::familiarity::{FamiliarityModel, FamiliarityScores};
use crate::monitor::{screen_records, IngestMode, IngestSummary, SampleRecord};
use crate::plan::{validate_plan, DatasetPlan};
use crate::refmodel::AccuracyMatrix;
use crate::resample::{apply_plan, DatasetVersion, ResamplePlan, ReviewQueue, Verdict};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const PROJECT_FILE: &str = "project.json";
const LOG_FILE: &str = "log/events.jsonl";
const PLAN_FILE: &str = "plan/plan.json";
const SNAPSHOT_FILE: &str = "snapshots/state.json";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub name: String,
    pub format: u32,
    pub created: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub hash: String,
    pub name: String,
    /// Free-form content kind, e.g. `familiarity-model`, `scores-csv`.
    pub kind: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub model_blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations_blob: Option<String>,
    pub layer_tag: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresInfo {
    pub scores_blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_blob: Option<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    PlanSaved { plan: DatasetPlan },
    RecordsIngested { records: Vec<SampleRecord> },
    BlobRegistered { blob: BlobInfo },
    FamiliarityFitted { fit: FitInfo },
    ScoresComputed { scores: ScoresInfo },
    DatasetCreated { ids: Vec<String> },
    DatasetEdited { base: u64, plan: ResamplePlan },
    ResamplePlanSaved { plan: ResamplePlan },
    ReviewQueued { queue: ReviewQueue },
    ReviewVerdictSet { id: String, verdict: Verdict },
    ExperimentRecorded { name: String, matrix: AccuracyMatrix },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::PlanSaved { .. } => "plan_saved",
            Event::RecordsIngested { .. } => "records_ingested",
            Event::BlobRegistered { .. } => "blob_registered",
            Event::FamiliarityFitted { .. } => "familiarity_fitted",
            Event::ScoresComputed { .. } => "scores_computed",
            Event::DatasetCreated { .. } => "dataset_created",
            Event::DatasetEdited { .. } => "dataset_edited",
            Event::ResamplePlanSaved { .. } => "resample_plan_saved",
            Event::ReviewQueued { .. } => "review_queued",
            Event::ReviewVerdictSet { .. } => "review_verdict_set",
            Event::ExperimentRecorded { .. } => "experiment_recorded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

/// Everything the log implies about the project.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub last_seq: u64,
    pub last_timestamp: Option<DateTime<Utc>>,
    pub plan: Option<DatasetPlan>,
    pub records: Vec<SampleRecord>,
    pub blobs: BTreeMap<String, BlobInfo>,
    pub familiarity: Option<FitInfo>,
    pub scores: Option<ScoresInfo>,
    /// Ordered by version; versions are never modified once created.
    pub datasets: Vec<DatasetVersion>,
    pub pending_plan: Option<ResamplePlan>,
    pub review: Option<ReviewQueue>,
    pub experiments: BTreeMap<String, AccuracyMatrix>,
}

impl ProjectState {
    pub fn dataset(&self, version: u64) -> Option<&DatasetVersion> {
        self.datasets.iter().find(|d| d.version == version)
    }

    pub fn latest_dataset(&self) -> Option<&DatasetVersion> {
        self.datasets.last()
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn next_dataset_version(&self) -> u64 {
        self.datasets.last().map_or(1, |d| d.version + 1)
    }

    fn require_blob(&self, hash: &str) -> Result<()> {
        if self.blobs.contains_key(hash) {
            Ok(())
        } else {
            Err(Error::NotFound(format!("blob {hash} is not registered")))
        }
    }

    /// Fold one event. The state is unchanged when an error is returned.
    pub fn apply(&mut self, env: &Envelope) -> Result<()> {
        if env.seq != self.last_seq + 1 {
            return Err(Error::Invalid(format!(
                "event seq {} does not follow {}",
                env.seq, self.last_seq
            )));
        }
        match &env.event {
            Event::PlanSaved { plan } => {
                if let Some(cur) = &self.plan {
                    if plan.version <= cur.version {
                        return Err(Error::VersionConflict {
                            expected: cur.version + 1,
                            current: cur.version,
                        });
                    }
                }
                self.plan = Some(plan.clone());
            }
            Event::RecordsIngested { records } => {
                let mut ids: HashSet<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
                for r in records {
                    if !ids.insert(r.id.as_str()) {
                        return Err(Error::DuplicateName(r.id.clone()));
                    }
                }
                self.records.extend(records.iter().cloned());
            }
            Event::BlobRegistered { blob } => {
                if blob.hash.len() != 64 || !blob.hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(Error::Invalid(format!("bad blob hash `{}`", blob.hash)));
                }
                self.blobs.insert(blob.hash.clone(), blob.clone());
            }
            Event::FamiliarityFitted { fit } => {
                self.require_blob(&fit.model_blob)?;
                if let Some(a) = &fit.activations_blob {
                    self.require_blob(a)?;
                }
                self.familiarity = Some(fit.clone());
            }
            Event::ScoresComputed { scores } => {
                self.require_blob(&scores.scores_blob)?;
                self.scores = Some(scores.clone());
            }
            Event::DatasetCreated { ids } => {
                let version = DatasetVersion::new(self.next_dataset_version(), ids.iter().cloned());
                if version.len() != ids.len() {
                    return Err(Error::Invalid("dataset lists an id twice".into()));
                }
                self.datasets.push(version);
            }
            Event::DatasetEdited { base, plan } => {
                let parent = self
                    .dataset(*base)
                    .ok_or_else(|| Error::NotFound(format!("dataset v{base}")))?;
                let mut next = apply_plan(parent, plan)?;
                next.version = self.next_dataset_version();
                self.datasets.push(next);
                if self.pending_plan.as_ref() == Some(plan) {
                    self.pending_plan = None;
                }
            }
            Event::ResamplePlanSaved { plan } => {
                plan.check()?;
                self.pending_plan = Some(plan.clone());
            }
            Event::ReviewQueued { queue } => {
                self.review = Some(queue.clone());
            }
            Event::ReviewVerdictSet { id, verdict } => {
                let queue = self
                    .review
                    .as_mut()
                    .ok_or_else(|| Error::NotFound("no review queue".into()))?;
                queue.set_verdict(id, *verdict)?;
            }
            Event::ExperimentRecorded { name, matrix } => {
                self.experiments.insert(name.clone(), matrix.clone());
            }
        }
        self.last_seq = env.seq;
        self.last_timestamp = Some(env.timestamp);
        Ok(())
    }
}

/// Where and why replay stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogDamage {
    /// 1-based line number of the first unusable line.
    pub line: usize,
    pub reason: String,
    /// The damaged line is the unterminated last line, as left by an
    /// interrupted append.
    pub torn: bool,
    /// Byte length of the valid prefix.
    #[serde(skip)]
    valid_len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub state: ProjectState,
    pub events: usize,
    pub damage: Option<LogDamage>,
}

/// Fold a log text. Stops at the first line that does not parse or does
/// not apply.
pub fn replay_text(text: &str) -> Replay {
    let mut state = ProjectState::default();
    let mut offset = 0u64;
    let mut events = 0;
    let mut lines = text.split_inclusive('\n').enumerate().peekable();
    while let Some((i, raw)) = lines.next() {
        let terminated = raw.ends_with('\n');
        let line = raw.trim_end_matches(['\n', '\r']);
        let torn = !terminated && lines.peek().is_none();
        if line.trim().is_empty() && terminated {
            offset += raw.len() as u64;
            continue;
        }
        let result = serde_json::from_str::<Envelope>(line)
            .map_err(Error::from)
            .and_then(|env| {
                let mut next = state.clone();
                next.apply(&env).map(|_| next)
            });
        match result {
            Ok(next) => {
                state = next;
                events += 1;
                offset += raw.len() as u64;
            }
            Err(e) => {
                return Replay {
                    state,
                    events,
                    damage: Some(LogDamage {
                        line: i + 1,
                        reason: e.to_string(),
                        torn,
                        valid_len: offset,
                    }),
                }
            }
        }
    }
    Replay {
        state,
        events,
        damage: None,
    }
}

pub fn replay(root: &Path) -> Result<Replay> {
    let text = fs::read_to_string(root.join(LOG_FILE))?;
    Ok(replay_text(&text))
}

pub fn read_snapshot(root: &Path) -> Result<ProjectState> {
    Ok(serde_json::from_str(&fs::read_to_string(root.join(SNAPSHOT_FILE))?)?)
}

pub fn blob_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug)]
pub struct ProjectStore {
    root: PathBuf,
    meta: ProjectMeta,
    state: ProjectState,
    damage: Option<LogDamage>,
    lock: Option<LockGuard>,
}

/// Create a project at `path`, which must be absent or an empty directory.
/// The returned store holds the writer lock.
pub fn init_project(path: &Path, name: &str) -> Result<ProjectStore> {
    if path.exists() && (!path.is_dir() || fs::read_dir(path)?.next().is_some()) {
        return Err(Error::ProjectExists(path.to_path_buf()));
    }
    for dir in ["plan", "log", "blobs", "snapshots"] {
        fs::create_dir_all(path.join(dir))?;
    }
    let meta = ProjectMeta {
        name: name.to_string(),
        format: FORMAT_VERSION,
        created: Utc::now(),
    };
    write_atomic(&path.join(PROJECT_FILE), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())?;
    File::create(path.join(LOG_FILE))?.sync_all()?;
    let store = ProjectStore {
        root: path.to_path_buf(),
        meta,
        state: ProjectState::default(),
        damage: None,
        lock: Some(LockGuard::acquire(path)?),
    };
    store.write_snapshot()?;
    Ok(store)
}

impl ProjectStore {
    /// Read-only view of the project as of the last valid event.
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join(PROJECT_FILE);
        if !meta_path.exists() {
            return Err(Error::NotFound(format!("no project at {}", root.display())));
        }
        let meta: ProjectMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported project format {}", meta.format)));
        }
        let Replay { state, damage, .. } = replay(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            state,
            damage,
            lock: None,
        })
    }

    /// Open with the writer lock. An interrupted final append is cut off;
    /// damage anywhere else is an error.
    pub fn open_writer(root: &Path) -> Result<Self> {
        let mut store = Self::open(root)?;
        let lock = LockGuard::acquire(root)?;
        let log = root.join(LOG_FILE);
        if let Some(d) = &store.damage {
            if !d.torn {
                return Err(Error::CorruptLog {
                    line: d.line,
                    reason: d.reason.clone(),
                });
            }
            OpenOptions::new().write(true).open(&log)?.set_len(d.valid_len)?;
        }
        let text = fs::read(&log)?;
        if text.last().is_some_and(|b| *b != b'\n') {
            OpenOptions::new().append(true).open(&log)?.write_all(b"\n")?;
        }
        store.lock = Some(lock);
        store.write_snapshot()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &ProjectMeta {
        &self.meta
    }

    pub fn state(&self) -> &ProjectState {
        &self.state
    }

    /// Damage found when the log was loaded. A writer has already cut a torn
    /// final line off, but the report is kept.
    pub fn damage(&self) -> Option<&LogDamage> {
        self.damage.as_ref()
    }

    pub fn is_writer(&self) -> bool {
        self.lock.is_some()
    }

    /// Re-read the log (for readers following a live writer).
    pub fn refresh(&mut self) -> Result<()> {
        let Replay { state, damage, .. } = replay(&self.root)?;
        self.state = state;
        self.damage = damage;
        Ok(())
    }

    pub fn append(&mut self, event: Event) -> Result<u64> {
        self.append_at(event, Utc::now())
    }

    /// Validate, write and fsync one event. Timestamps never go backwards.
    pub fn append_at(&mut self, event: Event, timestamp: DateTime<Utc>) -> Result<u64> {
        if self.lock.is_none() {
            return Err(Error::Invalid("project was opened read-only".into()));
        }
        let timestamp = match self.state.last_timestamp {
            Some(last) if last > timestamp => last,
            _ => timestamp,
        };
        let env = Envelope {
            seq: self.state.last_seq + 1,
            timestamp,
            event,
        };
        let mut next = self.state.clone();
        next.apply(&env)?;
        let mut line = serde_json::to_string(&env)?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).open(self.root.join(LOG_FILE))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.state = next;
        if let Event::PlanSaved { plan } = &env.event {
            write_atomic(&self.root.join(PLAN_FILE), plan.to_document()?.as_bytes())?;
        }
        self.write_snapshot()?;
        Ok(env.seq)
    }

    fn write_snapshot(&self) -> Result<()> {
        let mut text = serde_json::to_string(&self.state)?;
        text.push('\n');
        write_atomic(&self.root.join(SNAPSHOT_FILE), text.as_bytes())
    }

    /// Store `bytes` by content hash, registering the blob if it is new.
    pub fn put_blob(&mut self, bytes: &[u8], name: &str, kind: &str) -> Result<String> {
        let hash = blob_hash(bytes);
        let path = self.root.join("blobs").join(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        if !self.state.blobs.contains_key(&hash) {
            self.append(Event::BlobRegistered {
                blob: BlobInfo {
                    hash: hash.clone(),
                    name: name.to_string(),
                    kind: kind.to_string(),
                    bytes: bytes.len() as u64,
                },
            })?;
        }
        Ok(hash)
    }

    pub fn read_blob(&self, hash: &str) -> Result<Vec<u8>> {
        self.state.require_blob(hash)?;
        let bytes = fs::read(self.root.join("blobs").join(hash))?;
        if blob_hash(&bytes) != hash {
            return Err(Error::Format(format!("blob {hash} does not match its hash")));
        }
        Ok(bytes)
    }

    /// Save a plan. `expected` is the version the caller edited; a mismatch
    /// with the current version is a conflict. The stored plan gets the next
    /// version number.
    pub fn save_plan(&mut self, plan: DatasetPlan, expected: Option<u64>) -> Result<DatasetPlan> {
        let mut next = plan;
        match &self.state.plan {
            Some(cur) => {
                if let Some(e) = expected {
                    if e != cur.version {
                        return Err(Error::VersionConflict {
                            expected: e,
                            current: cur.version,
                        });
                    }
                }
                next.version = cur.version + 1;
                next.created = cur.created;
                next.modified = next.modified.max(cur.modified);
            }
            None => {
                if let Some(e) = expected.filter(|e| *e != 0) {
                    return Err(Error::VersionConflict { expected: e, current: 0 });
                }
                next.version = next.version.max(1);
            }
        }
        let report = validate_plan(&next);
        if !report.is_valid() {
            let reasons: Vec<String> = report
                .findings
                .iter()
                .map(|f| match &f.dimension {
                    Some(d) => format!("{d}: {}", f.reason),
                    None => f.reason.clone(),
                })
                .collect();
            return Err(Error::Invalid(reasons.join("; ")));
        }
        self.append(Event::PlanSaved { plan: next.clone() })?;
        Ok(next)
    }

    /// Screen records against the current plan and append the accepted ones.
    pub fn ingest_records(&mut self, records: Vec<SampleRecord>, mode: IngestMode) -> Result<IngestSummary> {
        let plan = self
            .state
            .plan
            .as_ref()
            .ok_or_else(|| Error::NotFound("project has no plan yet".into()))?;
        let existing: HashSet<String> = self.state.records.iter().map(|r| r.id.clone()).collect();
        let (accepted, summary) = screen_records(plan, &existing, records, mode);
        if !accepted.is_empty() {
            self.append(Event::RecordsIngested { records: accepted })?;
        }
        Ok(summary)
    }

    pub fn familiarity_model(&self) -> Result<FamiliarityModel> {
        let fit = self
            .state
            .familiarity
            .as_ref()
            .ok_or_else(|| Error::NotFound("no familiarity model has been fitted".into()))?;
        let bytes = self.read_blob(&fit.model_blob)?;
        FamiliarityModel::from_document(&String::from_utf8_lossy(&bytes))
    }

    pub fn scores(&self) -> Result<FamiliarityScores> {
        let info = self
            .state
            .scores
            .as_ref()
            .ok_or_else(|| Error::NotFound("no familiarity scores have been computed".into()))?;
        let mut scores = crate::io::read_scores(self.read_blob(&info.scores_blob)?.as_slice())?;
        scores.model = info.model_blob.clone();
        Ok(scores)
    }

    /// Register scores as a CSV blob and record them as current.
    pub fn save_scores(&mut self, scores: &FamiliarityScores) -> Result<String> {
        let mut buf = Vec::new();
        crate::io::write_scores(&mut buf, scores)?;
        let hash = self.put_blob(&buf, "scores.csv", "scores-csv")?;
        self.append(Event::ScoresComputed {
            scores: ScoresInfo {
                scores_blob: hash.clone(),
                model_blob: scores.model.clone(),
                count: scores.len(),
            },
        })?;
        Ok(hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{create_plan_at, DimensionDraft};
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap()
    }

    fn plan() -> DatasetPlan {
        create_plan_at("imu", vec![DimensionDraft::categorical("hand", &["L", "R"], &[1.0, 1.0])], t0()).unwrap()
    }

    fn recs(ids: &[&str]) -> Vec<SampleRecord> {
        ids.iter().map(|id| SampleRecord::new(id, 1, &[("hand", "L")])).collect()
    }

    #[test]
    fn init_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("p");
        let store = init_project(&root, "demo").unwrap();
        assert_eq!(store.state().last_seq, 0);
        assert!(matches!(init_project(&root, "again"), Err(Error::ProjectExists(_))));
        let state = store.state().clone();
        drop(store);
        let reopened = ProjectStore::open(&root).unwrap();
        assert_eq!(reopened.state(), &state);
        assert_eq!(reopened.meta().name, "demo");
    }

    #[test]
    fn sequence_numbers_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        assert_eq!(store.append_at(Event::PlanSaved { plan: plan() }, t0()).unwrap(), 1);
        let seq = store
            .append_at(Event::RecordsIngested { records: recs(&["a", "b", "c"]) }, t0())
            .unwrap();
        assert_eq!(seq, 2);
        let first = replay(dir.path()).unwrap();
        let second = replay(dir.path()).unwrap();
        assert_eq!(first, second);
        assert_eq!(&first.state, store.state());
        assert_eq!(first.state.records.len(), 3);
        assert_eq!(read_snapshot(dir.path()).unwrap(), first.state);
        assert_eq!(
            fs::read_to_string(dir.path().join(PLAN_FILE)).unwrap(),
            plan().to_document().unwrap()
        );
    }

    #[test]
    fn invalid_events_are_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        store.append_at(Event::RecordsIngested { records: recs(&["a"]) }, t0()).unwrap();
        let err = store.append_at(Event::RecordsIngested { records: recs(&["a"]) }, t0());
        assert!(matches!(err, Err(Error::DuplicateName(_))));
        assert!(store.append(Event::ReviewVerdictSet { id: "a".into(), verdict: Verdict::Noisy }).is_err());
        assert_eq!(store.state().last_seq, 1);
        assert_eq!(replay(dir.path()).unwrap().events, 1);
    }

    #[test]
    fn torn_final_line_recovers() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        store.append_at(Event::PlanSaved { plan: plan() }, t0()).unwrap();
        store.append_at(Event::RecordsIngested { records: recs(&["a"]) }, t0()).unwrap();
        let before = store.state().clone();
        drop(store);
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(br#"{"seq":3,"timestamp":"2024-03-01T09:00:00Z","kind":"records_ing"#).unwrap();
        drop(f);

        let r = ProjectStore::open(dir.path()).unwrap();
        assert_eq!(r.state(), &before);
        let d = r.damage().unwrap();
        assert_eq!((d.line, d.torn), (3, true));

        let mut w = ProjectStore::open_writer(dir.path()).unwrap();
        assert_eq!(w.append_at(Event::RecordsIngested { records: recs(&["b"]) }, t0()).unwrap(), 3);
        drop(w);
        let again = replay(dir.path()).unwrap();
        assert!(again.damage.is_none());
        assert_eq!(again.state.records.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_blocks_writers() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        store.append_at(Event::PlanSaved { plan: plan() }, t0()).unwrap();
        store.append_at(Event::RecordsIngested { records: recs(&["a"]) }, t0()).unwrap();
        drop(store);
        let log = dir.path().join(LOG_FILE);
        let text = fs::read_to_string(&log).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.insert(1, "not json");
        fs::write(&log, lines.join("\n") + "\n").unwrap();
        let r = ProjectStore::open(dir.path()).unwrap();
        assert_eq!(r.damage().unwrap().line, 2);
        assert_eq!(r.state().last_seq, 1);
        assert!(matches!(ProjectStore::open_writer(dir.path()), Err(Error::CorruptLog { line: 2, .. })));
    }

    #[test]
    fn single_writer() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_project(dir.path(), "demo").unwrap();
        assert!(matches!(ProjectStore::open_writer(dir.path()), Err(Error::Locked(_))));
        let mut reader = ProjectStore::open(dir.path()).unwrap();
        assert!(reader.append(Event::DatasetCreated { ids: vec![] }).is_err());
        drop(store);
        assert!(ProjectStore::open_writer(dir.path()).is_ok());
    }

    #[test]
    fn plan_versions_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        let v1 = store.save_plan(plan(), None).unwrap();
        assert_eq!(v1.version, 1);
        let v2 = store.save_plan(plan(), Some(1)).unwrap();
        assert_eq!(v2.version, 2);
        assert!(matches!(
            store.save_plan(plan(), Some(1)),
            Err(Error::VersionConflict { expected: 1, current: 2 })
        ));
        let mut bad = plan();
        bad.dimensions[0].expected = vec![1.0];
        assert!(matches!(store.save_plan(bad, Some(2)), Err(Error::Invalid(_))));
        assert_eq!(store.state().plan.as_ref().unwrap().version, 2);
    }

    #[test]
    fn datasets_are_immutable_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        store.append(Event::DatasetCreated { ids: vec!["a".into(), "b".into()] }).unwrap();
        let edit = ResamplePlan {
            remove_ids: vec!["a".into()],
            add_ids: vec!["c".into()],
            ..ResamplePlan::empty()
        };
        store.append(Event::ResamplePlanSaved { plan: edit.clone() }).unwrap();
        store.append(Event::DatasetEdited { base: 1, plan: edit.clone() }).unwrap();
        let s = store.state();
        assert!(s.pending_plan.is_none());
        assert_eq!(s.dataset(1).unwrap().ids.len(), 2);
        assert!(s.dataset(1).unwrap().ids.contains("a"));
        assert_eq!(s.dataset(2).unwrap().parent, Some(1));
        assert!(s.dataset(2).unwrap().ids.contains("c"));
        assert!(store.append(Event::DatasetEdited { base: 2, plan: edit }).is_err());
    }

    #[test]
    fn blobs_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        let h = store.put_blob(b"hello", "greeting", "text").unwrap();
        assert_eq!(h, blob_hash(b"hello"));
        assert_eq!(store.put_blob(b"hello", "greeting", "text").unwrap(), h);
        assert_eq!(store.state().last_seq, 1);
        assert_eq!(store.read_blob(&h).unwrap(), b"hello");
        fs::write(dir.path().join("blobs").join(&h), b"tampered").unwrap();
        assert!(matches!(store.read_blob(&h), Err(Error::Format(_))));

        let scores = FamiliarityScores {
            entries: vec![crate::familiarity::ScoreEntry { id: "a".into(), score: -1.5 }],
            model: None,
        };
        store.save_scores(&scores).unwrap();
        assert_eq!(store.scores().unwrap(), scores);
    }

    #[test]
    fn ingest_screens_against_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = init_project(dir.path(), "demo").unwrap();
        assert!(store.ingest_records(recs(&["a"]), IngestMode::PerRecord).is_err());
        store.save_plan(plan(), None).unwrap();
        let mut batch = recs(&["a", "b"]);
        batch.push(SampleRecord::new("c", 1, &[("hand", "X")]));
        let summary = store.ingest_records(batch, IngestMode::PerRecord).unwrap();
        assert_eq!((summary.accepted, summary.rejected), (2, 1));
        let summary = store.ingest_records(recs(&["a", "d"]), IngestMode::AllOrNothing).unwrap();
        assert_eq!(summary.accepted, 0);
        assert_eq!(store.state().records.len(), 2);
    }
}
