//! File formats: record tables, activation matrices, scores and labels.
//!
//! - Records: CSV with header `id,wave,<dimension>...` and an optional
//!   `session` column. An empty field is a missing value.
//! - Activations: CSV with header `id,a0,...,a{M-1}`, or little-endian `f32`
//!   row-major binary with a JSON sidecar ([`BinaryDescriptor`]) and a
//!   newline-separated id list.
//! - Scores: CSV `id,score`.
//! - Labels: CSV `id,label`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::familiarity::{ActivationMatrix, FamiliarityScores, ScoreEntry};
use crate::monitor::SampleRecord;
use crate::{Error, Result};

pub fn read_records<R: Read>(reader: R) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| Error::Format("records header lacks `id`".into()))?;
    let wave_col = col("wave").ok_or_else(|| Error::Format("records header lacks `wave`".into()))?;
    let session_col = col("session");
    let dims: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_col && *i != wave_col && Some(*i) != session_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Format(format!("record {} has an empty id", line + 1)));
        }
        let wave = row
            .get(wave_col)
            .unwrap_or("")
            .parse::<u32>()
            .map_err(|e| Error::Format(format!("record `{id}`: bad wave ({e})")))?;
        let session = session_col
            .and_then(|c| row.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let values: BTreeMap<String, String> = dims
            .iter()
            .filter_map(|(i, name)| {
                row.get(*i)
                    .filter(|v| !v.is_empty())
                    .map(|v| (name.clone(), v.to_string()))
            })
            .collect();
        out.push(SampleRecord {
            id,
            wave,
            session,
            values,
        });
    }
    Ok(out)
}

pub fn write_records<W: Write>(writer: W, dims: &[String], records: &[SampleRecord]) -> Result<()> {
    let with_session = records.iter().any(|r| r.session.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "wave".to_string()];
    if with_session {
        header.push("session".into());
    }
    header.extend(dims.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.id.clone(), r.wave.to_string()];
        if with_session {
            row.push(r.session.clone().unwrap_or_default());
        }
        row.extend(dims.iter().map(|d| r.value(d).unwrap_or("").to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations_csv<R: Read>(reader: R, layer_tag: &str) -> Result<ActivationMatrix> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Format("activation header must start with `id`".into()));
    }
    let m = headers.len() - 1;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        let values = row
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Format(format!("row `{id}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: values.len(),
            });
        }
        ids.push(id);
        rows.push(values);
    }
    ActivationMatrix::from_rows(ids, &rows, layer_tag)
}

pub fn write_activations_csv<W: Write>(writer: W, acts: &ActivationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((0..acts.ncols()).map(|j| format!("a{j}")));
    w.write_record(&header)?;
    for (i, id) in acts.ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(acts.data.row(i).iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar for the binary activation format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryDescriptor {
    pub n: usize,
    pub m: usize,
    pub layer_tag: String,
    /// Binary payload, relative to the descriptor.
    pub data_file: PathBuf,
    /// Newline-separated ids, relative to the descriptor.
    pub ids_file: PathBuf,
}

pub fn read_activations_binary(descriptor_path: &Path) -> Result<ActivationMatrix> {
    let desc: BinaryDescriptor = serde_json::from_str(&fs::read_to_string(descriptor_path)?)?;
    let base = descriptor_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(base.join(&desc.data_file))?;
    if bytes.len() != desc.n * desc.m * 4 {
        return Err(Error::Format(format!(
            "binary payload has {} bytes, expected {}",
            bytes.len(),
            desc.n * desc.m * 4
        )));
    }
    let ids: Vec<String> = fs::read_to_string(base.join(&desc.ids_file))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = nalgebra::DMatrix::from_row_slice(desc.n, desc.m, &values);
    ActivationMatrix::new(ids, data, &desc.layer_tag)
}

/// Write the binary format: `<stem>.bin`, `<stem>.ids` and `<stem>.json`.
/// Values are narrowed to `f32`.
pub fn write_activations_binary(dir: &Path, stem: &str, acts: &ActivationMatrix) -> Result<PathBuf> {
    let data_file = PathBuf::from(format!("{stem}.bin"));
    let ids_file = PathBuf::from(format!("{stem}.ids"));
    let mut bytes = Vec::with_capacity(acts.nrows() * acts.ncols() * 4);
    for row in acts.data.row_iter() {
        for x in row.iter() {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(&data_file), bytes)?;
    fs::write(dir.join(&ids_file), acts.ids.join("\n") + "\n")?;
    let desc = BinaryDescriptor {
        n: acts.nrows(),
        m: acts.ncols(),
        layer_tag: acts.layer_tag.clone(),
        data_file,
        ids_file,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&desc)?)?;
    Ok(path)
}

/// Load activations by extension: `.json` is a binary descriptor, anything
/// else is CSV.
pub fn load_activations(path: &Path, layer_tag: &str) -> Result<ActivationMatrix> {
    if path.extension().is_some_and(|e| e == "json") {
        read_activations_binary(path)
    } else {
        read_activations_csv(fs::File::open(path)?, layer_tag)
    }
}

pub fn read_scores<R: Read>(reader: R) -> Result<FamiliarityScores> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut entries = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        let score = row
            .get(1)
            .unwrap_or("")
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("score for `{id}`: {e}")))?;
        entries.push(ScoreEntry { id, score });
    }
    Ok(FamiliarityScores {
        entries,
        model: None,
    })
}

pub fn write_scores<W: Write>(writer: W, scores: &FamiliarityScores) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "score"])?;
    for e in &scores.entries {
        w.write_record([e.id.clone(), e.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(reader: R) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        let label = row
            .get(1)
            .ok_or_else(|| Error::Format(format!("label row `{id}` has no label")))?;
        if out.insert(id.clone(), label.to_string()).is_some() {
            return Err(Error::DuplicateName(id));
        }
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, labels: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "label"])?;
    for (id, label) in labels {
        w.write_record([id, label])?;
    }
    w.flush()?;
    Ok(())
}
