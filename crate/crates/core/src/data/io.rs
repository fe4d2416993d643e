//! Dataset files.
//!
//! ```text
//! #taskseq-dataset v1
//! assembly_id,operator_id,frame_index,module_label,c0,...,c125
//! 1,1,0,-1,0.31,...
//! ...
//! #end <frame count>
//! ```
//!
//! Frames of one assembly are contiguous and indexed from 0. Coordinates are
//! written in shortest round-trip form, so a save/load cycle is lossless. The
//! trailing `#end` line guards against truncation. Module boundaries,
//! including robot modules, live in a JSON sidecar next to the dataset
//! (`<name>.meta.json`).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::{spans_from_labels, Agent, Dataset, LandmarkFrame, ModuleSpan, Recording, COORDS, NO_LABEL, NUM_CLASSES};
use super::segment::validate_spans;
use super::synth::GenerationPlan;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "#taskseq-dataset v1";
pub const METADATA_FORMAT: &str = "taskseq-metadata v1";
const FOOTER: &str = "#end";
const FIXED_COLUMNS: [&str; 4] = ["assembly_id", "operator_id", "frame_index", "module_label"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyMetadata {
    pub assembly_id: u32,
    pub operator_id: u32,
    pub frames: usize,
    pub modules: Vec<ModuleSpan>,
}

/// How a synthetic dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub plan: GenerationPlan,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub format: String,
    pub generation: Option<Generation>,
    pub assemblies: Vec<AssemblyMetadata>,
}

impl DatasetMetadata {
    pub fn from_dataset(ds: &Dataset, generation: Option<Generation>) -> Self {
        Self {
            format: METADATA_FORMAT.into(),
            generation,
            assemblies: ds
                .recordings
                .iter()
                .map(|r| AssemblyMetadata {
                    assembly_id: r.assembly_id,
                    operator_id: r.operator_id,
                    frames: r.len(),
                    modules: r.modules.clone(),
                })
                .collect(),
        }
    }

    pub fn assembly(&self, assembly_id: u32) -> Option<&AssemblyMetadata> {
        self.assemblies.iter().find(|a| a.assembly_id == assembly_id)
    }
}

/// Sidecar path for a dataset file.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialises the frame records of `ds`.
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{DATASET_MAGIC}")?;
    let mut w = csv::Writer::from_writer(BufWriter::new(&mut out));
    let header: Vec<String> = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..COORDS).map(|i| format!("c{i}")))
        .collect();
    w.write_record(&header)?;
    let mut count = 0usize;
    let mut row: Vec<String> = Vec::with_capacity(4 + COORDS);
    for rec in &ds.recordings {
        if rec.labels.len() != rec.frames.len() {
            return Err(Error::Data(format!(
                "assembly {} has {} labels for {} frames",
                rec.assembly_id,
                rec.labels.len(),
                rec.frames.len()
            )));
        }
        for (t, (f, l)) in rec.frames.iter().zip(&rec.labels).enumerate() {
            row.clear();
            row.push(rec.assembly_id.to_string());
            row.push(rec.operator_id.to_string());
            row.push(t.to_string());
            row.push(l.to_string());
            row.extend(f.coords.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
            count += 1;
        }
    }
    w.flush()?;
    drop(w);
    writeln!(out, "{FOOTER} {count}")?;
    Ok(out)
}

/// Saves `ds` and its metadata sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path, generation: Option<Generation>) -> Result<()> {
    for rec in &ds.recordings {
        validate_spans(rec)?;
    }
    let meta = DatasetMetadata::from_dataset(ds, generation);
    write_atomic(path, &dataset_to_bytes(ds)?)?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_atomic(&metadata_path(path), &json)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    rec[i]
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {name} {:?}", &rec[i])))
}

/// Parses dataset records. Module spans are recovered from labels; robot
/// modules are unknown without the sidecar.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim_end() == DATASET_MAGIC => {}
        Some(l) => {
            return Err(parse_err(1, format!("expected {DATASET_MAGIC:?}, found {l:?}")));
        }
        None => return Err(parse_err(1, "empty file")),
    }
    let body_end = text
        .trim_end()
        .rfind('\n')
        .ok_or_else(|| parse_err(2, "missing column header"))?;
    let last = text.trim_end()[body_end + 1..].trim();
    let total_lines = text.trim_end().lines().count();
    let declared: usize = match last.strip_prefix(FOOTER) {
        Some(n) => n
            .trim()
            .parse()
            .map_err(|_| parse_err(total_lines, format!("malformed footer {last:?}")))?,
        None => {
            return Err(parse_err(
                total_lines,
                "file is truncated: missing end-of-data footer",
            ))
        }
    };
    let start = text.find('\n').map_or(text.len(), |i| i + 1);
    let body = &text[start..=body_end];
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(2, e.to_string()))?.clone();
    if headers.len() != 4 + COORDS || FIXED_COLUMNS.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(parse_err(2, "unexpected column header"));
    }
    let mut recordings: Vec<Recording> = Vec::new();
    let mut count = 0usize;
    for (k, rec) in reader.records().enumerate() {
        let line = k + 3;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let assembly_id: u32 = field(&rec, 0, "assembly_id", line)?;
        let operator_id: u32 = field(&rec, 1, "operator_id", line)?;
        let frame_index: usize = field(&rec, 2, "frame_index", line)?;
        let label: i32 = field(&rec, 3, "module_label", line)?;
        if rec.len() != 4 + COORDS {
            return Err(parse_err(
                line,
                format!(
                    "assembly {assembly_id} frame {frame_index} has {} coordinates, expected {COORDS}",
                    rec.len().saturating_sub(4)
                ),
            ));
        }
        if label != NO_LABEL && !(0..NUM_CLASSES as i32).contains(&label) {
            return Err(parse_err(line, format!("module label {label} out of range")));
        }
        let coords = (4..rec.len())
            .map(|i| field::<f64>(&rec, i, "coordinate", line))
            .collect::<Result<Vec<_>>>()?;
        let frame = LandmarkFrame::new(frame_index, coords).map_err(|e| parse_err(line, e.to_string()))?;
        let current = match recordings.last_mut() {
            Some(r) if r.assembly_id == assembly_id => r,
            _ => {
                if recordings.iter().any(|r| r.assembly_id == assembly_id) {
                    return Err(parse_err(
                        line,
                        format!("frames of assembly {assembly_id} are not contiguous"),
                    ));
                }
                recordings.push(Recording {
                    assembly_id,
                    operator_id,
                    frames: Vec::new(),
                    labels: Vec::new(),
                    modules: Vec::new(),
                });
                recordings.last_mut().expect("just pushed")
            }
        };
        if current.operator_id != operator_id {
            return Err(parse_err(
                line,
                format!("assembly {assembly_id} changes operator"),
            ));
        }
        if frame_index != current.frames.len() {
            return Err(parse_err(
                line,
                format!(
                    "assembly {assembly_id}: expected frame {}, found {frame_index}",
                    current.frames.len()
                ),
            ));
        }
        current.frames.push(frame);
        current.labels.push(label);
        count += 1;
    }
    if count != declared {
        return Err(parse_err(
            total_lines,
            format!("footer declares {declared} frames but {count} were read"),
        ));
    }
    for r in &mut recordings {
        r.modules = spans_from_labels(&r.labels);
    }
    Ok(Dataset { recordings })
}

/// Replaces label-derived spans with the sidecar's, after checking that the
/// human spans agree with the frame labels.
pub fn attach_metadata(ds: &mut Dataset, meta: &DatasetMetadata) -> Result<()> {
    if meta.format != METADATA_FORMAT {
        return Err(Error::Data(format!("unsupported metadata format {:?}", meta.format)));
    }
    for rec in &mut ds.recordings {
        let m = meta
            .assemblies
            .iter()
            .find(|a| a.assembly_id == rec.assembly_id)
            .ok_or_else(|| Error::Data(format!("metadata lacks assembly {}", rec.assembly_id)))?;
        if m.frames != rec.len() || m.operator_id != rec.operator_id {
            return Err(Error::Data(format!(
                "metadata for assembly {} disagrees with the dataset",
                rec.assembly_id
            )));
        }
        let human: Vec<ModuleSpan> = m.modules.iter().filter(|s| s.agent == Agent::Human).cloned().collect();
        if human != rec.modules {
            return Err(Error::Data(format!(
                "metadata module boundaries of assembly {} disagree with frame labels",
                rec.assembly_id
            )));
        }
        rec.modules = m.modules.clone();
        validate_spans(rec)?;
    }
    Ok(())
}

/// Loads a dataset and, when present, its sidecar.
pub fn load_dataset_with_metadata(path: &Path) -> Result<(Dataset, Option<DatasetMetadata>)> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut ds = parse_dataset(&text)?;
    let meta_path = metadata_path(path);
    let meta = if meta_path.exists() {
        let meta: DatasetMetadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        attach_metadata(&mut ds, &meta)?;
        Some(meta)
    } else {
        None
    };
    Ok((ds, meta))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_with_metadata(path).map(|(ds, _)| ds)
}
