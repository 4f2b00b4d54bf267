//! Line-delimited record files with a schema header.
//!
//! Every records file starts with one header line
//! (`{"schema_version":1,"kind":"..."}`) followed by one JSON object per
//! record, fields in fixed (struct) order.
//!
//! Determinism contract: records files contain only values that are exact
//! functions of the config and seed — losses, seeds, counters, allocator
//! peaks — so re-running a command reproduces them *byte for byte*. Wall
//! times can never satisfy that, so they are routed to a separate timing
//! sidecar file (same line-delimited shape, `kind` suffixed with
//! `.timing`), which is explicitly outside the byte-identity contract, as
//! is the human-readable summary table derived from it.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub kind: String,
}

/// One training step. `forward_passes` is the number of forward passes this
/// step performed; `peak_bytes` is the allocator high-water mark observed
/// during the step (tracked bytes, model weights included). Both are exact
/// functions of config + seed. Eval fields appear only on steps where
/// evaluation ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub seeds: Vec<u64>,
    pub loss_plus: Vec<f64>,
    pub loss_minus: Vec<f64>,
    pub projected_grads: Vec<f64>,
    pub forward_passes: u64,
    pub peak_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

/// One timed repetition of one benchmark cell (or the cell's failure
/// marker). `cell` is the cell id, e.g. `inner-q4-b8-s128`. `peak_bytes`
/// is the step's allocator high-water mark minus resident model bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub cell: String,
    pub step_index: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_reason: Option<String>,
    pub peak_bytes: u64,
    pub padding_fraction: f64,
    pub forward_count: u64,
    pub dequant_count: u64,
    pub losses: Vec<f64>,
}

/// Wall-clock measurement, sidecar-only (see module docs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub cell: String,
    pub step_index: u64,
    pub wall_ms: f64,
}

impl TimingRecord {
    pub fn new(cell: impl Into<String>, step_index: u64, wall_ms: f64) -> Result<TimingRecord> {
        if !(wall_ms > 0.0) {
            return Err(Error::Data(format!("wall_ms must be positive, got {wall_ms}")));
        }
        Ok(TimingRecord { cell: cell.into(), step_index, wall_ms })
    }
}

/// The timing sidecar for a records file: `steps.jsonl` →
/// `steps.timing.jsonl`.
pub fn timing_sidecar_path(records: &Path) -> PathBuf {
    let stem = records.file_stem().and_then(|s| s.to_str()).unwrap_or("records");
    records.with_file_name(format!("{stem}.timing.jsonl"))
}

/// Streaming writer: header on creation, one line per record, flushed per
/// write so partial files survive a mid-run abort.
pub struct RecordWriter {
    w: BufWriter<std::fs::File>,
}

impl RecordWriter {
    pub fn create(path: &Path, kind: &str) -> Result<RecordWriter> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = Header { schema_version: SCHEMA_VERSION, kind: kind.to_string() };
        writeln!(w, "{}", encode(&header)?)?;
        w.flush()?;
        Ok(RecordWriter { w })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        writeln!(self.w, "{}", encode(record)?)?;
        self.w.flush()?;
        Ok(())
    }
}

fn encode<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Data(format!("record encode: {e}")))
}

/// Read a records file back, checking the header's kind and version.
pub fn read_records<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::Data(format!("{}: empty records file", path.display()))),
    };
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} (supported: {SCHEMA_VERSION})",
            path.display(),
            header.schema_version
        )));
    }
    if header.kind != kind {
        return Err(Error::Data(format!(
            "{}: kind {:?}, expected {:?}",
            path.display(),
            header.kind,
            kind
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        out.push(rec);
    }
    Ok(out)
}
