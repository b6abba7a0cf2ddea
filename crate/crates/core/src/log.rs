//! Append-only run log.
//!
//! One log file per run, one JSON record per line. The first record is always
//! the header, the last one (if the run finished cleanly) is the `final`
//! record. Timestamps never decrease. Readers tolerate a truncated trailing
//! line, which is what a crash mid-write leaves behind; anything malformed
//! before that is a hard error.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::attribution::{EnergyLedger, IntervalEnergy};
use crate::carbon::IntensityKind;
use crate::reporting::ImpactSummary;
use crate::sensors::{ProcessUsage, SystemReadings};

/// File name of the run log inside a log directory.
pub const LOG_FILE_NAME: &str = "impact_log.jsonl";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("log has no header record")]
    NoHeader,
    #[error("failed to parse log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record at t={got} precedes previous record at t={last}")]
    MonotonicityViolation { last: f64, got: f64 },
    #[error("invalid record: {0}")]
    Invalid(String),
}

impl LogError {
    fn io(path: &Path, source: io::Error) -> Self {
        LogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareComponent {
    pub kind: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageVersion {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: String,
    pub tool_version: String,
    pub start_time: f64,
    pub hardware: Vec<HardwareComponent>,
    pub environment: Vec<PackageVersion>,
    pub region_hint: Option<String>,
    pub pue: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval_s: Option<f64>,
}

impl LogHeader {
    pub fn validate(&self) -> Result<(), LogError> {
        if self.schema_version.is_empty() || self.tool_version.is_empty() {
            return Err(LogError::Invalid(
                "header versions must be non-empty".into(),
            ));
        }
        if !(self.start_time > 0.0) {
            return Err(LogError::Invalid(
                "header start_time must be positive".into(),
            ));
        }
        if !(self.pue >= 1.0) {
            return Err(LogError::Invalid(format!("pue {} is below 1.0", self.pue)));
        }
        Ok(())
    }
}

/// One polling tick: system-wide readings plus per-process usage keyed by pid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: f64,
    pub sys: SystemReadings,
    pub proc: BTreeMap<u32, ProcessUsage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credited: Option<IntervalEnergy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityLogRecord {
    pub t: f64,
    pub region_id: String,
    pub g_per_kwh: f64,
    pub basis: IntensityKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceptionRecord {
    pub t: f64,
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub end_time: f64,
    pub summary: ImpactSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<EnergyLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header(LogHeader),
    Sample(SampleRecord),
    Intensity(IntensityLogRecord),
    Exception(ExceptionRecord),
    Final(FinalRecord),
}

// Internally tagged enums buffer their content, which loses integer map keys
// (pids, GPU indices), so dispatch on `kind` by hand.
impl<'de> Deserialize<'de> for LogRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut value = serde_json::Value::deserialize(d)?;
        let kind = value
            .as_object_mut()
            .and_then(|m| m.remove("kind"))
            .ok_or_else(|| D::Error::missing_field("kind"))?;
        let record = match kind.as_str() {
            Some("header") => serde_json::from_value(value).map(LogRecord::Header),
            Some("sample") => serde_json::from_value(value).map(LogRecord::Sample),
            Some("intensity") => serde_json::from_value(value).map(LogRecord::Intensity),
            Some("exception") => serde_json::from_value(value).map(LogRecord::Exception),
            Some("final") => serde_json::from_value(value).map(LogRecord::Final),
            _ => return Err(D::Error::custom(format!("unknown record kind {kind}"))),
        };
        record.map_err(D::Error::custom)
    }
}

impl LogRecord {
    pub fn timestamp(&self) -> f64 {
        match self {
            LogRecord::Header(h) => h.start_time,
            LogRecord::Sample(s) => s.t,
            LogRecord::Intensity(i) => i.t,
            LogRecord::Exception(e) => e.t,
            LogRecord::Final(f) => f.end_time,
        }
    }

    fn validate(&self) -> Result<(), LogError> {
        let t = self.timestamp();
        if !t.is_finite() {
            return Err(LogError::Invalid(format!("non-finite timestamp {t}")));
        }
        match self {
            LogRecord::Header(h) => h.validate(),
            _ => Ok(()),
        }
    }

    fn to_line(&self) -> Result<String, LogError> {
        let mut line = serde_json::to_string(self).map_err(|e| LogError::Invalid(e.to_string()))?;
        line.push('\n');
        Ok(line)
    }
}

/// Stable run identifier: the first 12 hex digits of the SHA-256 of the
/// serialized header record.
pub fn run_id_for(header: &LogHeader) -> String {
    use sha2::{Digest, Sha256};
    let line = serde_json::to_string(&LogRecord::Header(header.clone())).unwrap_or_default();
    let digest = Sha256::digest(line.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Records recovered from a log, plus the number of skipped trailing fragments.
#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub records: Vec<LogRecord>,
    pub warnings: usize,
}

impl LogContents {
    pub fn header(&self) -> &LogHeader {
        match &self.records[0] {
            LogRecord::Header(h) => h,
            _ => unreachable!("read_records guarantees a leading header"),
        }
    }

    pub fn final_record(&self) -> Option<&FinalRecord> {
        match self.records.last() {
            Some(LogRecord::Final(f)) => Some(f),
            _ => None,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Sample(s) => Some(s),
            _ => None,
        })
    }

    pub fn intensities(&self) -> impl Iterator<Item = &IntensityLogRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Intensity(i) => Some(i),
            _ => None,
        })
    }

    pub fn exceptions(&self) -> impl Iterator<Item = &ExceptionRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Exception(e) => Some(e),
            _ => None,
        })
    }
}

/// Parse log text. Exposed separately from [`read_records`] so concurrent
/// readers holding a byte snapshot can reuse it.
pub fn parse_records(text: &str) -> Result<LogContents, LogError> {
    let mut records = Vec::new();
    let mut warnings = 0;
    let ends_with_newline = text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    // split leaves an empty tail after a trailing newline
    let line_count = if ends_with_newline {
        lines.len() - 1
    } else {
        lines.len()
    };

    for (idx, raw) in lines.iter().take(line_count).enumerate() {
        let is_last = idx + 1 == line_count;
        if raw.is_empty() {
            if is_last && !ends_with_newline {
                continue;
            }
            return Err(LogError::Parse {
                line: idx + 1,
                message: "empty line".into(),
            });
        }
        match serde_json::from_str::<LogRecord>(raw) {
            Ok(record) => records.push(record),
            Err(_) if is_last && !ends_with_newline => warnings += 1,
            Err(e) => {
                return Err(LogError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })
            }
        }
    }

    check_structure(&records)?;
    Ok(LogContents { records, warnings })
}

fn check_structure(records: &[LogRecord]) -> Result<(), LogError> {
    match records.first() {
        Some(LogRecord::Header(_)) => {}
        _ => return Err(LogError::NoHeader),
    }
    let mut last = f64::NEG_INFINITY;
    for (idx, record) in records.iter().enumerate() {
        if idx > 0 && matches!(record, LogRecord::Header(_)) {
            return Err(LogError::Parse {
                line: idx + 1,
                message: "duplicate header".into(),
            });
        }
        if idx + 1 < records.len() && matches!(record, LogRecord::Final(_)) {
            return Err(LogError::Parse {
                line: idx + 2,
                message: "record after final".into(),
            });
        }
        let t = record.timestamp();
        if t < last {
            return Err(LogError::MonotonicityViolation { last, got: t });
        }
        last = t;
    }
    Ok(())
}

pub fn read_records(log_path: &Path) -> Result<LogContents, LogError> {
    let bytes = fs::read(log_path).map_err(|e| LogError::io(log_path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    parse_records(&text)
}

/// Append one record to a log file, validating it against the records already
/// there. Prefer [`LogWriter`] when appending repeatedly.
pub fn append_record(log_path: &Path, record: &LogRecord) -> Result<(), LogError> {
    let mut writer = LogWriter::open(log_path)?;
    writer.append(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalizeOutcome {
    Written,
    AlreadyFinalized,
}

/// Append the `final` record. Calling it on a log that already has one is a
/// logged no-op.
pub fn finalize(
    log_path: &Path,
    end_time: f64,
    summary: &ImpactSummary,
) -> Result<FinalizeOutcome, LogError> {
    let mut writer = LogWriter::open(log_path)?;
    writer.finalize(end_time, summary, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum WriterState {
    Empty,
    Open { last_t: f64 },
    Finalized,
}

/// Single-writer handle that remembers the last timestamp and whether the
/// log is finalized, so each append is one `write` call with no re-read.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
    state: WriterState,
}

impl LogWriter {
    /// Create a fresh log; fails if one already exists at `path`.
    pub fn create(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| LogError::io(path, e))?;
        Ok(LogWriter {
            path: path.to_path_buf(),
            file,
            state: WriterState::Empty,
        })
    }

    /// Open an existing (or empty/missing) log for appending.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let existing = match fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(LogError::io(path, e)),
        };
        let state = if existing.is_empty() {
            WriterState::Empty
        } else {
            let contents = parse_records(&String::from_utf8_lossy(&existing))?;
            match contents.records.last() {
                Some(LogRecord::Final(_)) => WriterState::Finalized,
                Some(r) => WriterState::Open {
                    last_t: r.timestamp(),
                },
                None => WriterState::Empty,
            }
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LogError::io(path, e))?;
        // drop a crash fragment so it does not become an interior line
        if !existing.is_empty() && !existing.ends_with(b"\n") {
            let keep = existing
                .iter()
                .rposition(|&b| b == b'\n')
                .map_or(0, |i| i + 1);
            file.set_len(keep as u64)
                .map_err(|e| LogError::io(path, e))?;
        }
        Ok(LogWriter {
            path: path.to_path_buf(),
            file,
            state,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_finalized(&self) -> bool {
        self.state == WriterState::Finalized
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), LogError> {
        record.validate()?;
        let t = record.timestamp();
        match (self.state, record) {
            (WriterState::Empty, LogRecord::Header(_)) => {}
            (WriterState::Empty, _) => return Err(LogError::NoHeader),
            (_, LogRecord::Header(_)) => {
                return Err(LogError::Invalid("log already has a header".into()))
            }
            (WriterState::Finalized, _) => {
                return Err(LogError::Invalid("log is already finalized".into()))
            }
            (WriterState::Open { last_t }, _) if t < last_t => {
                return Err(LogError::MonotonicityViolation {
                    last: last_t,
                    got: t,
                })
            }
            _ => {}
        }
        let line = record.to_line()?;
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| LogError::io(&self.path, e))?;
        self.state = match record {
            LogRecord::Final(_) => WriterState::Finalized,
            _ => WriterState::Open { last_t: t },
        };
        Ok(())
    }

    pub fn finalize(
        &mut self,
        end_time: f64,
        summary: &ImpactSummary,
        ledger: Option<&EnergyLedger>,
    ) -> Result<FinalizeOutcome, LogError> {
        match self.state {
            WriterState::Empty => return Err(LogError::NoHeader),
            WriterState::Finalized => {
                log::warn!("{} is already finalized", self.path.display());
                return Ok(FinalizeOutcome::AlreadyFinalized);
            }
            WriterState::Open { .. } => {}
        }
        let record = LogRecord::Final(FinalRecord {
            end_time,
            summary: summary.clone(),
            ledger: ledger.cloned(),
        });
        self.append(&record)?;
        self.file
            .sync_data()
            .map_err(|e| LogError::io(&self.path, e))?;
        Ok(FinalizeOutcome::Written)
    }
}
