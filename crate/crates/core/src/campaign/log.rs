//! Append-only JSONL campaign log and its CSV export.
//!
//! Line 1 is the header (config snapshot), then one line per experiment, then
//! an optional summary. A log without a summary is a valid prefix of an
//! interrupted run.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CampaignConfig, CampaignError};
use crate::composition::Electrolyte;
use crate::planner::{AcquisitionKind, Hyperparameters};
use crate::protocol::{ExperimentRequest, ExperimentResponse};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub config: CampaignConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub grid_index: usize,
    pub kind: AcquisitionKind,
    pub request: ExperimentRequest,
    pub response: ExperimentResponse,
    /// Prefix maximum of reported conductivities; absent until one succeeds.
    pub best_so_far: Option<f64>,
    pub hyperparameters: Option<Hyperparameters>,
}

impl LogEntry {
    pub fn reported(&self) -> Option<f64> {
        if self.response.is_ok() {
            self.response.conductivity_ms_cm
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignStatus {
    /// Budget spent.
    Complete,
    /// Every grid point measured before the budget ran out.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub status: CampaignStatus,
    pub entries: usize,
    pub failures: usize,
    pub best_conductivity_ms_cm: Option<f64>,
    pub best_step: Option<usize>,
    pub best_composition: Option<Electrolyte>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(LogHeader),
    Entry(LogEntry),
    Summary(LogSummary),
}

fn encode(line: &Line) -> String {
    let mut s = serde_json::to_string(line).expect("log line serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignLog {
    pub header: LogHeader,
    pub entries: Vec<LogEntry>,
    pub summary: Option<LogSummary>,
}

impl CampaignLog {
    pub fn new(config: CampaignConfig) -> Self {
        CampaignLog { header: LogHeader { version: LOG_VERSION, config }, entries: Vec::new(), summary: None }
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.header.config
    }

    pub fn is_complete(&self) -> bool {
        self.summary.is_some()
    }

    pub fn best(&self) -> Option<f64> {
        self.entries.last().and_then(|e| e.best_so_far)
    }

    pub fn summarize(&self, status: CampaignStatus) -> LogSummary {
        let mut best: Option<&LogEntry> = None;
        for e in &self.entries {
            if let Some(v) = e.reported() {
                if best.and_then(|b| b.reported()).is_none_or(|b| v > b) {
                    best = Some(e);
                }
            }
        }
        LogSummary {
            status,
            entries: self.entries.len(),
            failures: self.entries.iter().filter(|e| !e.response.is_ok()).count(),
            best_conductivity_ms_cm: best.and_then(|b| b.reported()),
            best_step: best.map(|b| b.step),
            best_composition: best.map(|b| b.request.composition),
        }
    }

    /// Checks ordering, prefix maxima and grid-point uniqueness.
    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::InvalidLog(m));
        if self.header.version != LOG_VERSION {
            return bad(format!("unsupported log version {}", self.header.version));
        }
        let mut seen = BTreeSet::new();
        let mut best: Option<f64> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.step != i + 1 {
                return bad(format!("entry {} has step {}", i + 1, e.step));
            }
            if !seen.insert(e.grid_index) {
                return bad(format!("grid point {} repeated at step {}", e.grid_index, e.step));
            }
            if e.request.experiment_id != e.step as u64 || e.response.experiment_id != e.step as u64 {
                return bad(format!("experiment id mismatch at step {}", e.step));
            }
            if let Some(v) = e.reported() {
                best = Some(best.map_or(v, |b| b.max(v)));
            }
            if e.best_so_far != best {
                return bad(format!("best_so_far at step {} is not the prefix maximum", e.step));
            }
        }
        if let Some(s) = &self.summary {
            if s.entries != self.entries.len() {
                return bad("summary entry count disagrees with entries".into());
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = encode(&Line::Header(self.header.clone()));
        for e in &self.entries {
            out.push_str(&encode(&Line::Entry(e.clone())));
        }
        if let Some(s) = &self.summary {
            out.push_str(&encode(&Line::Summary(s.clone())));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CampaignError> {
        let lines: Vec<&str> = text.lines().collect();
        Self::from_lines(&lines, text.ends_with('\n') || text.is_empty())
    }

    /// Loads a log. A trailing line cut off mid-write is ignored.
    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = std::fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
        let log = Self::parse(&text)?;
        log.validate()?;
        Ok(log)
    }

    fn from_lines(lines: &[&str], terminated: bool) -> Result<Self, CampaignError> {
        let n = lines.len();
        let mut log: Option<CampaignLog> = None;
        for (i, text) in lines.iter().enumerate() {
            if text.trim().is_empty() {
                continue;
            }
            let line: Line = match serde_json::from_str(text) {
                Ok(l) => l,
                Err(_) if i + 1 == n && !terminated => break,
                Err(e) => return Err(CampaignError::InvalidLog(format!("line {}: {e}", i + 1))),
            };
            match (line, log.as_mut()) {
                (Line::Header(h), None) => log = Some(CampaignLog { header: h, entries: Vec::new(), summary: None }),
                (Line::Header(_), Some(_)) => return Err(CampaignError::InvalidLog("second header".into())),
                (_, None) => return Err(CampaignError::InvalidLog("log does not start with a header".into())),
                (Line::Entry(_), Some(l)) if l.summary.is_some() => {
                    return Err(CampaignError::InvalidLog("entry after summary".into()))
                }
                (Line::Entry(e), Some(l)) => l.entries.push(e),
                (Line::Summary(s), Some(l)) => l.summary = Some(s),
            }
        }
        log.ok_or_else(|| CampaignError::InvalidLog("empty log".into()))
    }
}

/// Appends log lines to disk, flushing after each so a crash leaves a
/// parseable prefix.
#[derive(Debug)]
pub struct LogWriter {
    file: File,
}

impl LogWriter {
    /// Starts a fresh file holding `log`'s header and entries.
    pub fn create(path: &Path, log: &CampaignLog) -> Result<Self, CampaignError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CampaignError::io(dir, e))?;
        }
        let mut file = File::create(path).map_err(|e| CampaignError::io(path, e))?;
        let mut prefix = log.clone();
        prefix.summary = None;
        file.write_all(prefix.to_jsonl().as_bytes()).map_err(|e| CampaignError::io(path, e))?;
        file.sync_data().map_err(|e| CampaignError::io(path, e))?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path).map_err(|e| CampaignError::io(path, e))?;
        Ok(LogWriter { file })
    }

    fn write(&mut self, line: &Line) -> Result<(), CampaignError> {
        self.file
            .write_all(encode(line).as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| CampaignError::Io(e.to_string()))
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), CampaignError> {
        self.write(&Line::Entry(entry.clone()))
    }

    pub fn finish(&mut self, summary: &LogSummary) -> Result<(), CampaignError> {
        self.write(&Line::Summary(summary.clone()))
    }
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    step: usize,
    kind: &'a str,
    w_ec: f64,
    w_dmc: f64,
    w_emc: f64,
    molality: f64,
    conductivity_ms_cm: Option<f64>,
    temperature_c: Option<f64>,
    density_g_ml: Option<f64>,
    best_so_far: Option<f64>,
}

pub fn export_csv<W: std::io::Write>(log: &CampaignLog, out: W) -> Result<(), CampaignError> {
    let mut w = csv::Writer::from_writer(out);
    for e in &log.entries {
        let c = e.request.composition;
        w.serialize(CsvRow {
            step: e.step,
            kind: e.kind.label(),
            w_ec: c.blend.w_ec,
            w_dmc: c.blend.w_dmc,
            w_emc: c.blend.w_emc,
            molality: c.molality,
            conductivity_ms_cm: e.reported(),
            temperature_c: e.response.temperature_c,
            density_g_ml: e.response.density_g_ml,
            best_so_far: e.best_so_far,
        })
        .map_err(|e| CampaignError::Io(e.to_string()))?;
    }
    if log.entries.is_empty() {
        w.write_record([
            "step", "kind", "w_ec", "w_dmc", "w_emc", "molality", "conductivity_ms_cm", "temperature_c", "density_g_ml",
            "best_so_far",
        ])
        .map_err(|e| CampaignError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CampaignError::Io(e.to_string()))
}
