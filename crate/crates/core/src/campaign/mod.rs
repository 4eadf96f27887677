//! Closed-loop campaigns: planner proposes, instrument measures, log records.

pub mod candidates;
pub mod log;

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::AnalyticsConfig;
use crate::composition::{axes_to_electrolyte, enumerate_grid, CompositionError, DomainGrid, Electrolyte, GridSpec};
use crate::exec::Execution;
use crate::planner::{next_point, step_rng, History, PlannerConfig, PlannerError};
use crate::protocol::{
    ExperimentRequest, HttpTransport, Instrument, LoopbackTransport, ProtocolError, Transport, DEFAULT_CACHE_PER_CAMPAIGN,
    DEFAULT_REPLICATES,
};
use crate::virtual_lab::surface::CalibrationError;
use crate::virtual_lab::{LabConfig, LabState};

pub use candidates::{default_rules, select_candidates, select_from, Candidate, CandidateRule, Measured};
pub use log::{export_csv, CampaignLog, CampaignStatus, LogEntry, LogSummary, LogWriter};

pub const LOG_FILE: &str = "campaign.jsonl";
pub const CSV_FILE: &str = "campaign.csv";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("io: {0}")]
    Io(String),
    #[error("invalid log: {0}")]
    InvalidLog(String),
    #[error("existing log was written with a different config")]
    ConfigMismatch,
    #[error("resubmitted step {0} does not reproduce the logged response")]
    ResumeMismatch(usize),
}

impl CampaignError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CampaignError::Io(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Address `serve` binds to.
    pub bind: String,
    /// Remote instrument; when absent campaigns use an in-process instrument.
    pub endpoint: Option<String>,
    pub timeout_s: f64,
    pub attempts: usize,
    pub replicates: usize,
    pub cache_per_campaign: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            bind: "127.0.0.1:8787".into(),
            endpoint: None,
            timeout_s: 30.0,
            attempts: 3,
            replicates: DEFAULT_REPLICATES,
            cache_per_campaign: DEFAULT_CACHE_PER_CAMPAIGN,
        }
    }
}

impl ProtocolConfig {
    pub fn http_transport(&self, endpoint: &str) -> HttpTransport {
        HttpTransport::new(endpoint, Duration::from_secs_f64(self.timeout_s.max(0.001)), self.attempts)
    }
}

/// A known measurement used for comparison, never proposed or selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub label: String,
    #[serde(flatten)]
    pub composition: Electrolyte,
    pub conductivity_ms_cm: f64,
}

pub fn default_baseline() -> Reference {
    Reference {
        label: "G".into(),
        composition: Electrolyte::new(0.30, 0.0, 0.70, 1.1).expect("baseline composition is valid"),
        conductivity_ms_cm: 9.8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub campaign_id: String,
    pub budget: usize,
    /// Seeds the planner and, through a derived seed, the instrument.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Does not affect results, so it is not recorded in logs.
    #[serde(skip_serializing)]
    pub execution: Execution,
    pub baseline: Option<Reference>,
    pub grid: GridSpec,
    pub planner: PlannerConfig,
    pub lab: LabConfig,
    pub protocol: ProtocolConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            campaign_id: "campaign".into(),
            budget: 40,
            seed: 0,
            out_dir: None,
            execution: Execution::default(),
            baseline: Some(default_baseline()),
            grid: GridSpec::default(),
            planner: PlannerConfig::default(),
            lab: LabConfig::default(),
            protocol: ProtocolConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CampaignError> {
        toml::from_str(s).map_err(|e| CampaignError::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, CampaignError> {
        let text = std::fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Planner settings with the campaign's seed and budget applied.
    pub fn effective_planner(&self) -> PlannerConfig {
        PlannerConfig { seed: self.seed, budget: self.budget, ..self.planner.clone() }
    }

    pub fn lab_seed(&self) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng.next_u64()
    }

    pub fn validate(&self) -> Result<DomainGrid, CampaignError> {
        let grid = enumerate_grid(&self.grid)?;
        if self.budget > grid.len() {
            return Err(CampaignError::Config(format!("budget {} exceeds grid size {}", self.budget, grid.len())));
        }
        if self.budget > 0 {
            self.effective_planner().validate()?;
        }
        if self.protocol.replicates < 2 {
            return Err(CampaignError::Config("replicates must be at least 2".into()));
        }
        if self.campaign_id.is_empty() {
            return Err(CampaignError::Config("campaign_id is empty".into()));
        }
        Ok(grid)
    }

    /// Fresh in-process instrument for this campaign.
    pub fn instrument(&self) -> Result<Instrument, CampaignError> {
        let lab = LabState::new(self.lab.clone(), self.lab_seed())?;
        Ok(Instrument::with_cache_limit(lab, self.protocol.cache_per_campaign))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(LOG_FILE))
    }

    /// Same campaign, ignoring the budget (which may be extended on resume).
    fn same_campaign(&self, other: &CampaignConfig) -> bool {
        CampaignConfig { budget: 0, ..self.clone() }.to_snapshot() == CampaignConfig { budget: 0, ..other.clone() }.to_snapshot()
    }

    fn to_snapshot(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Prefix maxima of reported conductivity, one point per entry.
pub fn best_so_far(log: &CampaignLog) -> Vec<(usize, Option<f64>)> {
    let mut best: Option<f64> = None;
    log.entries
        .iter()
        .map(|e| {
            if let Some(v) = e.reported() {
                best = Some(best.map_or(v, |b| b.max(v)));
            }
            (e.step, best)
        })
        .collect()
}

/// First step whose best-so-far reaches `threshold`.
pub fn first_step_reaching(log: &CampaignLog, threshold: f64) -> Option<usize> {
    best_so_far(log).into_iter().find(|(_, b)| b.is_some_and(|b| b >= threshold)).map(|(s, _)| s)
}

/// Runs against a fresh in-process instrument, persisting to `out_dir` if set
/// (resuming from an existing log there).
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignLog, CampaignError> {
    let transport = LoopbackTransport::new(cfg.instrument()?);
    let path = cfg.log_path();
    let log = run_with_transport(cfg, &transport, path.as_deref())?;
    if let Some(dir) = &cfg.out_dir {
        write_csv(&log, &dir.join(CSV_FILE))?;
    }
    Ok(log)
}

pub fn write_csv(log: &CampaignLog, path: &Path) -> Result<(), CampaignError> {
    let f = std::fs::File::create(path).map_err(|e| CampaignError::io(path, e))?;
    export_csv(log, std::io::BufWriter::new(f))
}

/// Loads a prefix log and replays its requests against `transport`, so the
/// instrument ends up in the state the interrupted run left it in.
fn restore(
    cfg: &CampaignConfig,
    transport: &dyn Transport,
    path: &Path,
) -> Result<Option<CampaignLog>, CampaignError> {
    if !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true) {
        return Ok(None);
    }
    let mut log = CampaignLog::load(path)?;
    if !log.config().same_campaign(cfg) {
        return Err(CampaignError::ConfigMismatch);
    }
    if log.entries.len() > cfg.budget {
        return Err(CampaignError::Config(format!(
            "log already holds {} entries, more than the budget {}",
            log.entries.len(),
            cfg.budget
        )));
    }
    for e in &log.entries {
        if transport.submit(&e.request)? != e.response {
            return Err(CampaignError::ResumeMismatch(e.step));
        }
    }
    log.header.config = cfg.clone();
    Ok(Some(log))
}

/// Runs (or resumes) a campaign over any transport. With `log_path`, every
/// entry is flushed to disk as soon as it is measured.
pub fn run_with_transport(
    cfg: &CampaignConfig,
    transport: &dyn Transport,
    log_path: Option<&Path>,
) -> Result<CampaignLog, CampaignError> {
    let grid = cfg.validate()?;
    let restored = match log_path {
        Some(p) => restore(cfg, transport, p)?,
        None => None,
    };
    let resumed = restored.is_some();
    let mut log = restored.unwrap_or_else(|| CampaignLog::new(cfg.clone()));
    if resumed && log.entries.len() == cfg.budget && log.is_complete() {
        return Ok(log);
    }
    log.summary = None;
    let mut writer = match log_path {
        Some(p) => Some(LogWriter::create(p, &log)?),
        None => None,
    };

    let planner = cfg.effective_planner();
    let mut history = History::new();
    for e in &log.entries {
        history.record(e.grid_index, e.reported());
    }
    let mut best = log.best();
    let mut status = CampaignStatus::Complete;

    for step in log.entries.len() + 1..=cfg.budget {
        let proposal = match next_point(&history, &grid, &planner, step, &mut step_rng(cfg.seed, step), cfg.execution) {
            Ok(p) => p,
            Err(PlannerError::Exhausted) => {
                status = CampaignStatus::Exhausted;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let mut request = ExperimentRequest::new(cfg.campaign_id.clone(), step as u64, axes_to_electrolyte(&proposal.axes)?);
        request.replicates = cfg.protocol.replicates;
        let response = transport.submit(&request)?;
        let entry = LogEntry {
            step,
            grid_index: proposal.index,
            kind: proposal.kind,
            request,
            response,
            best_so_far: None,
            hyperparameters: proposal.hyperparameters,
        };
        if let Some(v) = entry.reported() {
            best = Some(best.map_or(v, |b| b.max(v)));
        }
        let entry = LogEntry { best_so_far: best, ..entry };
        history.record(entry.grid_index, entry.reported());
        if let Some(w) = writer.as_mut() {
            w.append(&entry)?;
        }
        log.entries.push(entry);
    }

    let summary = log.summarize(status);
    if let Some(w) = writer.as_mut() {
        w.finish(&summary)?;
    }
    log.summary = Some(summary);
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub identical: bool,
    /// 1-based line number of the first differing line.
    pub first_difference: Option<usize>,
    pub lines: usize,
}

/// Compares two log texts line by line.
pub fn compare_logs(original: &str, replayed: &str) -> ReplayReport {
    let a: Vec<&str> = original.lines().collect();
    let b: Vec<&str> = replayed.lines().collect();
    let first_difference = (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i)).map(|i| i + 1);
    ReplayReport { identical: original == replayed, first_difference, lines: a.len() }
}

/// Re-runs the campaign recorded in `path` from its config and seed and
/// compares the result byte for byte. Without an explicit transport a fresh
/// in-process instrument is used.
pub fn replay_log(path: &Path, transport: Option<&dyn Transport>) -> Result<ReplayReport, CampaignError> {
    let original = std::fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
    let log = CampaignLog::parse(&original)?;
    let cfg = log.config().clone();
    let mut replayed = match transport {
        Some(t) => run_with_transport(&cfg, t, None)?,
        None => run_with_transport(&cfg, &LoopbackTransport::new(cfg.instrument()?), None)?,
    };
    if !log.is_complete() {
        // An interrupted log is compared against the same-length prefix.
        replayed.entries.truncate(log.entries.len());
        replayed.summary = None;
    }
    let text = replayed.to_jsonl();
    Ok(compare_logs(&original, &text))
}
