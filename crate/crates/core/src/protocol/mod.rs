//! JSON-over-HTTP protocol between a planner and the instrument.
//!
//! [`Instrument`] is the transport-free service: validation, idempotent
//! execution and response caching. The HTTP server and client wrap it, and
//! [`LoopbackTransport`] calls it in-process through the same JSON codec.

pub mod client;
pub mod server;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::Electrolyte;
use crate::virtual_lab::{rinse, run_measurement, LabError, LabState, LabStatus};

pub use client::HttpTransport;
pub use server::{router, serve, spawn_server, ServerHandle};

pub const DEFAULT_REPLICATES: usize = 3;
pub const DEFAULT_CACHE_PER_CAMPAIGN: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("experiment {experiment_id} of campaign {campaign_id} was already submitted with a different body")]
    Conflict { campaign_id: String, experiment_id: u64 },
    #[error("server rejected request ({status}): {reason}")]
    Rejected { status: String, reason: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("undecodable message: {0}")]
    Decode(String),
}

impl ProtocolError {
    /// Machine-readable status string used in error bodies.
    pub fn status_code_name(&self) -> &'static str {
        match self {
            ProtocolError::InvalidRequest(_) => "invalid_request",
            ProtocolError::Conflict { .. } => "conflict",
            ProtocolError::Rejected { .. } => "rejected",
            ProtocolError::Transport { .. } => "transport_failure",
            ProtocolError::Decode(_) => "invalid_request",
        }
    }
}

fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRequest {
    pub campaign_id: String,
    pub experiment_id: u64,
    pub composition: Electrolyte,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl ExperimentRequest {
    pub fn new(campaign_id: impl Into<String>, experiment_id: u64, composition: Electrolyte) -> Self {
        ExperimentRequest { campaign_id: campaign_id.into(), experiment_id, composition, replicates: DEFAULT_REPLICATES }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidRequest(m));
        if self.campaign_id.is_empty() {
            return bad("campaign_id is empty".into());
        }
        if self.experiment_id < 1 {
            return bad("experiment_id must be at least 1".into());
        }
        if self.replicates < 2 {
            return bad(format!("replicates must be at least 2, got {}", self.replicates));
        }
        self.composition.validate().or_else(|e| bad(format!("invalid composition: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementStatus {
    Ok,
    InfeasibleDose,
    InventoryExhausted,
    InstrumentFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentResponse {
    pub experiment_id: u64,
    pub status: MeasurementStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductivity_ms_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_g_ml: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_c: Option<f64>,
    #[serde(default)]
    pub runs: Vec<f64>,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ExperimentResponse {
    pub fn failure(experiment_id: u64, status: MeasurementStatus, reason: String, duration_s: f64) -> Self {
        ExperimentResponse {
            experiment_id,
            status,
            conductivity_ms_cm: None,
            density_g_ml: None,
            temperature_c: None,
            runs: Vec::new(),
            duration_s,
            reason: Some(reason),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == MeasurementStatus::Ok
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::Decode(m.to_string()));
        if !self.is_ok() {
            return Ok(());
        }
        let (Some(k), Some(d), Some(t)) = (self.conductivity_ms_cm, self.density_g_ml, self.temperature_c) else {
            return bad("ok response missing numeric fields");
        };
        if ![k, d, t, self.duration_s].iter().chain(&self.runs).all(|v| v.is_finite()) {
            return bad("non-finite value in ok response");
        }
        if self.runs.len() < 2 {
            return bad("ok response needs at least two runs");
        }
        let mean = self.runs[1..].iter().sum::<f64>() / (self.runs.len() - 1) as f64;
        if (mean - k).abs() > 1e-9 * k.abs().max(1.0) {
            return bad("conductivity is not the mean of runs after the first");
        }
        Ok(())
    }
}

/// Body of request-level (non-200) replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: String,
    pub reason: String,
}

impl From<&ProtocolError> for ErrorBody {
    fn from(e: &ProtocolError) -> Self {
        ErrorBody { status: e.status_code_name().to_string(), reason: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub measurements: u64,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    request: ExperimentRequest,
    response: ExperimentResponse,
}

/// Idempotent front end of a [`LabState`].
#[derive(Debug)]
pub struct Instrument {
    lab: LabState,
    cache: HashMap<String, BTreeMap<u64, CacheEntry>>,
    cache_per_campaign: usize,
}

impl Instrument {
    pub fn new(lab: LabState) -> Self {
        Self::with_cache_limit(lab, DEFAULT_CACHE_PER_CAMPAIGN)
    }

    pub fn with_cache_limit(lab: LabState, cache_per_campaign: usize) -> Self {
        Instrument { lab, cache: HashMap::new(), cache_per_campaign: cache_per_campaign.max(1) }
    }

    pub fn lab(&self) -> &LabState {
        &self.lab
    }

    pub fn status(&self) -> LabStatus {
        self.lab.status()
    }

    /// Executes a request at most once per (campaign_id, experiment_id).
    /// Measurement failures are reported in the response, not as errors.
    pub fn handle(&mut self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
        req.validate()?;
        if let Some(hit) = self.cache.get(&req.campaign_id).and_then(|c| c.get(&req.experiment_id)) {
            if hit.request != *req {
                return Err(ProtocolError::Conflict {
                    campaign_id: req.campaign_id.clone(),
                    experiment_id: req.experiment_id,
                });
            }
            return Ok(hit.response.clone());
        }

        let start = self.lab.clock_s();
        let response = match run_measurement(&req.composition, &mut self.lab, req.replicates) {
            Ok(rec) => {
                rinse(&mut self.lab);
                ExperimentResponse {
                    experiment_id: req.experiment_id,
                    status: MeasurementStatus::Ok,
                    conductivity_ms_cm: Some(rec.conductivity),
                    density_g_ml: Some(rec.density_g_ml),
                    temperature_c: Some(rec.temperature_c),
                    runs: rec.runs,
                    duration_s: self.lab.clock_s() - start,
                    reason: None,
                }
            }
            Err(e) => {
                let status = match e {
                    LabError::InfeasibleDose(_) => MeasurementStatus::InfeasibleDose,
                    LabError::InventoryExhausted(_) => MeasurementStatus::InventoryExhausted,
                    LabError::Instrument(_) => MeasurementStatus::InstrumentFault,
                    LabError::Composition(_) | LabError::Replicates(_) => {
                        return Err(ProtocolError::InvalidRequest(e.to_string()));
                    }
                };
                ExperimentResponse::failure(req.experiment_id, status, e.to_string(), self.lab.clock_s() - start)
            }
        };

        let campaign = self.cache.entry(req.campaign_id.clone()).or_default();
        campaign.insert(req.experiment_id, CacheEntry { request: req.clone(), response: response.clone() });
        while campaign.len() > self.cache_per_campaign {
            campaign.pop_first();
        }
        Ok(response)
    }
}

/// Anything that can carry requests to an instrument.
pub trait Transport: Send + Sync {
    fn submit(&self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError>;
    fn status(&self) -> Result<LabStatus, ProtocolError>;
}

/// In-process transport that still round-trips every message through JSON.
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    instrument: Arc<Mutex<Instrument>>,
}

impl LoopbackTransport {
    pub fn new(instrument: Instrument) -> Self {
        LoopbackTransport { instrument: Arc::new(Mutex::new(instrument)) }
    }

    pub fn instrument(&self) -> Arc<Mutex<Instrument>> {
        Arc::clone(&self.instrument)
    }
}

fn reencode<T: Serialize + for<'de> Deserialize<'de>>(v: &T) -> Result<T, ProtocolError> {
    let bytes = serde_json::to_vec(v).map_err(|e| ProtocolError::Decode(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| ProtocolError::Decode(e.to_string()))
}

impl Transport for LoopbackTransport {
    fn submit(&self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
        let wire = reencode(req)?;
        let response = self.instrument.lock().expect("instrument lock poisoned").handle(&wire)?;
        let response = reencode(&response)?;
        response.validate()?;
        Ok(response)
    }

    fn status(&self) -> Result<LabStatus, ProtocolError> {
        reencode(&self.instrument.lock().expect("instrument lock poisoned").status())
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn submit(&self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
        (**self).submit(req)
    }

    fn status(&self) -> Result<LabStatus, ProtocolError> {
        (**self).status()
    }
}

pub fn submit_experiment<T: Transport + ?Sized>(client: &T, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
    client.submit(req)
}
