//! Blocking HTTP client with idempotent retries.

use std::time::Duration;

use serde::de::DeserializeOwned;
use ureq::Agent;

use super::{ErrorBody, ExperimentRequest, ExperimentResponse, ProtocolError, Transport};
use crate::virtual_lab::LabStatus;

#[derive(Debug, Clone)]
pub struct HttpTransport {
    base_url: String,
    agent: Agent,
    attempts: usize,
    backoff: Duration,
}

impl HttpTransport {
    /// `attempts` counts the first try; retries reuse the same experiment_id,
    /// so the server executes each experiment at most once.
    pub fn new(base_url: impl Into<String>, timeout: Duration, attempts: usize) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            attempts: attempts.max(1),
            backoff: Duration::from_millis(50),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn decode<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T, ProtocolError> {
        let code = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProtocolError::Decode(e.to_string()))?;
        if code.is_success() {
            serde_json::from_str(&text).map_err(|e| ProtocolError::Decode(e.to_string()))
        } else {
            match serde_json::from_str::<ErrorBody>(&text) {
                Ok(b) => Err(ProtocolError::Rejected { status: b.status, reason: b.reason }),
                Err(_) => Err(ProtocolError::Rejected { status: code.as_u16().to_string(), reason: text }),
            }
        }
    }

    /// Retries connection-level failures and 5xx replies.
    fn with_retries<T: DeserializeOwned>(
        &self,
        call: impl Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ProtocolError> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * attempt as u32);
            }
            match call() {
                Ok(resp) if resp.status().is_server_error() => last = format!("HTTP {}", resp.status()),
                Ok(resp) => return Self::decode(resp),
                Err(e) => last = e.to_string(),
            }
        }
        Err(ProtocolError::Transport { attempts: self.attempts, message: last })
    }
}

impl Transport for HttpTransport {
    fn submit(&self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
        let url = format!("{}/experiment", self.base_url);
        let resp: ExperimentResponse = self.with_retries(|| self.agent.post(&url).send_json(req))?;
        resp.validate()?;
        Ok(resp)
    }

    fn status(&self) -> Result<LabStatus, ProtocolError> {
        let url = format!("{}/status", self.base_url);
        self.with_retries(|| self.agent.get(&url).call())
    }
}
