// SPDX-License-Identifier: MIT OR Apache-2.0

//! Completion service used to generate corrected solutions.
//!
//! The HTTP client posts `{"prompt", "max_tokens", "temperature"}` as JSON to
//! a single endpoint and expects `{"text": ...}` back.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "GENERATOR_ENDPOINT";
pub const API_KEY_ENV: &str = "GENERATOR_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    text: String,
}

pub trait GeneratorClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

type Responder = dyn Fn(&CompletionRequest, u64) -> String + Send + Sync;

/// Deterministic offline client: the reply is a pure function of the
/// request and a seed.
#[derive(Clone)]
pub struct StubClient {
    seed: u64,
    responder: Arc<Responder>,
}

impl StubClient {
    pub fn new<F>(seed: u64, responder: F) -> Self
    where
        F: Fn(&CompletionRequest, u64) -> String + Send + Sync + 'static,
    {
        Self {
            seed,
            responder: Arc::new(responder),
        }
    }

    /// Always replies with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(0, move |_, _| text.clone())
    }

    /// Picks one of `replies` by seed.
    pub fn seeded(seed: u64, replies: Vec<String>) -> Self {
        assert!(!replies.is_empty(), "stub needs at least one reply");
        Self::new(seed, move |_, s| replies[(s % replies.len() as u64) as usize].clone())
    }
}

impl GeneratorClient for StubClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        Ok((self.responder)(request, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl GeneratorConfig {
    /// Environment variables override whatever was configured.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var(ENDPOINT_ENV) {
            if !v.is_empty() {
                self.endpoint = Some(v);
            }
        }
        if let Ok(v) = std::env::var(API_KEY_ENV) {
            if !v.is_empty() {
                self.api_key = Some(v);
            }
        }
        self
    }
}

pub struct HttpClient {
    config: GeneratorConfig,
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let endpoint = config.endpoint.clone().ok_or_else(|| {
            Error::Config(format!("no generator endpoint configured; set {ENDPOINT_ENV}"))
        })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            config,
            endpoint,
            http,
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> std::result::Result<String, (bool, String)> {
        let mut req = self.http.post(&self.endpoint).json(request);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((retryable, format!("endpoint returned {status}")));
        }
        resp.json::<CompletionResponse>()
            .map(|r| r.text)
            .map_err(|e| (false, format!("unexpected response body: {e}")))
    }
}

impl GeneratorClient for HttpClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err((retryable, msg)) => {
                    log::warn!("generator attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                    if attempt < self.config.max_retries {
                        thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
                    }
                }
            }
        }
        Err(Error::Transport(last))
    }
}
