//! Completion backends.
//!
//! The wire contract is deliberately small: a prompt plus decoding knobs in,
//! generated text plus a finish reason out. [`HttpBackend`] speaks it over
//! JSON/HTTP (plain or OpenAI-style `choices` responses); [`MockBackend`] is
//! a seeded in-process stand-in with injectable failures.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::FinishReason;
use crate::synth::{self, FailureMix};
use crate::tokenize::tokenize;
use crate::types::Speaker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub nucleus_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Permanent(String),
    #[error("authentication failed: {0}")]
    Auth(String),
}

pub trait CompletionBackend: Send + Sync {
    fn label(&self) -> String;
    fn complete(
        &self,
        request: &CompletionRequest,
    ) -> std::result::Result<CompletionResponse, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn label(&self) -> String {
        (**self).label()
    }

    fn complete(
        &self,
        request: &CompletionRequest,
    ) -> std::result::Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (0-based): base * 2^attempt, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

/// Runs `op`, retrying transient failures with exponential backoff.
/// Permanent and auth failures return immediately.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> std::result::Result<T, BackendError>,
) -> std::result::Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(BackendError::Transient(msg)) if attempt < policy.max_retries => {
                log::debug!("retrying after transient failure ({msg})");
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(BackendError::Transient(msg)) => {
                return Err(BackendError::Permanent(format!(
                    "gave up after {} attempts: {msg}",
                    attempt + 1
                )))
            }
            other => return other,
        }
    }
}

/// Where and how to reach a backend. `endpoint` is an HTTP(S) URL or one of
/// `mock`, `mock:clean`, `mock:prose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendDescriptor {
    pub endpoint: String,
    pub auth_token_env: Option<String>,
    pub model_label: String,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub mock: MockConfig,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        BackendDescriptor {
            endpoint: "mock".into(),
            auth_token_env: None,
            model_label: "mock".into(),
            request_timeout_secs: 120.0,
            max_retries: 3,
            mock: MockConfig::default(),
        }
    }
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub fn problems(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !self.is_mock()
            && !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://"))
        {
            out.push(format!(
                "{field}.endpoint: expected an http(s) URL or `mock`, got `{}`",
                self.endpoint
            ));
        }
        if !(self.request_timeout_secs > 0.0) {
            out.push(format!("{field}.request_timeout_secs: must be positive"));
        }
        out
    }

    fn is_mock(&self) -> bool {
        self.endpoint == "mock" || self.endpoint.starts_with("mock:")
    }

    pub fn auth_token(&self) -> Option<String> {
        self.auth_token_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty())
    }

    pub fn build(&self) -> Result<Box<dyn CompletionBackend>> {
        if self.is_mock() {
            let mut cfg = self.mock.clone();
            match self.endpoint.as_str() {
                "mock" => {}
                "mock:clean" => cfg.mix = FailureMix::clean(),
                "mock:prose" => cfg.prose = true,
                other => return Err(Error::Config(format!("unknown mock profile `{other}`"))),
            }
            return Ok(Box::new(
                MockBackend::new(cfg).with_label(&self.model_label),
            ));
        }
        if let Some(var) = &self.auth_token_env {
            if self.auth_token().is_none() {
                return Err(Error::Auth(format!(
                    "environment variable `{var}` is not set"
                )));
            }
        }
        Ok(Box::new(HttpBackend::new(self)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub mix: FailureMix,
    /// Emit unprefixed prose instead of dialogues.
    pub prose: bool,
    /// Probability that a single chat reply says goodbye.
    pub bye_probability: f64,
    pub latency_ms: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            mix: FailureMix::default(),
            prose: false,
            bye_probability: 0.04,
            latency_ms: 0,
        }
    }
}

/// Deterministic backend: the output is a pure function of the request
/// (prompt, seed, limits), never of call order or thread.
#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    label: String,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        MockBackend {
            config,
            label: "mock".into(),
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }
}

impl CompletionBackend for MockBackend {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn complete(
        &self,
        req: &CompletionRequest,
    ) -> std::result::Result<CompletionResponse, BackendError> {
        if self.config.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.config.latency_ms));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(req.seed ^ fnv1a64(req.prompt.as_bytes())));

        if req.stop.iter().any(|s| s == "\n") {
            // single-turn reply; the role comes from the prompt's last line
            let speaker = if req.prompt.trim_end().ends_with("Human:") {
                Speaker::Seeker
            } else {
                Speaker::Supporter
            };
            let text = if rng.random_bool(self.config.bye_probability.clamp(0.0, 1.0)) {
                "Thanks for talking, bye.".to_string()
            } else {
                synth::reply_line(&mut rng, speaker)
            };
            return Ok(CompletionResponse {
                text: format!(" {text}"),
                finish_reason: FinishReason::Eos,
            });
        }

        let (text, finish) = if self.config.prose {
            (format!(" {}", synth::prose(&mut rng)), FinishReason::Eos)
        } else {
            let kind = self.config.mix.draw(&mut rng);
            synth::planted_continuation(&mut rng, kind)
        };
        Ok(cap_tokens(text, finish, req.max_new_tokens as usize))
    }
}

/// Truncates to roughly `cap` word tokens, reporting a length stop.
fn cap_tokens(text: String, finish: FinishReason, cap: usize) -> CompletionResponse {
    if tokenize(&text).len() <= cap {
        return CompletionResponse {
            text,
            finish_reason: finish,
        };
    }
    let mut seen = 0;
    let mut end = text.len();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            seen += 1;
            if seen > cap {
                end = i;
                break;
            }
        }
    }
    CompletionResponse {
        text: text[..end].trim_end().to_string(),
        finish_reason: FinishReason::LengthCap,
    }
}

/// Replays canned replies in order; handy for scripting conversations.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<std::result::Result<CompletionResponse, BackendError>>>,
    label: String,
}

impl ScriptedBackend {
    pub fn new(label: &str) -> Self {
        ScriptedBackend {
            replies: Mutex::new(VecDeque::new()),
            label: label.to_string(),
        }
    }

    pub fn reply(self, text: &str) -> Self {
        self.push(Ok(CompletionResponse {
            text: text.to_string(),
            finish_reason: FinishReason::Eos,
        }))
    }

    pub fn fail(self, err: BackendError) -> Self {
        self.push(Err(err))
    }

    fn push(self, r: std::result::Result<CompletionResponse, BackendError>) -> Self {
        self.replies.lock().unwrap().push_back(r);
        self
    }
}

impl CompletionBackend for ScriptedBackend {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn complete(
        &self,
        _req: &CompletionRequest,
    ) -> std::result::Result<CompletionResponse, BackendError> {
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Permanent("script exhausted".into())))
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    top_p: f64,
    repetition_penalty: f64,
    max_tokens: u32,
    seed: u64,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    choices: Vec<WireChoice>,
}

impl HttpBackend {
    pub fn new(desc: &BackendDescriptor) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(desc.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            endpoint: desc.endpoint.clone(),
            model: desc.model_label.clone(),
            token: desc.auth_token(),
        }
    }
}

pub(crate) fn classify_status(status: u16, body: &str) -> BackendError {
    let msg = format!(
        "HTTP {status}: {}",
        body.chars().take(200).collect::<String>()
    );
    match status {
        401 | 403 => BackendError::Auth(msg),
        408 | 429 | 500..=599 => BackendError::Transient(msg),
        _ => BackendError::Permanent(msg),
    }
}

pub(crate) fn finish_from_wire(reason: Option<&str>) -> FinishReason {
    match reason {
        None | Some("stop") | Some("eos") | Some("end_turn") | Some("stop_sequence") => {
            FinishReason::Eos
        }
        Some(_) => FinishReason::LengthCap,
    }
}

impl CompletionBackend for HttpBackend {
    fn label(&self) -> String {
        self.model.clone()
    }

    fn complete(
        &self,
        req: &CompletionRequest,
    ) -> std::result::Result<CompletionResponse, BackendError> {
        let body = WireRequest {
            model: &self.model,
            prompt: &req.prompt,
            top_p: req.nucleus_p,
            repetition_penalty: req.repetition_penalty,
            max_tokens: req.max_new_tokens,
            seed: req.seed,
            stop: &req.stop,
        };
        let mut call = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status != 200 {
            return Err(classify_status(status, &text));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Permanent(format!("bad response body: {e}")))?;
        let (text, reason) = match (wire.text, wire.choices.into_iter().next()) {
            (Some(t), _) => (t, wire.finish_reason),
            (None, Some(c)) => (c.text, c.finish_reason.or(wire.finish_reason)),
            (None, None) => return Err(BackendError::Permanent("response has no text".into())),
        };
        Ok(CompletionResponse {
            text,
            finish_reason: finish_from_wire(reason.as_deref()),
        })
    }
}

/// Stable 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-request sampling seed derived from the run seed and the job key.
pub fn request_seed(run_seed: u64, key: &str, n: u32) -> u64 {
    mix64(run_seed ^ mix64(fnv1a64(key.as_bytes()) ^ n as u64))
}
