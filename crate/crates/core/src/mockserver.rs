//! Local HTTP stand-in for the completion and toxicity services.
//!
//! `POST /v1/completions` takes the same JSON the HTTP backend sends and
//! answers with the in-process mock's output, so a run against the server
//! matches a run against [`MockBackend`] byte for byte. `POST /v1/toxicity`
//! answers in the detector's response shape.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;

use crate::backend::{CompletionBackend, CompletionRequest, MockBackend, MockConfig};
use crate::error::{Error, Result};
use crate::prompt::FinishReason;
use crate::safety::{Attribute, MockScorer, ToxicityScorer};

#[derive(Debug, Clone)]
pub struct MockServerConfig {
    pub completion: MockConfig,
    pub toxicity: MockScorer,
    /// When set, requests without `Authorization: Bearer <token>` get 401.
    pub required_token: Option<String>,
    /// Answer every n-th request with 503.
    pub transient_every: Option<u64>,
}

impl Default for MockServerConfig {
    fn default() -> Self {
        MockServerConfig {
            completion: MockConfig::default(),
            toxicity: MockScorer::Hashed,
            required_token: None,
            transient_every: None,
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    prompt: String,
    #[serde(default = "one")]
    top_p: f64,
    #[serde(default = "one")]
    repetition_penalty: f64,
    #[serde(default = "max_tokens")]
    max_tokens: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    stop: Vec<String>,
}

fn one() -> f64 {
    1.0
}

fn max_tokens() -> u32 {
    1500
}

#[derive(Deserialize)]
struct ToxicityBody {
    comment: Comment,
    #[serde(rename = "requestedAttributes", default)]
    requested: std::collections::BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct Comment {
    text: String,
}

pub struct MockServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    requests: Arc<AtomicU64>,
}

impl MockServer {
    /// Binds (`127.0.0.1:0` picks a free port) and serves on a background thread.
    pub fn start(bind: &str, config: MockServerConfig) -> Result<MockServer> {
        let server = tiny_http::Server::http(bind)
            .map_err(|e| Error::Backend(format!("cannot bind {bind}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Backend("mock server is not on an IP socket".into()))?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicU64::new(0));
        let handle = {
            let (server, requests) = (server.clone(), requests.clone());
            std::thread::spawn(move || serve(&server, &config, &requests))
        };
        Ok(MockServer {
            addr,
            server,
            handle: Some(handle),
            requests,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn completions_url(&self) -> String {
        self.url("/v1/completions")
    }

    pub fn toxicity_url(&self) -> String {
        self.url("/v1/toxicity")
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(server: &tiny_http::Server, config: &MockServerConfig, requests: &AtomicU64) {
    let backend = MockBackend::new(config.completion.clone());
    for mut req in server.incoming_requests() {
        let n = requests.fetch_add(1, Ordering::Relaxed) + 1;
        let mut body = String::new();
        let (status, payload) = if req.as_reader().read_to_string(&mut body).is_err() {
            (400, serde_json::json!({"error": "unreadable body"}))
        } else if !authorized(&req, config) {
            (
                401,
                serde_json::json!({"error": "missing or invalid bearer token"}),
            )
        } else if config.transient_every.is_some_and(|k| k > 0 && n % k == 0) {
            (503, serde_json::json!({"error": "try again"}))
        } else {
            route(req.method(), req.url(), &body, &backend, &config.toxicity)
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
            .expect("static header");
        let resp = tiny_http::Response::from_string(payload.to_string())
            .with_status_code(status)
            .with_header(header);
        if let Err(e) = req.respond(resp) {
            log::debug!("mock server: failed to respond: {e}");
        }
    }
}

fn authorized(req: &tiny_http::Request, config: &MockServerConfig) -> bool {
    let Some(token) = &config.required_token else {
        return true;
    };
    let expected = format!("Bearer {token}");
    req.headers()
        .iter()
        .any(|h| h.field.equiv("Authorization") && h.value.as_str() == expected)
}

fn route(
    method: &tiny_http::Method,
    url: &str,
    body: &str,
    backend: &MockBackend,
    scorer: &MockScorer,
) -> (u16, serde_json::Value) {
    let bad = |e: serde_json::Error| (400, serde_json::json!({"error": e.to_string()}));
    match (method, url) {
        (tiny_http::Method::Post, "/v1/completions") => {
            let b: CompletionBody = match serde_json::from_str(body) {
                Ok(b) => b,
                Err(e) => return bad(e),
            };
            let req = CompletionRequest {
                prompt: b.prompt,
                nucleus_p: b.top_p,
                repetition_penalty: b.repetition_penalty,
                max_new_tokens: b.max_tokens,
                seed: b.seed,
                stop: b.stop,
            };
            match backend.complete(&req) {
                Ok(r) => {
                    let reason = match r.finish_reason {
                        FinishReason::LengthCap => "length",
                        _ => "stop",
                    };
                    (
                        200,
                        serde_json::json!({"text": r.text, "finish_reason": reason}),
                    )
                }
                Err(e) => (500, serde_json::json!({"error": e.to_string()})),
            }
        }
        (tiny_http::Method::Post, "/v1/toxicity") => {
            let b: ToxicityBody = match serde_json::from_str(body) {
                Ok(b) => b,
                Err(e) => return bad(e),
            };
            let attrs: Vec<Attribute> = b
                .requested
                .keys()
                .filter_map(|k| Attribute::from_wire(k))
                .collect();
            let scores = scorer.score(&b.comment.text, &attrs).unwrap_or_default();
            let out: serde_json::Map<String, serde_json::Value> = scores
                .into_iter()
                .map(|(a, v)| {
                    (
                        a.wire_name().to_string(),
                        serde_json::json!({"summaryScore": {"value": v}}),
                    )
                })
                .collect();
            (200, serde_json::json!({"attributeScores": out}))
        }
        _ => (
            404,
            serde_json::json!({"error": format!("no route for {method} {url}")}),
        ),
    }
}
