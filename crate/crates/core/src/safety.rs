//! Per-utterance toxicity scoring against a detector service.
//!
//! Every utterance is sent once, without conversational context. Scores are
//! averaged per attribute over the utterances that returned that attribute.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::{
    classify_status, fnv1a64, mix64, with_retry, BackendDescriptor, BackendError, RetryPolicy,
};
use crate::error::{Error, Result};
use crate::types::Dialogue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Attribute {
    Toxicity,
    SevereToxicity,
    IdentityAttack,
    Insult,
    Profanity,
    Threat,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Toxicity,
        Attribute::SevereToxicity,
        Attribute::IdentityAttack,
        Attribute::Insult,
        Attribute::Profanity,
        Attribute::Threat,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            Attribute::Toxicity => "TOXICITY",
            Attribute::SevereToxicity => "SEVERE_TOXICITY",
            Attribute::IdentityAttack => "IDENTITY_ATTACK",
            Attribute::Insult => "INSULT",
            Attribute::Profanity => "PROFANITY",
            Attribute::Threat => "THREAT",
        }
    }

    pub fn from_wire(name: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.wire_name() == name)
    }
}

pub type Scores = BTreeMap<Attribute, f64>;

pub trait ToxicityScorer: Send + Sync {
    fn label(&self) -> String;
    /// Scores for whichever requested attributes the detector returned.
    fn score(
        &self,
        text: &str,
        attributes: &[Attribute],
    ) -> std::result::Result<Scores, BackendError>;
}

impl<S: ToxicityScorer + ?Sized> ToxicityScorer for Box<S> {
    fn label(&self) -> String {
        (**self).label()
    }

    fn score(
        &self,
        text: &str,
        attributes: &[Attribute],
    ) -> std::result::Result<Scores, BackendError> {
        (**self).score(text, attributes)
    }
}

/// Deterministic stand-in detector.
#[derive(Debug, Clone, PartialEq)]
pub enum MockScorer {
    /// Same score for every attribute of every text.
    Constant(f64),
    /// Low pseudo-scores derived from a hash of the text and attribute.
    Hashed,
}

impl ToxicityScorer for MockScorer {
    fn label(&self) -> String {
        match self {
            MockScorer::Constant(v) => format!("mock-constant-{v}"),
            MockScorer::Hashed => "mock-hashed".into(),
        }
    }

    fn score(
        &self,
        text: &str,
        attributes: &[Attribute],
    ) -> std::result::Result<Scores, BackendError> {
        Ok(attributes
            .iter()
            .map(|&a| {
                let v = match self {
                    MockScorer::Constant(v) => *v,
                    MockScorer::Hashed => {
                        let h = mix64(fnv1a64(text.as_bytes()) ^ (a as u64 + 1));
                        (h >> 11) as f64 / (1u64 << 53) as f64 * 0.25
                    }
                };
                (a, v)
            })
            .collect())
    }
}

/// Scorer backed by a closure; handy for scripted tests.
pub struct FnScorer<F>(pub F);

impl<F> ToxicityScorer for FnScorer<F>
where
    F: Fn(&str, &[Attribute]) -> std::result::Result<Scores, BackendError> + Send + Sync,
{
    fn label(&self) -> String {
        "fn".into()
    }

    fn score(
        &self,
        text: &str,
        attributes: &[Attribute],
    ) -> std::result::Result<Scores, BackendError> {
        (self.0)(text, attributes)
    }
}

/// Detector client speaking a Perspective-style JSON protocol:
/// request `{"comment":{"text":..},"requestedAttributes":{"TOXICITY":{},..}}`,
/// response `{"attributeScores":{"TOXICITY":{"summaryScore":{"value":0.1}},..}}`.
pub struct HttpScorer {
    agent: ureq::Agent,
    endpoint: String,
    label: String,
    token: Option<String>,
}

impl HttpScorer {
    pub fn new(desc: &BackendDescriptor) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(desc.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpScorer {
            agent,
            endpoint: desc.endpoint.clone(),
            label: desc.model_label.clone(),
            token: desc.auth_token(),
        }
    }
}

#[derive(Deserialize)]
struct WireSummary {
    value: f64,
}

#[derive(Deserialize)]
struct WireAttribute {
    #[serde(rename = "summaryScore")]
    summary_score: WireSummary,
}

#[derive(Deserialize)]
struct WireScores {
    #[serde(rename = "attributeScores", default)]
    attribute_scores: BTreeMap<String, WireAttribute>,
}

pub(crate) fn score_request_body(text: &str, attributes: &[Attribute]) -> serde_json::Value {
    let requested: serde_json::Map<String, serde_json::Value> = attributes
        .iter()
        .map(|a| (a.wire_name().to_string(), serde_json::json!({})))
        .collect();
    serde_json::json!({
        "comment": { "text": text },
        "requestedAttributes": requested,
        "doNotStore": true,
    })
}

impl ToxicityScorer for HttpScorer {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn score(
        &self,
        text: &str,
        attributes: &[Attribute],
    ) -> std::result::Result<Scores, BackendError> {
        let mut call = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(score_request_body(text, attributes))
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status != 200 {
            return Err(classify_status(status, &body));
        }
        let wire: WireScores = serde_json::from_str(&body)
            .map_err(|e| BackendError::Permanent(format!("bad response body: {e}")))?;
        Ok(wire
            .attribute_scores
            .into_iter()
            .filter_map(|(k, v)| Attribute::from_wire(&k).map(|a| (a, v.summary_score.value)))
            .collect())
    }
}

/// Builds a scorer: `mock`, `mock:constant:<v>`, or an HTTP(S) endpoint.
pub fn build_scorer(desc: &BackendDescriptor) -> Result<Box<dyn ToxicityScorer>> {
    match desc.endpoint.as_str() {
        "mock" => Ok(Box::new(MockScorer::Hashed)),
        e if e.starts_with("mock:constant:") => {
            let v: f64 = e["mock:constant:".len()..]
                .parse()
                .map_err(|_| Error::Config(format!("bad constant in `{e}`")))?;
            Ok(Box::new(MockScorer::Constant(v)))
        }
        e if e.starts_with("http://") || e.starts_with("https://") => {
            if let Some(var) = &desc.auth_token_env {
                if desc.auth_token().is_none() {
                    return Err(Error::Auth(format!(
                        "environment variable `{var}` is not set"
                    )));
                }
            }
            Ok(Box::new(HttpScorer::new(desc)))
        }
        e => Err(Error::Config(format!("unknown toxicity endpoint `{e}`"))),
    }
}

/// Spaces request starts at least `1 / rate` seconds apart across threads.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    /// `rate <= 0` or non-finite disables limiting.
    pub fn new(rate_per_sec: f64) -> Self {
        let interval = if rate_per_sec > 0.0 && rate_per_sec.is_finite() {
            Duration::from_secs_f64(1.0 / rate_per_sec)
        } else {
            Duration::ZERO
        };
        RateLimiter {
            interval,
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToxicityOptions {
    pub rate_limit_per_sec: f64,
    pub concurrency: usize,
    pub attributes: Vec<Attribute>,
    #[serde(skip)]
    pub retry: RetryPolicy,
}

impl Default for ToxicityOptions {
    fn default() -> Self {
        ToxicityOptions {
            rate_limit_per_sec: 1.0,
            concurrency: 4,
            attributes: Attribute::ALL.to_vec(),
            retry: RetryPolicy::default(),
        }
    }
}

/// One submitted utterance. `scores` is `None` when the request failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub key: String,
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `(key, text)` for every utterance, keyed `<dialogue id>#<index>`.
pub fn utterance_items(corpus: &[Dialogue]) -> Vec<(String, String)> {
    corpus
        .iter()
        .flat_map(|d| {
            d.utterances()
                .iter()
                .enumerate()
                .map(move |(i, u)| (format!("{}#{i}", d.id), u.text().to_string()))
        })
        .collect()
}

/// Scores each item once on up to `concurrency` threads. An auth failure
/// stops all workers and is returned as an error.
pub fn score_items(
    items: &[(String, String)],
    scorer: &dyn ToxicityScorer,
    options: &ToxicityOptions,
) -> Result<Vec<UtteranceScore>> {
    let limiter = RateLimiter::new(options.rate_limit_per_sec);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth: Mutex<Option<String>> = Mutex::new(None);
    let slots: Mutex<Vec<Option<UtteranceScore>>> = Mutex::new(vec![None; items.len()]);
    let workers = options.concurrency.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((key, text)) = items.get(i) else {
                    return;
                };
                let result = with_retry(&options.retry, || {
                    limiter.acquire();
                    scorer.score(text, &options.attributes)
                });
                let outcome = match result {
                    Ok(scores) => UtteranceScore {
                        key: key.clone(),
                        scores: Some(scores),
                        error: None,
                    },
                    Err(BackendError::Auth(msg)) => {
                        abort.store(true, Ordering::Relaxed);
                        auth.lock().unwrap().get_or_insert(msg);
                        return;
                    }
                    Err(e) => UtteranceScore {
                        key: key.clone(),
                        scores: None,
                        error: Some(e.to_string()),
                    },
                };
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    if let Some(msg) = auth.into_inner().unwrap() {
        return Err(Error::Auth(format!(
            "toxicity detector rejected the credentials ({msg}); check the token variable named in the config"
        )));
    }
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect())
}

/// Rescores only the failed entries, leaving successful ones untouched.
pub fn resubmit_failed(
    outcomes: &mut [UtteranceScore],
    items: &[(String, String)],
    scorer: &dyn ToxicityScorer,
    options: &ToxicityOptions,
) -> Result<usize> {
    let texts: BTreeMap<&str, &str> = items
        .iter()
        .map(|(k, t)| (k.as_str(), t.as_str()))
        .collect();
    let retry: Vec<(String, String)> = outcomes
        .iter()
        .filter(|o| o.scores.is_none())
        .filter_map(|o| {
            texts
                .get(o.key.as_str())
                .map(|t| (o.key.clone(), t.to_string()))
        })
        .collect();
    let fresh: BTreeMap<String, UtteranceScore> = score_items(&retry, scorer, options)?
        .into_iter()
        .map(|o| (o.key.clone(), o))
        .collect();
    let mut recovered = 0;
    for o in outcomes.iter_mut().filter(|o| o.scores.is_none()) {
        if let Some(f) = fresh.get(&o.key) {
            recovered += f.scores.is_some() as usize;
            *o = f.clone();
        }
    }
    Ok(recovered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityProfile {
    /// Mean over utterances that returned a valid score for the attribute.
    pub attribute_scores: BTreeMap<Attribute, f64>,
    /// Utterances contributing to each mean.
    pub attribute_counts: BTreeMap<Attribute, u64>,
    /// Scored utterances missing (or returning an out-of-range value for) each attribute.
    pub attribute_failures: BTreeMap<Attribute, u64>,
    pub scored_utterances: u64,
    pub failed_utterances: u64,
    pub scorer: String,
}

impl ToxicityProfile {
    /// Sums each attribute's scores in ascending value order, so the means do
    /// not depend on the order of `outcomes`.
    pub fn from_outcomes(
        outcomes: &[UtteranceScore],
        attributes: &[Attribute],
        scorer: &str,
    ) -> Self {
        let mut values: BTreeMap<Attribute, Vec<f64>> =
            attributes.iter().map(|&a| (a, Vec::new())).collect();
        let mut failures: BTreeMap<Attribute, u64> = attributes.iter().map(|&a| (a, 0)).collect();
        let (mut scored, mut failed) = (0, 0);
        for o in outcomes {
            let Some(scores) = &o.scores else {
                failed += 1;
                continue;
            };
            scored += 1;
            for &a in attributes {
                match scores.get(&a) {
                    Some(v) if (0.0..=1.0).contains(v) => values.get_mut(&a).unwrap().push(*v),
                    _ => *failures.get_mut(&a).unwrap() += 1,
                }
            }
        }
        let mut attribute_scores = BTreeMap::new();
        let mut attribute_counts = BTreeMap::new();
        for (a, mut v) in values {
            v.sort_by(f64::total_cmp);
            attribute_counts.insert(a, v.len() as u64);
            if !v.is_empty() {
                attribute_scores.insert(a, sorted_mean(&v));
            }
        }
        ToxicityProfile {
            attribute_scores,
            attribute_counts,
            attribute_failures: failures,
            scored_utterances: scored,
            failed_utterances: failed,
            scorer: scorer.to_string(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("attribute         mean     n\n");
        for a in self.attribute_counts.keys() {
            let mean = self
                .attribute_scores
                .get(a)
                .map_or("-".to_string(), |m| format!("{m:.4}"));
            out.push_str(&format!(
                "{:<17} {:>6} {:>5}\n",
                a.wire_name(),
                mean,
                self.attribute_counts[a]
            ));
        }
        out.push_str(&format!(
            "scored {} failed {}\n",
            self.scored_utterances, self.failed_utterances
        ));
        out
    }
}

/// Scores every utterance of `corpus` and averages per attribute.
/// Mean of ascending values, taken as the minimum plus the mean offset so a
/// constant input returns that constant exactly.
fn sorted_mean(v: &[f64]) -> f64 {
    let pivot = v[0];
    pivot + v.iter().map(|x| x - pivot).sum::<f64>() / v.len() as f64
}

pub fn assess_toxicity(
    corpus: &[Dialogue],
    scorer: &dyn ToxicityScorer,
    options: &ToxicityOptions,
) -> Result<(ToxicityProfile, Vec<UtteranceScore>)> {
    let items = utterance_items(corpus);
    let outcomes = score_items(&items, scorer, options)?;
    let profile = ToxicityProfile::from_outcomes(&outcomes, &options.attributes, &scorer.label());
    Ok((profile, outcomes))
}
