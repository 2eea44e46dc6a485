//! Heuristic postprocessing of raw completions.
//!
//! Seven rules run in a fixed order and a removed item is attributed to the
//! first rule it fails:
//!
//! | rule                    | removes when                                        |
//! |-------------------------|-----------------------------------------------------|
//! | non-dialogue            | a generated line lacks a role prefix                |
//! | unfinished generation   | the backend did not report end-of-sequence          |
//! | prompt word leakage     | an utterance contains `Human` or `AI`               |
//! | unbalanced utterances   | `max(nS, nP) > balance_ratio * min(nS, nP)`         |
//! | consecutive utterances  | a same-speaker run is longer than `max_consecutive` |
//! | total utterances        | `n <= min_total_utterances_exclusive`               |
//! | utterance length        | a role's mean length or any single length is out of bounds |
//!
//! The seed post counts as the first seeker utterance everywhere.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::prompt::{parse_completion, ParseFailure, ParseOutcome, PromptTemplate, RawCompletion};
use crate::types::{Dialogue, SeedPost, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub balance_ratio: f64,
    pub max_consecutive: usize,
    pub min_total_utterances_exclusive: usize,
    pub seeker_avg_len: LengthBounds,
    pub supporter_avg_len: LengthBounds,
    pub max_utterance_len: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            balance_ratio: 2.5,
            max_consecutive: 3,
            min_total_utterances_exclusive: 10,
            seeker_avg_len: LengthBounds {
                min: 6.0,
                max: 40.0,
            },
            supporter_avg_len: LengthBounds {
                min: 8.0,
                max: 40.0,
            },
            max_utterance_len: 80,
        }
    }
}

impl FilterThresholds {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.balance_ratio.is_finite() && self.balance_ratio >= 1.0) {
            out.push(format!(
                "filters.balance_ratio: must be >= 1, got {}",
                self.balance_ratio
            ));
        }
        if self.max_consecutive == 0 {
            out.push("filters.max_consecutive: must be positive".to_string());
        }
        for (name, b) in [
            ("seeker_avg_len", self.seeker_avg_len),
            ("supporter_avg_len", self.supporter_avg_len),
        ] {
            if !(b.min >= 0.0 && b.min <= b.max) {
                out.push(format!(
                    "filters.{name}: need 0 <= min <= max, got [{}, {}]",
                    b.min, b.max
                ));
            }
        }
        if self.max_utterance_len == 0 {
            out.push("filters.max_utterance_len: must be positive".to_string());
        }
        out
    }

    fn avg_bounds(&self, speaker: Speaker) -> LengthBounds {
        match speaker {
            Speaker::Seeker => self.seeker_avg_len,
            Speaker::Supporter => self.supporter_avg_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    NonDialogue,
    UnfinishedGeneration,
    PromptWordLeakage,
    UnbalancedUtterances,
    ConsecutiveUtterances,
    TotalUtterances,
    UtteranceLength,
}

impl FilterRule {
    pub const ALL: [FilterRule; 7] = [
        FilterRule::NonDialogue,
        FilterRule::UnfinishedGeneration,
        FilterRule::PromptWordLeakage,
        FilterRule::UnbalancedUtterances,
        FilterRule::ConsecutiveUtterances,
        FilterRule::TotalUtterances,
        FilterRule::UtteranceLength,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FilterRule::NonDialogue => "Non-dialogue",
            FilterRule::UnfinishedGeneration => "Unfinished Generation",
            FilterRule::PromptWordLeakage => "Prompt Word Leakage",
            FilterRule::UnbalancedUtterances => "Unbalanced # Utterances",
            FilterRule::ConsecutiveUtterances => "Consecutive # Utterances",
            FilterRule::TotalUtterances => "Total # Utterances",
            FilterRule::UtteranceLength => "Utterance Length",
        }
    }
}

impl From<ParseFailure> for FilterRule {
    fn from(f: ParseFailure) -> Self {
        match f {
            ParseFailure::NonDialogue => FilterRule::NonDialogue,
            ParseFailure::UnfinishedGeneration => FilterRule::UnfinishedGeneration,
            ParseFailure::PromptWordLeakage => FilterRule::PromptWordLeakage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Retained,
    Removed(FilterRule),
}

pub fn check_self_reinforcement(
    d: &Dialogue,
    t: &FilterThresholds,
) -> std::result::Result<(), FilterRule> {
    let (n_s, n_p) = (d.count(Speaker::Seeker), d.count(Speaker::Supporter));
    let (hi, lo) = (n_s.max(n_p) as f64, n_s.min(n_p) as f64);
    if hi > t.balance_ratio * lo {
        return Err(FilterRule::UnbalancedUtterances);
    }
    if longest_run(d) > t.max_consecutive {
        return Err(FilterRule::ConsecutiveUtterances);
    }
    Ok(())
}

fn longest_run(d: &Dialogue) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for u in d.utterances() {
        run = if prev == Some(u.speaker()) {
            run + 1
        } else {
            1
        };
        prev = Some(u.speaker());
        best = best.max(run);
    }
    best
}

pub fn check_distribution(
    d: &Dialogue,
    t: &FilterThresholds,
) -> std::result::Result<(), FilterRule> {
    if d.len() <= t.min_total_utterances_exclusive {
        return Err(FilterRule::TotalUtterances);
    }
    let mut sums = [0usize; 2];
    let mut counts = [0usize; 2];
    for u in d.utterances() {
        let len = u.token_len();
        if len > t.max_utterance_len {
            return Err(FilterRule::UtteranceLength);
        }
        let i = u.speaker() as usize;
        sums[i] += len;
        counts[i] += 1;
    }
    for speaker in Speaker::ALL {
        let i = speaker as usize;
        // a role with no utterances has no mean to bound; the balance rule
        // already removes such dialogues under default thresholds
        if counts[i] == 0 {
            continue;
        }
        let mean = sums[i] as f64 / counts[i] as f64;
        let b = t.avg_bounds(speaker);
        if mean < b.min || mean > b.max {
            return Err(FilterRule::UtteranceLength);
        }
    }
    Ok(())
}

/// All dialogue-level checks in rule order.
pub fn check_dialogue(d: &Dialogue, t: &FilterThresholds) -> FilterVerdict {
    match check_self_reinforcement(d, t).and_then(|()| check_distribution(d, t)) {
        Ok(()) => FilterVerdict::Retained,
        Err(rule) => FilterVerdict::Removed(rule),
    }
}

/// Parses and checks one completion.
pub fn evaluate(
    post: &SeedPost,
    completion: &RawCompletion,
    template: &PromptTemplate,
    t: &FilterThresholds,
) -> (FilterVerdict, Option<Dialogue>) {
    match parse_completion(post, completion, template) {
        ParseOutcome::Failure { kind, .. } => (FilterVerdict::Removed(kind.into()), None),
        ParseOutcome::Success(d) => match check_dialogue(&d, t) {
            FilterVerdict::Retained => (FilterVerdict::Retained, Some(d)),
            removed => (removed, None),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub removed_by_rule: BTreeMap<FilterRule, usize>,
    pub retained: usize,
    pub retention_ratio: f64,
    /// Completions whose seed id matched no post; not part of `total`.
    pub input_errors: usize,
}

impl FilterReport {
    pub fn record(&mut self, verdict: FilterVerdict) {
        self.total += 1;
        match verdict {
            FilterVerdict::Retained => self.retained += 1,
            FilterVerdict::Removed(rule) => *self.removed_by_rule.entry(rule).or_default() += 1,
        }
        self.refresh_ratio();
    }

    pub fn merge(mut self, other: FilterReport) -> FilterReport {
        self.total += other.total;
        self.retained += other.retained;
        self.input_errors += other.input_errors;
        for (rule, n) in other.removed_by_rule {
            *self.removed_by_rule.entry(rule).or_default() += n;
        }
        self.refresh_ratio();
        self
    }

    fn refresh_ratio(&mut self) {
        self.retention_ratio = if self.total == 0 {
            0.0
        } else {
            self.retained as f64 / self.total as f64
        };
    }

    pub fn removed(&self, rule: FilterRule) -> usize {
        self.removed_by_rule.get(&rule).copied().unwrap_or(0)
    }

    pub fn is_consistent(&self) -> bool {
        self.retained + self.removed_by_rule.values().sum::<usize>() == self.total
    }

    /// Aligned plain-text table, one row per rule plus the retention row.
    pub fn to_table(&self) -> String {
        let pct = |n: usize| {
            if self.total == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.total as f64
            }
        };
        let groups: [(&str, &[FilterRule]); 3] = [
            ("Augmentation Failures", &FilterRule::ALL[0..3]),
            ("Harmful Self-reinforcement", &FilterRule::ALL[3..5]),
            ("Distributional Gaps", &FilterRule::ALL[5..7]),
        ];
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<32} {:>8} {:>11}",
            "Heuristics", "Count", "Proportion"
        );
        let _ = writeln!(out, "{}", "-".repeat(53));
        for (group, rules) in groups {
            let _ = writeln!(out, "{group}");
            for &rule in rules {
                let n = self.removed(rule);
                let _ = writeln!(out, "    {:<28} {:>8} {:>10.1}%", rule.label(), n, pct(n));
            }
        }
        let _ = writeln!(out, "{}", "-".repeat(53));
        let _ = writeln!(
            out,
            "{:<32} {:>8} {:>10.1}%",
            "Final Retention",
            self.retained,
            pct(self.retained)
        );
        let _ = writeln!(out, "{:<32} {:>8}", "Total", self.total);
        if self.input_errors > 0 {
            let _ = writeln!(
                out,
                "{:<32} {:>8}",
                "Skipped (unknown seed id)", self.input_errors
            );
        }
        out
    }
}

pub struct PostprocessOutput {
    pub retained: Vec<Dialogue>,
    pub verdicts: Vec<Option<FilterVerdict>>,
    pub report: FilterReport,
}

/// Parses and filters a batch of completions. `verdicts[i]` is `None` when
/// completion `i` referenced an unknown seed post.
pub fn postprocess_corpus(
    completions: &[RawCompletion],
    posts: &[SeedPost],
    template: &PromptTemplate,
    t: &FilterThresholds,
    exec: Exec,
) -> PostprocessOutput {
    let by_id: HashMap<&str, &SeedPost> = posts.iter().map(|p| (p.id.as_str(), p)).collect();
    let results = exec.map(completions, |c| {
        by_id
            .get(c.seed_post_id.as_str())
            .map(|post| evaluate(post, c, template, t))
    });

    let mut report = FilterReport::default();
    let mut retained = Vec::new();
    let mut verdicts = Vec::with_capacity(results.len());
    for r in results {
        match r {
            None => {
                report.input_errors += 1;
                verdicts.push(None);
            }
            Some((verdict, dialogue)) => {
                report.record(verdict);
                verdicts.push(Some(verdict));
                if let Some(mut d) = dialogue {
                    d.metadata.insert(
                        "filter_trail".into(),
                        "parse=pass;self_reinforcement=pass;distribution=pass".into(),
                    );
                    retained.push(d);
                }
            }
        }
    }
    PostprocessOutput {
        retained,
        verdicts,
        report,
    }
}

pub fn validate_thresholds(t: &FilterThresholds) -> Result<()> {
    match t.problems().as_slice() {
        [] => Ok(()),
        p => Err(Error::Config(p.join("; "))),
    }
}
