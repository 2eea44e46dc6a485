//! Log-odds ratio with an informative Dirichlet prior.
//!
//! For term `w` with counts `y_a`, `y_b`, corpus totals `n_a`, `n_b` and prior
//! `alpha_w` (summing to `alpha0`):
//!
//! ```text
//! delta_w = ln((y_a + alpha_w) / (n_a + alpha0 - y_a - alpha_w))
//!         - ln((y_b + alpha_w) / (n_b + alpha0 - y_b - alpha_w))
//! var_w   = 1 / (y_a + alpha_w) + 1 / (y_b + alpha_w)
//! z_w     = delta_w / sqrt(var_w)
//! ```
//!
//! Positive `z` marks terms characteristic of corpus A.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::tokenize;
use crate::types::Dialogue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabOptions {
    /// Minimum count over both corpora combined.
    pub min_count: u64,
    /// Keep only tokens with at least one alphanumeric character.
    pub words_only: bool,
    pub stop_words: BTreeSet<String>,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_count: 2,
            words_only: true,
            stop_words: BTreeSet::new(),
        }
    }
}

/// Lowercased term counts of one corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub counts: BTreeMap<String, u64>,
}

impl TermCounts {
    pub fn from_corpus(corpus: &[Dialogue], options: &VocabOptions) -> Self {
        let mut counts = BTreeMap::new();
        for d in corpus {
            for u in d.utterances() {
                for t in tokenize(u.text()) {
                    let t = t.to_lowercase();
                    if options.words_only && !t.chars().any(char::is_alphanumeric) {
                        continue;
                    }
                    if options.stop_words.contains(&t) {
                        continue;
                    }
                    *counts.entry(t).or_insert(0) += 1;
                }
            }
        }
        TermCounts { counts }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, u64)>) -> Self {
        TermCounts {
            counts: pairs.into_iter().map(|(t, n)| (t.to_string(), n)).collect(),
        }
    }

    pub fn get(&self, term: &str) -> u64 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Restricts both count tables to terms whose combined count reaches
/// `min_count`; totals are then taken over that shared vocabulary.
pub fn restrict_vocabulary(
    a: &TermCounts,
    b: &TermCounts,
    min_count: u64,
) -> (TermCounts, TermCounts) {
    let terms: BTreeSet<&String> = a.counts.keys().chain(b.counts.keys()).collect();
    let keep: Vec<&String> = terms
        .into_iter()
        .filter(|t| a.get(t) + b.get(t) >= min_count)
        .collect();
    let restrict = |c: &TermCounts| TermCounts {
        counts: keep
            .iter()
            .filter_map(|t| c.counts.get(*t).map(|n| ((*t).clone(), *n)))
            .collect(),
    };
    (restrict(a), restrict(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    alpha: BTreeMap<String, f64>,
    alpha0: f64,
}

impl DirichletPrior {
    pub fn new(alpha: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((t, a)) = alpha.iter().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "prior for `{t}` must be positive, got {a}"
            )));
        }
        let alpha0 = alpha.values().sum();
        Ok(DirichletPrior { alpha, alpha0 })
    }

    pub fn uniform<'a>(terms: impl IntoIterator<Item = &'a str>, alpha: f64) -> Result<Self> {
        Self::new(terms.into_iter().map(|t| (t.to_string(), alpha)).collect())
    }

    /// `alpha_w` proportional to the term's combined count, scaled so the
    /// prior sums to `alpha0`.
    pub fn informative(a: &TermCounts, b: &TermCounts, alpha0: f64) -> Result<Self> {
        let total = (a.total() + b.total()) as f64;
        if total == 0.0 {
            return Err(Error::EmptyCorpus);
        }
        let terms: BTreeSet<&String> = a.counts.keys().chain(b.counts.keys()).collect();
        Self::new(
            terms
                .into_iter()
                .filter(|t| a.get(t) + b.get(t) > 0)
                .map(|t| (t.clone(), alpha0 * (a.get(t) + b.get(t)) as f64 / total))
                .collect(),
        )
    }

    pub fn alpha(&self, term: &str) -> Option<f64> {
        self.alpha.get(term).copied()
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceEntry {
    pub term: String,
    pub delta: f64,
    pub variance: f64,
    pub z: f64,
    pub count_a: u64,
    pub count_b: u64,
}

impl SalienceEntry {
    fn swapped(&self) -> SalienceEntry {
        SalienceEntry {
            term: self.term.clone(),
            delta: -self.delta,
            variance: self.variance,
            z: -self.z,
            count_a: self.count_b,
            count_b: self.count_a,
        }
    }
}

/// Scores every term of the combined vocabulary, ranked by descending `z`
/// (ties by term).
pub fn log_odds_salience(
    a: &TermCounts,
    b: &TermCounts,
    prior: &DirichletPrior,
) -> Result<Vec<SalienceEntry>> {
    let terms: BTreeSet<&String> = a.counts.keys().chain(b.counts.keys()).collect();
    if terms.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (n_a, n_b) = (a.total() as f64, b.total() as f64);
    let a0 = prior.alpha0();
    let mut out = Vec::with_capacity(terms.len());
    for term in terms {
        let alpha = prior
            .alpha(term)
            .ok_or_else(|| Error::MissingPriorTerm(term.clone()))?;
        let (y_a, y_b) = (a.get(term), b.get(term));
        let (ya, yb) = (y_a as f64, y_b as f64);
        let log_odds = |y: f64, n: f64| ((y + alpha) / (n + a0 - y - alpha)).ln();
        let delta = log_odds(ya, n_a) - log_odds(yb, n_b);
        let variance = 1.0 / (ya + alpha) + 1.0 / (yb + alpha);
        out.push(SalienceEntry {
            term: term.clone(),
            delta,
            variance,
            z: delta / variance.sqrt(),
            count_a: y_a,
            count_b: y_b,
        });
    }
    out.sort_by(|x, y| y.z.total_cmp(&x.z).then_with(|| x.term.cmp(&y.term)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub corpus_a: String,
    pub corpus_b: String,
    /// Top terms for A (positive z first).
    pub top_a: Vec<SalienceEntry>,
    /// Top terms for B, expressed from B's side (z negated).
    pub top_b: Vec<SalienceEntry>,
}

impl SalienceReport {
    pub fn from_ranked(names: (&str, &str), ranked: &[SalienceEntry], k: usize) -> Self {
        SalienceReport {
            corpus_a: names.0.to_string(),
            corpus_b: names.1.to_string(),
            top_a: ranked.iter().take(k).cloned().collect(),
            top_b: ranked
                .iter()
                .rev()
                .take(k)
                .map(SalienceEntry::swapped)
                .collect(),
        }
    }

    /// `term (z)` lists, z rounded to one decimal.
    pub fn to_text(&self) -> String {
        let fmt = |entries: &[SalienceEntry]| {
            entries
                .iter()
                .map(|e| format!("{} ({:.1})", e.term, e.z))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}:\n{}\n", self.corpus_a, fmt(&self.top_a));
        let _ = writeln!(out, "{}:\n{}", self.corpus_b, fmt(&self.top_b));
        out
    }
}

/// Counts, restricts the vocabulary, builds the default prior and ranks.
pub fn compare_corpora(
    a: &[Dialogue],
    b: &[Dialogue],
    options: &VocabOptions,
    alpha0: f64,
) -> Result<Vec<SalienceEntry>> {
    let (ca, cb) = restrict_vocabulary(
        &TermCounts::from_corpus(a, options),
        &TermCounts::from_corpus(b, options),
        options.min_count,
    );
    let prior = DirichletPrior::informative(&ca, &cb, alpha0)?;
    log_odds_salience(&ca, &cb, &prior)
}
