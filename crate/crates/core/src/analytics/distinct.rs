use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::tokenize::tokenize;
use crate::types::{Dialogue, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistinctScope {
    #[default]
    Supporter,
    All,
}

/// Unique n-grams over total n-grams of one token stream; 0 when `n` is 0
/// or the stream is shorter than `n`.
pub fn distinct_n_tokens<S: AsRef<str> + Eq + std::hash::Hash>(tokens: &[S], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let grams: HashSet<&[S]> = tokens.windows(n).collect();
    grams.len() as f64 / (tokens.len() - n + 1) as f64
}

/// Distinct-n over the in-order concatenation of the scoped utterances.
pub fn distinct_n(corpus: &[Dialogue], n: usize, scope: DistinctScope) -> f64 {
    let tokens: Vec<String> = corpus
        .iter()
        .flat_map(|d| d.utterances())
        .filter(|u| scope == DistinctScope::All || u.speaker() == Speaker::Supporter)
        .flat_map(|u| tokenize(u.text()))
        .collect();
    distinct_n_tokens(&tokens, n)
}
