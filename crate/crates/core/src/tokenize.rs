//! Deterministic Treebank-style word tokenizer.
//!
//! Every length in the pipeline (seed screening, filter thresholds, corpus
//! statistics) is a count of tokens produced here. Rules are applied per
//! whitespace-delimited chunk, so token counts are additive across spaces:
//!
//! 1. NFC-normalize the input and split on whitespace.
//! 2. Peel leading `"` and `(` off each chunk.
//! 3. Peel trailing `. , ! ? ; : " )` off each chunk; a run of periods stays
//!    a single token (`...`).
//! 4. Split a trailing clitic off the remaining word: `n't`, `'s`, `'re`,
//!    `'ve`, `'ll`, `'d`, `'m` (straight or curly apostrophe, any case).

use unicode_normalization::UnicodeNormalization;

const LEADING: &[char] = &['"', '('];
const TRAILING: &[char] = &['.', ',', '!', '?', ';', ':', '"', ')'];
const CLITICS: &[&str] = &["'s", "'re", "'ve", "'ll", "'d", "'m"];

pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    let mut out = Vec::new();
    for chunk in normalized.split_whitespace() {
        tokenize_chunk(chunk, &mut out);
    }
    out
}

/// Number of tokens in `text`; cheaper to read than `tokenize(text).len()`.
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Normalizes free text into a single logical line: NFC, whitespace runs
/// (newlines included) collapsed to one space, ends trimmed.
pub fn normalize_text(text: &str) -> String {
    let normalized: String = text.nfc().collect();
    normalized.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    let mut rest = chunk;

    while let Some(c) = rest.chars().next() {
        if !LEADING.contains(&c) {
            break;
        }
        out.push(c.to_string());
        rest = &rest[c.len_utf8()..];
    }

    let mut trailing = Vec::new();
    while let Some(c) = rest.chars().next_back() {
        if !TRAILING.contains(&c) {
            break;
        }
        if c == '.' {
            let stem = rest.trim_end_matches('.');
            trailing.push(&rest[stem.len()..]);
            rest = stem;
        } else {
            trailing.push(&rest[rest.len() - c.len_utf8()..]);
            rest = &rest[..rest.len() - c.len_utf8()];
        }
    }

    if !rest.is_empty() {
        match split_clitic(rest) {
            (stem, Some(clitic)) => {
                // the stem may itself end in punctuation ("a.'s")
                tokenize_chunk(stem, out);
                out.push(clitic.to_string());
            }
            (word, None) => out.push(word.to_string()),
        }
    }
    out.extend(trailing.into_iter().rev().map(str::to_string));
}

fn split_clitic(word: &str) -> (&str, Option<&str>) {
    // Compare on an ASCII-apostrophe, lowercase view; byte offsets of the
    // original are recovered from the suffix length in chars.
    let folded: String = word
        .chars()
        .map(|c| {
            if c == '\u{2019}' {
                '\''
            } else {
                c.to_ascii_lowercase()
            }
        })
        .collect();
    let suffix_chars = if folded.ends_with("n't") && folded.chars().count() > 3 {
        Some(3)
    } else {
        CLITICS
            .iter()
            .find(|cl| folded.ends_with(*cl) && folded.chars().count() > cl.len())
            .map(|cl| cl.len())
    };
    match suffix_chars {
        Some(n) => {
            let split = word
                .char_indices()
                .rev()
                .nth(n - 1)
                .map(|(i, _)| i)
                .unwrap_or(0);
            (&word[..split], Some(&word[split..]))
        }
        None => (word, None),
    }
}
