//! Synthetic transcripts with a known filter outcome.
//!
//! Each [`Planted`] kind produces a continuation (the text after the `AI:`
//! that ends a completion prompt) that fails exactly at the named rule and
//! passes every earlier one, given a seed post of 10 to 60 tokens. The mock
//! backend draws from these and the shipped filter fixture is built from
//! them, so the fixture's ground truth is known by construction.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::prompt::FinishReason;
use crate::types::Speaker;

const WORDS: &[&str] = &[
    "work",
    "job",
    "boss",
    "friend",
    "family",
    "sister",
    "brother",
    "mother",
    "father",
    "dog",
    "cat",
    "house",
    "car",
    "money",
    "rent",
    "school",
    "exam",
    "class",
    "teacher",
    "neighbor",
    "party",
    "weekend",
    "week",
    "night",
    "morning",
    "feel",
    "felt",
    "think",
    "know",
    "really",
    "very",
    "just",
    "maybe",
    "always",
    "never",
    "sometimes",
    "today",
    "yesterday",
    "tomorrow",
    "hard",
    "tired",
    "worried",
    "upset",
    "scared",
    "lonely",
    "stressed",
    "hope",
    "help",
    "talk",
    "listen",
    "understand",
    "sorry",
    "sounds",
    "difficult",
    "situation",
    "better",
    "try",
    "plan",
    "idea",
    "time",
    "people",
    "life",
    "home",
    "trip",
    "doctor",
    "health",
    "sleep",
    "food",
    "phone",
    "message",
    "call",
    "lost",
    "found",
    "broke",
    "moved",
    "started",
    "stopped",
    "asked",
    "told",
    "said",
    "wanted",
    "needed",
    "could",
    "would",
    "should",
    "the",
    "a",
    "an",
    "and",
    "but",
    "so",
    "because",
    "with",
    "about",
    "for",
    "to",
    "of",
    "in",
    "on",
    "my",
    "your",
    "it",
    "that",
    "this",
    "we",
    "they",
    "me",
    "you",
    "i",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planted {
    Clean,
    NonDialogue,
    Unfinished,
    Leakage,
    Unbalanced,
    Consecutive,
    TooShort,
    BadLength,
}

impl Planted {
    pub const ALL: [Planted; 8] = [
        Planted::Clean,
        Planted::NonDialogue,
        Planted::Unfinished,
        Planted::Leakage,
        Planted::Unbalanced,
        Planted::Consecutive,
        Planted::TooShort,
        Planted::BadLength,
    ];
}

/// Probability of each failure kind; the remainder is clean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureMix {
    pub non_dialogue: f64,
    pub unfinished: f64,
    pub leakage: f64,
    pub unbalanced: f64,
    pub consecutive: f64,
    pub too_short: f64,
    pub bad_length: f64,
}

impl Default for FailureMix {
    /// Roughly the failure profile of a fine-tuned dialogue generator.
    fn default() -> Self {
        FailureMix {
            non_dialogue: 0.003,
            unfinished: 0.034,
            leakage: 0.021,
            unbalanced: 0.052,
            consecutive: 0.035,
            too_short: 0.048,
            bad_length: 0.080,
        }
    }
}

impl FailureMix {
    pub fn clean() -> Self {
        FailureMix {
            non_dialogue: 0.0,
            unfinished: 0.0,
            leakage: 0.0,
            unbalanced: 0.0,
            consecutive: 0.0,
            too_short: 0.0,
            bad_length: 0.0,
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Planted {
        let x: f64 = rng.random();
        let table = [
            (self.non_dialogue, Planted::NonDialogue),
            (self.unfinished, Planted::Unfinished),
            (self.leakage, Planted::Leakage),
            (self.unbalanced, Planted::Unbalanced),
            (self.consecutive, Planted::Consecutive),
            (self.too_short, Planted::TooShort),
            (self.bad_length, Planted::BadLength),
        ];
        let mut acc = 0.0;
        for (p, kind) in table {
            acc += p;
            if x < acc {
                return kind;
            }
        }
        Planted::Clean
    }
}

/// An utterance of exactly `tokens` tokens: `tokens - 1` words and a period.
pub fn sentence<R: Rng>(rng: &mut R, tokens: usize) -> String {
    let tokens = tokens.max(2);
    let mut words: Vec<&str> = (0..tokens - 1)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect();
    let first = words[0].to_string();
    let mut capital = first[..1].to_uppercase();
    capital.push_str(&first[1..]);
    words[0] = &capital;
    format!("{}.", words.join(" "))
}

fn alternating(n: usize) -> Vec<Speaker> {
    // position 0 is the seed post (seeker); the continuation starts at 1
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Speaker::Seeker
            } else {
                Speaker::Supporter
            }
        })
        .collect()
}

fn render(turns: &[(Speaker, String)]) -> String {
    let mut out = String::new();
    for (i, (speaker, text)) in turns.iter().enumerate() {
        if i == 0 {
            out.push(' ');
        } else {
            out.push('\n');
            out.push_str(speaker.role_prompt());
            out.push_str(": ");
        }
        out.push_str(text);
    }
    out
}

fn fill<R: Rng>(rng: &mut R, roles: &[Speaker]) -> Vec<(Speaker, String)> {
    roles
        .iter()
        .map(|&s| {
            let n = match s {
                Speaker::Seeker => rng.random_range(8..=20),
                Speaker::Supporter => rng.random_range(10..=24),
            };
            (s, sentence(rng, n))
        })
        .collect()
}

/// Generated text for a completion whose first filter failure is `kind`.
pub fn planted_continuation<R: Rng>(rng: &mut R, kind: Planted) -> (String, FinishReason) {
    match kind {
        Planted::Clean => {
            let roles = alternating(rng.random_range(12..=24));
            (render(&fill(rng, &roles[1..])), FinishReason::Eos)
        }
        Planted::NonDialogue => {
            let roles = alternating(rng.random_range(12..=20));
            let mut text = render(&fill(rng, &roles[1..]));
            let lines: Vec<&str> = text.split('\n').collect();
            let at = rng.random_range(1..=lines.len());
            let mut lines: Vec<String> = lines.into_iter().map(str::to_string).collect();
            lines.insert(at, sentence(rng, 9));
            text = lines.join("\n");
            (text, FinishReason::Eos)
        }
        Planted::Unfinished => {
            let roles = alternating(rng.random_range(12..=24));
            let text = render(&fill(rng, &roles[1..]));
            let cut = rng.random_range(text.len() / 3..text.len());
            let cut = (0..=cut)
                .rev()
                .find(|&i| text.is_char_boundary(i))
                .unwrap_or(0);
            (text[..cut].to_string(), FinishReason::LengthCap)
        }
        Planted::Leakage => {
            let roles = alternating(rng.random_range(12..=20));
            let mut turns = fill(rng, &roles[1..]);
            let i = rng.random_range(0..turns.len());
            let word = if rng.random_bool(0.5) { "AI" } else { "Human" };
            let text = &mut turns[i].1;
            *text = format!("As a {word}, {}", text.to_lowercase());
            (render(&turns), FinishReason::Eos)
        }
        Planted::Unbalanced => {
            // supporters 2..=3, seekers strictly more than 2.5x that
            let n_p = rng.random_range(2..=3usize);
            let n_s = (5 * n_p) / 2 + 1 + rng.random_range(0..=2);
            let mut roles = vec![Speaker::Seeker, Speaker::Supporter];
            let mut left_s = n_s - 1;
            let mut left_p = n_p - 1;
            while left_s > 0 || left_p > 0 {
                let run = left_s.min(3);
                roles.extend(std::iter::repeat_n(Speaker::Seeker, run));
                left_s -= run;
                if left_p > 0 {
                    roles.push(Speaker::Supporter);
                    left_p -= 1;
                }
            }
            (render(&fill(rng, &roles[1..])), FinishReason::Eos)
        }
        Planted::Consecutive => {
            let mut roles = alternating(rng.random_range(12..=18));
            let run = rng.random_range(4..=5);
            let at = 2 * rng.random_range(1..roles.len() / 2) + 1;
            for _ in 1..run {
                roles.insert(at, Speaker::Supporter);
            }
            (render(&fill(rng, &roles[1..])), FinishReason::Eos)
        }
        Planted::TooShort => {
            let roles = alternating(rng.random_range(4..=10));
            (render(&fill(rng, &roles[1..])), FinishReason::Eos)
        }
        Planted::BadLength => {
            let roles = alternating(rng.random_range(12..=20));
            let mut turns = fill(rng, &roles[1..]);
            match rng.random_range(0..3) {
                0 => {
                    for (s, text) in turns.iter_mut() {
                        if *s == Speaker::Supporter {
                            *text = {
                                let n = rng.random_range(3..=6);
                                sentence(rng, n)
                            };
                        }
                    }
                }
                1 => {
                    let i = rng.random_range(0..turns.len());
                    turns[i].1 = {
                        let n = rng.random_range(81..=95);
                        sentence(rng, n)
                    };
                }
                _ => {
                    for (s, text) in turns.iter_mut() {
                        if *s == Speaker::Seeker {
                            *text = {
                                let n = rng.random_range(50..=70);
                                sentence(rng, n)
                            };
                        }
                    }
                }
            }
            (render(&turns), FinishReason::Eos)
        }
    }
}

/// A single reply line, used for turn-by-turn chat.
pub fn reply_line<R: Rng>(rng: &mut R, speaker: Speaker) -> String {
    match speaker {
        Speaker::Seeker => {
            let n = rng.random_range(8..=20);
            sentence(rng, n)
        }
        Speaker::Supporter => {
            let n = rng.random_range(10..=24);
            sentence(rng, n)
        }
    }
}

/// Multi-line prose with no role prefixes, as an unadapted model tends to
/// produce.
pub fn prose<R: Rng>(rng: &mut R) -> String {
    let paragraphs = rng.random_range(2..=4);
    (0..paragraphs)
        .map(|_| {
            (0..rng.random_range(2..=4))
                .map(|_| {
                    let n = rng.random_range(8..=18);
                    sentence(rng, n)
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// A plausible distress post of `tokens` tokens.
pub fn seed_post_text<R: Rng>(rng: &mut R, tokens: usize) -> String {
    sentence(rng, tokens)
}
