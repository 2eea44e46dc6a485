use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::types::{Dialogue, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleStats {
    pub utterances: u64,
    pub avg_per_session: f64,
    pub avg_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sessions: u64,
    pub avg_session_tokens: f64,
    pub total_utterances: u64,
    pub avg_utterances_per_session: f64,
    pub avg_utterance_tokens: f64,
    pub per_role: BTreeMap<Speaker, RoleStats>,
}

/// Integer partial sums; merging is exact and associative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    pub sessions: u64,
    pub utterances: [u64; 2],
    pub tokens: [u64; 2],
}

impl StatsAccumulator {
    pub fn add(mut self, d: &Dialogue, drop_leading_supporter: bool) -> Self {
        self.sessions += 1;
        let skip = if drop_leading_supporter {
            d.utterances()
                .iter()
                .take_while(|u| u.speaker() == Speaker::Supporter)
                .count()
        } else {
            0
        };
        for u in &d.utterances()[skip..] {
            let i = u.speaker() as usize;
            self.utterances[i] += 1;
            self.tokens[i] += u.token_len() as u64;
        }
        self
    }

    pub fn merge(self, o: Self) -> Self {
        StatsAccumulator {
            sessions: self.sessions + o.sessions,
            utterances: [
                self.utterances[0] + o.utterances[0],
                self.utterances[1] + o.utterances[1],
            ],
            tokens: [self.tokens[0] + o.tokens[0], self.tokens[1] + o.tokens[1]],
        }
    }

    pub fn finish(&self) -> Result<CorpusStats> {
        if self.sessions == 0 {
            return Err(Error::EmptyCorpus);
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let total_utts = self.utterances.iter().sum();
        let total_tokens = self.tokens.iter().sum();
        let per_role = Speaker::ALL
            .iter()
            .map(|&s| {
                let i = s as usize;
                (
                    s,
                    RoleStats {
                        utterances: self.utterances[i],
                        avg_per_session: ratio(self.utterances[i], self.sessions),
                        avg_tokens: ratio(self.tokens[i], self.utterances[i]),
                    },
                )
            })
            .collect();
        Ok(CorpusStats {
            sessions: self.sessions,
            avg_session_tokens: ratio(total_tokens, self.sessions),
            total_utterances: total_utts,
            avg_utterances_per_session: ratio(total_utts, self.sessions),
            avg_utterance_tokens: ratio(total_tokens, total_utts),
            per_role,
        })
    }
}

/// Session, utterance and length statistics. With `drop_leading_supporter`,
/// supporter turns before a dialogue's first seeker turn are ignored.
pub fn corpus_stats(
    corpus: &[Dialogue],
    drop_leading_supporter: bool,
    exec: Exec,
) -> Result<CorpusStats> {
    exec.fold(
        corpus,
        StatsAccumulator::default,
        |acc, d| acc.add(d, drop_leading_supporter),
        StatsAccumulator::merge,
    )
    .finish()
}

pub const STATS_ROW_LABELS: [&str; 11] = [
    "# Sessions",
    "Average Session Length",
    "# Utterances",
    "Average # Utterances",
    "Average Utterance Length",
    "Seeker # Utterances",
    "Seeker Avg # Uttr",
    "Seeker Avg Uttr Len",
    "Supporter # Utterances",
    "Supporter Avg # Uttr",
    "Supporter Avg Uttr Len",
];

impl CorpusStats {
    fn role(&self, s: Speaker) -> RoleStats {
        self.per_role.get(&s).copied().unwrap_or(RoleStats {
            utterances: 0,
            avg_per_session: 0.0,
            avg_tokens: 0.0,
        })
    }

    /// Display values in [`STATS_ROW_LABELS`] order.
    pub fn row_values(&self) -> [String; 11] {
        let (sk, sp) = (self.role(Speaker::Seeker), self.role(Speaker::Supporter));
        [
            self.sessions.to_string(),
            format!("{:.1}", self.avg_session_tokens),
            self.total_utterances.to_string(),
            format!("{:.1}", self.avg_utterances_per_session),
            format!("{:.1}", self.avg_utterance_tokens),
            sk.utterances.to_string(),
            format!("{:.1}", sk.avg_per_session),
            format!("{:.1}", sk.avg_tokens),
            sp.utterances.to_string(),
            format!("{:.1}", sp.avg_per_session),
            format!("{:.1}", sp.avg_tokens),
        ]
    }
}

/// Side-by-side table, one column per named corpus.
pub fn stats_table(columns: &[(&str, &CorpusStats)]) -> String {
    let values: Vec<[String; 11]> = columns.iter().map(|(_, s)| s.row_values()).collect();
    let width = columns
        .iter()
        .map(|(n, _)| n.len())
        .chain(values.iter().flat_map(|v| v.iter().map(String::len)))
        .max()
        .unwrap_or(8)
        .max(8);
    let mut out = format!("{:<26}", "");
    for (name, _) in columns {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for (r, label) in STATS_ROW_LABELS.iter().enumerate() {
        let _ = write!(out, "{label:<26}");
        for v in &values {
            let _ = write!(out, " {:>width$}", v[r]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Source, Utterance};
    use proptest::prelude::*;

    fn d(turns: &[(Speaker, &str)]) -> Dialogue {
        let u = turns
            .iter()
            .map(|(s, t)| Utterance::new(*s, t).unwrap())
            .collect();
        Dialogue::new("x", Source::Crowdsourced, u).unwrap()
    }

    #[test]
    fn single_dialogue_hand_arithmetic() {
        let s = corpus_stats(
            &[d(&[
                (Speaker::Seeker, "a b"),
                (Speaker::Supporter, "c d e"),
            ])],
            false,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(s.sessions, 1);
        assert_eq!(s.avg_session_tokens, 5.0);
        assert_eq!(s.avg_utterances_per_session, 2.0);
        assert_eq!(s.avg_utterance_tokens, 2.5);
        assert_eq!(s.per_role[&Speaker::Seeker].avg_tokens, 2.0);
        assert_eq!(s.per_role[&Speaker::Supporter].avg_tokens, 3.0);
        assert_eq!(
            s.total_utterances,
            s.per_role.values().map(|r| r.utterances).sum::<u64>()
        );
    }

    #[test]
    fn leading_supporter_dropped() {
        let corpus = [d(&[(Speaker::Supporter, "hi"), (Speaker::Seeker, "x")])];
        let s = corpus_stats(&corpus, true, Exec::Sequential).unwrap();
        assert_eq!(s.total_utterances, 1);
        assert_eq!(s.per_role[&Speaker::Supporter].utterances, 0);
        let s = corpus_stats(&corpus, false, Exec::Sequential).unwrap();
        assert_eq!(s.total_utterances, 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            corpus_stats(&[], false, Exec::Sequential),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn table_has_every_row() {
        let s = corpus_stats(&[d(&[(Speaker::Seeker, "a")])], false, Exec::Sequential).unwrap();
        let t = stats_table(&[("A", &s), ("B", &s)]);
        for label in STATS_ROW_LABELS {
            assert!(t.contains(label));
        }
        assert_eq!(t.lines().count(), 12);
    }

    proptest! {
        #[test]
        fn partial_sums_merge_exactly(lens in proptest::collection::vec((1usize..6, 0usize..3), 1..40), split in 0usize..40) {
            let corpus: Vec<Dialogue> = lens.iter().map(|(n, lead)| {
                let mut turns: Vec<(Speaker, String)> = (0..*lead).map(|_| (Speaker::Supporter, "hey there".to_string())).collect();
                for i in 0..*n {
                    let s = if i % 2 == 0 { Speaker::Seeker } else { Speaker::Supporter };
                    turns.push((s, vec!["w"; i + 1].join(" ")));
                }
                let u = turns.iter().map(|(s, t)| Utterance::new(*s, t).unwrap()).collect();
                Dialogue::new("x", Source::Crowdsourced, u).unwrap()
            }).collect();
            let split = split.min(corpus.len());
            let whole = corpus.iter().fold(StatsAccumulator::default(), |a, d| a.add(d, true));
            let left = corpus[..split].iter().fold(StatsAccumulator::default(), |a, d| a.add(d, true));
            let right = corpus[split..].iter().fold(StatsAccumulator::default(), |a, d| a.add(d, true));
            prop_assert_eq!(whole, left.merge(right));
            prop_assert_eq!(
                corpus_stats(&corpus, true, Exec::Parallel).unwrap(),
                corpus_stats(&corpus, true, Exec::Sequential).unwrap()
            );
        }
    }
}
