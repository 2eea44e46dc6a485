use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tokenize::tokenize;
use crate::types::Dialogue;

/// Sparse row: `(column, value)` pairs sorted by column.
pub type SparseRow = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfMatrix {
    /// Column labels, sorted.
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    pub rows: Vec<SparseRow>,
}

impl TfidfMatrix {
    pub fn n_docs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_terms(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_terms()];
        for &(c, x) in &self.rows[i] {
            v[c as usize] = x;
        }
        v
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        sparse_dot(&self.rows[i], &self.rows[j])
    }
}

pub fn sparse_dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Lowercased word tokens of a dialogue's concatenated utterances.
pub fn dialogue_document(d: &Dialogue) -> Vec<String> {
    d.utterances()
        .iter()
        .flat_map(|u| tokenize(u.text()))
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

/// Raw counts, smoothed idf `ln((1 + N) / (1 + df)) + 1`, l2-normalized rows.
pub fn tfidf_from_documents<S: AsRef<str> + Sync>(
    docs: &[Vec<S>],
    exec: Exec,
) -> Result<TfidfMatrix> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let counts: Vec<BTreeMap<&str, u64>> = exec.map_range(docs.len(), |i| {
        let mut m = BTreeMap::new();
        for t in &docs[i] {
            *m.entry(t.as_ref()).or_insert(0) += 1;
        }
        m
    });
    let mut df: BTreeMap<&str, u64> = BTreeMap::new();
    for m in &counts {
        for t in m.keys() {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let column: BTreeMap<&str, u32> = df.keys().enumerate().map(|(i, t)| (*t, i as u32)).collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = df
        .values()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let rows = exec.map(&counts, |m| {
        let mut row: SparseRow = m
            .iter()
            .map(|(t, &c)| {
                let col = column[t];
                (col, c as f64 * idf[col as usize])
            })
            .collect();
        let norm = row.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut row {
                e.1 /= norm;
            }
        }
        row
    });
    Ok(TfidfMatrix {
        vocabulary: df.keys().map(|t| t.to_string()).collect(),
        idf,
        rows,
    })
}

pub fn tfidf_matrix(corpus: &[Dialogue], exec: Exec) -> Result<TfidfMatrix> {
    let docs = exec.map(corpus, dialogue_document);
    tfidf_from_documents(&docs, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` uniform edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub samples: u64,
    pub mean: f64,
}

impl SimilarityHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{:.4},{:.4},{}\n",
                self.edges[i],
                self.edges[i + 1],
                c
            ));
        }
        out
    }
}

/// Cosine similarity of every unordered pair of rows, binned over [0, 1].
/// Values at 1.0 (and rounding noise above it) fall in the top bin.
pub fn pairwise_similarity_histogram(
    m: &TfidfMatrix,
    bins: usize,
    exec: Exec,
) -> Result<SimilarityHistogram> {
    let n = m.n_docs();
    if n < 2 {
        return Err(Error::TooFewDocuments { needed: 2, got: n });
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    // Per-row partials come back in order, so the float sum below is the
    // same in every execution mode.
    let partials = exec.map_range(n, |i| {
        let mut dense = vec![0.0; m.n_terms()];
        for &(c, x) in &m.rows[i] {
            dense[c as usize] = x;
        }
        let mut counts = vec![0u64; bins];
        let mut sum = 0.0;
        for row in &m.rows[i + 1..] {
            let s: f64 = row.iter().map(|&(c, x)| dense[c as usize] * x).sum();
            let s = s.clamp(0.0, 1.0);
            counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
            sum += s;
        }
        (counts, sum)
    });
    let mut counts = vec![0u64; bins];
    let mut sum = 0.0;
    for (c, s) in partials {
        for (acc, x) in counts.iter_mut().zip(c) {
            *acc += x;
        }
        sum += s;
    }
    let samples = (n * (n - 1) / 2) as u64;
    Ok(SimilarityHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        samples,
        mean: sum / samples as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<Vec<String>> {
        texts
            .iter()
            .map(|t| t.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn three_document_hand_computation() {
        let m = tfidf_from_documents(&docs(&["a b", "a c", "c c"]), Exec::Sequential).unwrap();
        assert_eq!(m.vocabulary, ["a", "b", "c"]);
        let idf_a = (4.0f64 / 3.0).ln() + 1.0;
        let idf_b = 2.0f64.ln() + 1.0;
        let idf_c = (4.0f64 / 3.0).ln() + 1.0;
        let n0 = (idf_a * idf_a + idf_b * idf_b).sqrt();
        let n1 = (idf_a * idf_a + idf_c * idf_c).sqrt();
        let expect = [
            [idf_a / n0, idf_b / n0, 0.0],
            [idf_a / n1, 0.0, idf_c / n1],
            [0.0, 0.0, 1.0],
        ];
        for (i, row) in expect.iter().enumerate() {
            let got = m.dense_row(i);
            for (g, e) in got.iter().zip(row) {
                assert!((g - e).abs() < 1e-9, "row {i}: {got:?}");
            }
        }
    }

    #[test]
    fn identical_and_disjoint_documents() {
        let m = tfidf_from_documents(&docs(&["x y", "x y", "p q"]), Exec::Sequential).unwrap();
        assert_eq!(m.rows[0], m.rows[1]);
        assert!((m.cosine(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(m.cosine(0, 2), 0.0);
    }

    #[test]
    fn rows_unit_or_zero() {
        let m = tfidf_from_documents(&docs(&["a b c", "", "c c d"]), Exec::Parallel).unwrap();
        for row in &m.rows {
            let n: f64 = row.iter().map(|(_, x)| x * x).sum();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
        assert!(tfidf_from_documents::<String>(&[], Exec::Sequential).is_err());
    }

    #[test]
    fn histogram_sample_identity() {
        for n in [2usize, 10, 100] {
            let texts: Vec<String> = (0..n)
                .map(|i| format!("w{} w{} common", i % 7, i % 3))
                .collect();
            let d: Vec<Vec<String>> = texts
                .iter()
                .map(|t| t.split(' ').map(String::from).collect())
                .collect();
            let m = tfidf_from_documents(&d, Exec::Parallel).unwrap();
            let h = pairwise_similarity_histogram(&m, 20, Exec::Parallel).unwrap();
            assert_eq!(h.samples, (n * (n - 1) / 2) as u64);
            assert_eq!(h.counts.iter().sum::<u64>(), h.samples);
            assert_eq!(
                h,
                pairwise_similarity_histogram(&m, 20, Exec::Sequential).unwrap()
            );
        }
    }

    #[test]
    fn duplicated_corpus_lands_in_top_bin() {
        let m = tfidf_from_documents(&docs(&["a b c"; 5]), Exec::Sequential).unwrap();
        let h = pairwise_similarity_histogram(&m, 10, Exec::Sequential).unwrap();
        assert_eq!(h.counts[9], 10);
        let one = tfidf_from_documents(&docs(&["a"]), Exec::Sequential).unwrap();
        assert!(pairwise_similarity_histogram(&one, 10, Exec::Sequential).is_err());
    }
}
