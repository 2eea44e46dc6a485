//! Corpus statistics, lexical salience, TF-IDF diversity, PCA and distinct-n.

mod distinct;
mod pca;
mod salience;
mod stats;
pub mod svg;
mod tfidf;

pub use distinct::{distinct_n, distinct_n_tokens, DistinctScope};
pub use pca::{pca_2d, pca_2d_dense, pca_2d_sparse, Pca2d, PcaRoute, DENSE_EIGEN_MAX};
pub use salience::{
    compare_corpora, log_odds_salience, restrict_vocabulary, DirichletPrior, SalienceEntry,
    SalienceReport, TermCounts, VocabOptions,
};
pub use stats::{
    corpus_stats, stats_table, CorpusStats, RoleStats, StatsAccumulator, STATS_ROW_LABELS,
};
pub use tfidf::{
    dialogue_document, pairwise_similarity_histogram, sparse_dot, tfidf_from_documents,
    tfidf_matrix, SimilarityHistogram, SparseRow, TfidfMatrix,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded sample of `k` dialogues without replacement, kept in corpus order.
/// Returns the whole corpus when `k` covers it.
pub fn sample_sessions<T: Clone>(corpus: &[T], k: usize, seed: u64) -> Vec<T> {
    if k >= corpus.len() {
        return corpus.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, corpus.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus[i].clone()).collect()
}
