//! Regenerates `tests/fixtures/filter200`: 100 seed posts × 2 epochs of
//! completions with a known number of planted failures per filter rule.
//!
//! cargo run -p dialaug-core --example make_fixture -- crates/core/tests/fixtures/filter200

use std::collections::BTreeMap;
use std::path::PathBuf;

use dialaug_core::filters::FilterRule;
use dialaug_core::prompt::{build_completion_prompt, PromptTemplate, RawCompletion};
use dialaug_core::synth::{planted_continuation, seed_post_text, Planted};
use dialaug_core::{jsonl, GenerationParams, SeedPost};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLAN: [(Planted, usize); 8] = [
    (Planted::NonDialogue, 12),
    (Planted::Unfinished, 8),
    (Planted::Leakage, 5),
    (Planted::Unbalanced, 10),
    (Planted::Consecutive, 7),
    (Planted::TooShort, 9),
    (Planted::BadLength, 16),
    (Planted::Clean, 133),
];

fn rule(kind: Planted) -> Option<FilterRule> {
    match kind {
        Planted::Clean => None,
        Planted::NonDialogue => Some(FilterRule::NonDialogue),
        Planted::Unfinished => Some(FilterRule::UnfinishedGeneration),
        Planted::Leakage => Some(FilterRule::PromptWordLeakage),
        Planted::Unbalanced => Some(FilterRule::UnbalancedUtterances),
        Planted::Consecutive => Some(FilterRule::ConsecutiveUtterances),
        Planted::TooShort => Some(FilterRule::TotalUtterances),
        Planted::BadLength => Some(FilterRule::UtteranceLength),
    }
}

fn main() -> dialaug_core::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/tests/fixtures/filter200".into())
        .into();
    std::fs::create_dir_all(&dir).map_err(|e| dialaug_core::Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(20_200);
    let template = PromptTemplate::default();
    let params = GenerationParams {
        epochs: 2,
        seed: 20_200,
        ..GenerationParams::default()
    };

    let posts: Vec<SeedPost> = (0..100)
        .map(|i| {
            let n = rng.random_range(10..=60);
            SeedPost::new(format!("fx{i:03}"), &seed_post_text(&mut rng, n), "sad")
        })
        .collect::<dialaug_core::Result<_>>()?;

    let mut kinds: Vec<Planted> = PLAN
        .iter()
        .flat_map(|(k, n)| std::iter::repeat_n(*k, *n))
        .collect();
    kinds.shuffle(&mut rng);

    let mut completions = Vec::new();
    for (j, kind) in kinds.into_iter().enumerate() {
        let post = &posts[j % 100];
        let (text, finish) = planted_continuation(&mut rng, kind);
        completions.push(RawCompletion {
            seed_post_id: post.id.clone(),
            epoch: 1 + (j / 100) as u32,
            prompt_text: build_completion_prompt(post, &template),
            generated_text: text,
            finish_reason: finish,
            gen_params: params,
            backend_label: "planted".into(),
            error: None,
        });
    }

    let mut removed: BTreeMap<FilterRule, usize> = BTreeMap::new();
    for (k, n) in PLAN {
        if let Some(r) = rule(k) {
            removed.insert(r, n);
        }
    }
    let expected = serde_json::json!({
        "total": 200,
        "retained": 133,
        "removed_by_rule": removed,
    });
    jsonl::write_all_atomic(&dir.join("seed_posts.jsonl"), &posts)?;
    jsonl::write_all_atomic(&dir.join("completions.jsonl"), &completions)?;
    jsonl::write_json_atomic(&dir.join("expected.json"), &expected)?;
    println!("wrote fixture to {}", dir.display());
    Ok(())
}
