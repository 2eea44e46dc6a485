//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dialaug_core::analytics::{
    compare_corpora, corpus_stats, pairwise_similarity_histogram, pca_2d_dense,
    tfidf_from_documents, VocabOptions,
};
use dialaug_core::backend::{MockBackend, MockConfig};
use dialaug_core::filters::{
    check_dialogue, postprocess_corpus, FilterRule, FilterThresholds, FilterVerdict,
};
use dialaug_core::pipeline::{run_pipeline_with, PathsConfig, PipelineConfig, Stage};
use dialaug_core::prompt::{
    continuation_text, parse_completion, FinishReason, ParseOutcome, PromptTemplate, RawCompletion,
};
use dialaug_core::safety::{assess_toxicity, MockScorer, ToxicityOptions};
use dialaug_core::synth::{seed_post_text, sentence};
use dialaug_core::{jsonl, Dialogue, Exec, GenerationParams, SeedPost, Source, Speaker, Utterance};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILTER_RUNTIME_LIMIT: Duration = Duration::from_secs(1);
const SALIENCE_TOL: f64 = 1e-9;
const ANTISYMMETRY_TOL: f64 = 1e-12;
const TFIDF_TOL: f64 = 1e-9;
const PCA_TOL: f64 = 1e-6;
const HERMETIC_RUNTIME_LIMIT: Duration = Duration::from_secs(10);
const FULL_DATA_REL_TOL: f64 = 0.005;
/// The reference session count is only given to the nearest thousand.
const SESSION_COUNT_REL_TOL: f64 = 0.01;
const MOCK_TOXICITY_CONSTANT: f64 = 0.1;
const COMPLETIONS_FILE: &str = "completions.jsonl";
const JOURNAL_FILE: &str = "journal.jsonl";

enum Verdict {
    Pass(String),
    Skip(String),
}

type Outcome = Result<Verdict, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        (
            "filter accounting on the planted fixture",
            filter_accounting,
        ),
        ("render/parse round trip", round_trip),
        (
            "salience against the direct-formula oracle",
            salience_oracle,
        ),
        ("tf-idf, pca and histogram oracles", tfidf_pca_oracles),
        ("threshold boundary fixtures", threshold_boundaries),
        ("hermetic end-to-end run", hermetic_run),
        ("resumability under interruption", resumability),
        ("full-data reproduction", full_data),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(Verdict::Pass(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Verdict::Skip(detail)) => println!("SKIP  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/filter200")
}

fn filter_accounting() -> Outcome {
    let dir = fixture_dir();
    let posts: Vec<SeedPost> =
        jsonl::read_all(&dir.join("seed_posts.jsonl")).map_err(|e| e.to_string())?;
    let mut completions: Vec<RawCompletion> =
        jsonl::read_all(&dir.join("completions.jsonl")).map_err(|e| e.to_string())?;
    let expected: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.join("expected.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let template = PromptTemplate::default();
    let t = FilterThresholds::default();

    let start = Instant::now();
    let out = postprocess_corpus(&completions, &posts, &template, &t, Exec::Parallel);
    let elapsed = start.elapsed();

    let report = &out.report;
    ensure(report.is_consistent(), || {
        "retained + removed != total".into()
    })?;
    ensure(
        report.total as u64 == expected["total"].as_u64().unwrap(),
        || format!("total {} vs {}", report.total, expected["total"]),
    )?;
    ensure(
        report.retained as u64 == expected["retained"].as_u64().unwrap(),
        || format!("retained {} vs {}", report.retained, expected["retained"]),
    )?;
    let got = serde_json::to_value(&report.removed_by_rule).unwrap();
    ensure(got == expected["removed_by_rule"], || {
        format!("removed_by_rule {got} vs {}", expected["removed_by_rule"])
    })?;
    ensure(elapsed < FILTER_RUNTIME_LIMIT, || {
        format!("took {elapsed:?}")
    })?;

    // The counts do not depend on input order or execution mode.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        completions.shuffle(&mut rng);
        let again = postprocess_corpus(&completions, &posts, &template, &t, Exec::Sequential);
        ensure(again.report == *report, || {
            "report changed under permutation".into()
        })?;
    }
    Ok(Verdict::Pass(format!(
        "{} of {} retained, counts match, {elapsed:?}",
        report.retained, report.total
    )))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &[
        'a', 'b', 'c', 'd', 'e', 'h', 'i', 'm', 'n', 'o', 's', 't', 'u', 'é', 'ü', '\'', '?', '!',
        ',', '.', '1',
    ];
    let words = rng.random_range(1..12);
    (0..words)
        .map(|_| {
            (0..rng.random_range(1..9))
                .map(|_| *CHARS.choose(rng).unwrap())
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_dialogue(rng: &mut ChaCha8Rng, id: usize) -> Dialogue {
    let n = rng.random_range(2..30);
    let utterances = (0..n)
        .map(|i| {
            let speaker = match i {
                0 => Speaker::Seeker,
                1 => Speaker::Supporter,
                _ if rng.random_bool(0.5) => Speaker::Seeker,
                _ => Speaker::Supporter,
            };
            Utterance::new(speaker, &random_text(rng)).unwrap()
        })
        .collect();
    Dialogue::new(format!("d{id}"), Source::Completion, utterances).unwrap()
}

fn round_trip() -> Outcome {
    let template = PromptTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for i in 0..1000 {
        let d = random_dialogue(&mut rng, i);
        let post = SeedPost::new(format!("p{i}"), d.utterances()[0].text(), "none").unwrap();
        let completion = RawCompletion {
            seed_post_id: post.id.clone(),
            epoch: 0,
            prompt_text: String::new(),
            generated_text: continuation_text(&d, &template).unwrap(),
            finish_reason: FinishReason::Eos,
            gen_params: GenerationParams::default(),
            backend_label: "acceptance".into(),
            error: None,
        };
        match parse_completion(&post, &completion, &template) {
            ParseOutcome::Success(back) if back.utterances() == d.utterances() => {}
            _ => failures += 1,
        }
    }
    ensure(failures == 0, || {
        format!("{failures} of 1000 dialogues failed")
    })?;
    Ok(Verdict::Pass("1000 of 1000 dialogues reproduced".into()))
}

fn word_corpus(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Dialogue> {
    let docs = rng.random_range(1..=20);
    (0..docs)
        .map(|i| {
            let utterances = (0..rng.random_range(1..5))
                .map(|j| {
                    let text = (0..rng.random_range(1..15))
                        .map(|_| format!("w{:02}", rng.random_range(0..vocab)))
                        .collect::<Vec<_>>()
                        .join(" ");
                    let speaker = if j % 2 == 0 {
                        Speaker::Seeker
                    } else {
                        Speaker::Supporter
                    };
                    Utterance::new(speaker, &text).unwrap()
                })
                .collect();
            Dialogue::new(format!("c{i}"), Source::Crowdsourced, utterances).unwrap()
        })
        .collect()
}

/// Counts whitespace-separated words, applies the shared-vocabulary cut and
/// evaluates delta, variance and z term by term.
fn salience_by_hand(
    a: &[Dialogue],
    b: &[Dialogue],
    alpha0: f64,
) -> BTreeMap<String, (f64, f64, f64)> {
    let count = |c: &[Dialogue]| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for d in c {
            for u in d.utterances() {
                for w in u.text().split(' ') {
                    *m.entry(w.to_string()).or_default() += 1.0;
                }
            }
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let keep: Vec<String> = ca
        .keys()
        .chain(cb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|w| ca.get(*w).unwrap_or(&0.0) + cb.get(*w).unwrap_or(&0.0) >= 2.0)
        .cloned()
        .collect();
    let y = |m: &BTreeMap<String, f64>, w: &str| *m.get(w).unwrap_or(&0.0);
    let na: f64 = keep.iter().map(|w| y(&ca, w)).sum();
    let nb: f64 = keep.iter().map(|w| y(&cb, w)).sum();
    keep.iter()
        .map(|w| {
            let (ya, yb) = (y(&ca, w), y(&cb, w));
            let alpha = alpha0 * (ya + yb) / (na + nb);
            let delta = ((ya + alpha) / (na + alpha0 - ya - alpha)).ln()
                - ((yb + alpha) / (nb + alpha0 - yb - alpha)).ln();
            let variance = 1.0 / (ya + alpha) + 1.0 / (yb + alpha);
            (w.clone(), (delta, variance, delta / variance.sqrt()))
        })
        .collect()
}

fn salience_oracle() -> Outcome {
    let options = VocabOptions::default();
    let alpha0 = 1000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    while pairs < 100 {
        let vocab = rng.random_range(2..=50);
        let a = word_corpus(&mut rng, vocab);
        let b = word_corpus(&mut rng, vocab);
        let oracle = salience_by_hand(&a, &b, alpha0);
        if oracle.is_empty() {
            continue;
        }
        pairs += 1;
        let got = compare_corpora(&a, &b, &options, alpha0).map_err(|e| e.to_string())?;
        ensure(got.len() == oracle.len(), || {
            format!("{} terms vs oracle {}", got.len(), oracle.len())
        })?;
        for e in &got {
            let (d, v, z) = oracle[&e.term];
            for (x, y) in [(e.delta, d), (e.variance, v), (e.z, z)] {
                worst = worst.max((x - y).abs());
                ensure((x - y).abs() <= SALIENCE_TOL, || {
                    format!("term {} off by {}", e.term, (x - y).abs())
                })?;
            }
        }

        let swapped = compare_corpora(&b, &a, &options, alpha0).map_err(|e| e.to_string())?;
        let by_term: BTreeMap<&str, f64> = got.iter().map(|e| (e.term.as_str(), e.z)).collect();
        for e in &swapped {
            let z = by_term[e.term.as_str()];
            ensure((e.z + z).abs() <= ANTISYMMETRY_TOL, || {
                format!("antisymmetry off for {}", e.term)
            })?;
        }

        let same = compare_corpora(&a, &a, &options, alpha0).map_err(|e| e.to_string())?;
        ensure(same.iter().all(|e| e.z == 0.0), || {
            "identical corpora gave non-zero z".into()
        })?;
    }
    Ok(Verdict::Pass(format!(
        "100 pairs, max deviation {worst:.1e}"
    )))
}

fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| a[i][j] * a[i][j])
                    .sum::<f64>()
            })
            .sum();
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

fn pca_by_hand(x: &[Vec<f64>]) -> ([f64; 2], Vec<[f64; 2]>) {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let cov = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    x.iter()
                        .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                        .sum::<f64>()
                        / (n - 1) as f64
                })
                .collect()
        })
        .collect();
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v = &vectors[k];
            let mut lead = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[lead].abs() {
                    lead = i;
                }
            }
            let s = if v[lead] < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| s * x).collect()
        })
        .collect();
    let coords = x
        .iter()
        .map(|r| {
            let project = |a: &Vec<f64>| (0..d).map(|j| (r[j] - mean[j]) * a[j]).sum::<f64>();
            [project(&axes[0]), project(&axes[1])]
        })
        .collect();
    ([values[order[0]], values[order[1]]], coords)
}

fn tfidf_pca_oracles() -> Outcome {
    let docs: Vec<Vec<&str>> = vec![vec!["a", "b"], vec!["a", "c"], vec!["c", "c"]];
    let m = tfidf_from_documents(&docs, Exec::Parallel).map_err(|e| e.to_string())?;
    ensure(m.vocabulary == ["a", "b", "c"], || {
        format!("vocabulary {:?}", m.vocabulary)
    })?;
    // idf(a) = idf(c) = ln(4/3) + 1, idf(b) = ln 2 + 1; rows l2-normalized.
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [
        [0.6053485081062916, 0.7959605415681652, 0.0],
        [r, 0.0, r],
        [0.0, 0.0, 1.0],
    ];
    for (i, row) in expected.iter().enumerate() {
        let got = m.dense_row(i);
        for (g, e) in got.iter().zip(row) {
            ensure((g - e).abs() <= TFIDF_TOL, || {
                format!("tf-idf row {i}: {got:?}")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let x: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (ev, coords) = pca_by_hand(&x);
        let got = pca_2d_dense(&x, Exec::Parallel).map_err(|e| e.to_string())?;
        for k in 0..2 {
            worst = worst.max((got.explained_variance[k] - ev[k]).abs());
        }
        for (g, e) in got.coords.iter().zip(&coords) {
            for k in 0..2 {
                worst = worst.max((g[k] - e[k]).abs());
            }
        }
    }
    ensure(worst <= PCA_TOL, || format!("pca deviation {worst:e}"))?;

    for n in [2usize, 10, 100] {
        let docs: Vec<Vec<String>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..20))
                    .map(|_| format!("t{}", rng.random_range(0..30)))
                    .collect()
            })
            .collect();
        let m = tfidf_from_documents(&docs, Exec::Parallel).map_err(|e| e.to_string())?;
        let h = pairwise_similarity_histogram(&m, 20, Exec::Parallel).map_err(|e| e.to_string())?;
        let pairs = (n * (n - 1) / 2) as u64;
        ensure(h.samples as u64 == pairs, || {
            format!("N={n}: {} samples", h.samples)
        })?;
        ensure(h.counts.iter().sum::<u64>() == pairs, || {
            format!("N={n}: bins sum wrong")
        })?;
    }
    Ok(Verdict::Pass(format!(
        "tf-idf exact, 25 pca cases within {worst:.1e}, histogram counts exact"
    )))
}

/// Builds a dialogue from (speaker, token count) pairs.
fn shaped(rng: &mut ChaCha8Rng, turns: &[(Speaker, usize)]) -> Dialogue {
    let utterances = turns
        .iter()
        .map(|&(s, n)| {
            let u = Utterance::new(s, &sentence(rng, n)).unwrap();
            assert_eq!(u.token_len(), n, "fixture sentence length");
            u
        })
        .collect();
    Dialogue::new("boundary", Source::Completion, utterances).unwrap()
}

fn pattern(p: &str, len: usize) -> Vec<(Speaker, usize)> {
    p.chars()
        .map(|c| {
            (
                if c == 'S' {
                    Speaker::Seeker
                } else {
                    Speaker::Supporter
                },
                len,
            )
        })
        .collect()
}

fn threshold_boundaries() -> Outcome {
    use FilterRule::*;
    let t = FilterThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut long80 = pattern("SPSPSPSPSPS", 12);
    long80[3].1 = 80;
    let mut long81 = long80.clone();
    long81[3].1 = 81;
    let cases: Vec<(&str, Vec<(Speaker, usize)>, FilterVerdict)> = vec![
        (
            "10 vs 4 passes balance",
            pattern("SSSPSSSPSSPSPS", 12),
            FilterVerdict::Retained,
        ),
        (
            "11 vs 4 fails balance",
            pattern("SSSPSSSPSSSPSPS", 12),
            FilterVerdict::Removed(UnbalancedUtterances),
        ),
        (
            "run of 3 passes",
            pattern("SPPPSPSPSPS", 12),
            FilterVerdict::Retained,
        ),
        (
            "run of 4 fails",
            pattern("SPPPPSPSPSPS", 12),
            FilterVerdict::Removed(ConsecutiveUtterances),
        ),
        (
            "10 total fails",
            pattern("SPSPSPSPSP", 12),
            FilterVerdict::Removed(TotalUtterances),
        ),
        (
            "11 total passes",
            pattern("SPSPSPSPSPS", 12),
            FilterVerdict::Retained,
        ),
        ("80 tokens passes", long80, FilterVerdict::Retained),
        (
            "81 tokens fails",
            long81,
            FilterVerdict::Removed(UtteranceLength),
        ),
    ];
    for (name, turns, want) in &cases {
        let got = check_dialogue(&shaped(&mut rng, turns), &t);
        ensure(got == *want, || {
            format!("{name}: got {got:?}, want {want:?}")
        })?;
    }
    Ok(Verdict::Pass(format!(
        "{} boundary verdicts as specified",
        cases.len()
    )))
}

fn write_seeds(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("id,text,emotion_label\n");
    for i in 0..n {
        let len = rng.random_range(12..40);
        csv.push_str(&format!(
            "s{i:04},\"{}\",anxious\n",
            seed_post_text(&mut rng, len)
        ));
    }
    std::fs::write(path, csv).unwrap();
}

fn config_in(dir: &Path, seeds: &Path, epochs: u32, stages: Vec<Stage>) -> PipelineConfig {
    PipelineConfig {
        stages,
        paths: PathsConfig {
            seeds: seeds.to_path_buf(),
            work_dir: dir.join("work"),
            corpus_out: dir.join("out/corpus.jsonl"),
            reports_dir: dir.join("out/reports"),
            reference_corpus: None,
        },
        generation: GenerationParams {
            epochs,
            seed: 42,
            ..GenerationParams::default()
        },
        ..PipelineConfig::default()
    }
}

/// Relative path to contents, excluding the archived config (it embeds the
/// run's absolute paths).
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "effective_config.json" {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn hermetic_run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seeds = tmp.path().join("seeds.csv");
    write_seeds(&seeds, 1000, 6);
    let stages = vec![Stage::Ingest, Stage::Generate, Stage::Filter, Stage::Stats];
    let backend = MockBackend::new(MockConfig::default());

    let mut timings = Vec::new();
    let mut snapshots = Vec::new();
    for run in ["first", "second"] {
        let dir = tmp.path().join(run);
        let cfg = config_in(&dir, &seeds, 1, stages.clone());
        let start = Instant::now();
        run_pipeline_with(&cfg, &backend, None, None).map_err(|e| e.to_string())?;
        timings.push(start.elapsed());
        snapshots.push(snapshot(&dir));
    }
    let slowest = timings.iter().max().copied().unwrap();
    ensure(slowest < HERMETIC_RUNTIME_LIMIT, || {
        format!("run took {slowest:?}")
    })?;
    let (a, b) = (&snapshots[0], &snapshots[1]);
    ensure(a.keys().eq(b.keys()), || {
        "runs wrote different file sets".into()
    })?;
    for (path, bytes) in a {
        ensure(b[path] == *bytes, || {
            format!("{} differs between runs", path.display())
        })?;
    }
    let corpus: Vec<Dialogue> =
        jsonl::read_all(&tmp.path().join("first/out/corpus.jsonl")).map_err(|e| e.to_string())?;
    ensure(!corpus.is_empty(), || "empty corpus".into())?;
    Ok(Verdict::Pass(format!(
        "{} files byte-identical, {} dialogues retained, slowest run {slowest:?}",
        a.len(),
        corpus.len()
    )))
}

fn completions_at(dir: &Path) -> Vec<RawCompletion> {
    jsonl::read_all(&dir.join("work/run").join(COMPLETIONS_FILE)).unwrap()
}

fn append(path: &Path, bytes: &[u8]) {
    use std::io::Write;
    std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .unwrap()
        .write_all(bytes)
        .unwrap();
}

fn resumability() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seeds = tmp.path().join("seeds.csv");
    let (posts, epochs) = (60usize, 3u32);
    write_seeds(&seeds, posts, 7);
    let backend = MockBackend::new(MockConfig::default());
    let total = posts * epochs as usize;

    let reference_dir = tmp.path().join("reference");
    let reference_cfg = config_in(
        &reference_dir,
        &seeds,
        epochs,
        vec![Stage::Ingest, Stage::Generate],
    );
    run_pipeline_with(&reference_cfg, &backend, None, None).map_err(|e| e.to_string())?;
    let key = |c: &RawCompletion| (c.seed_post_id.clone(), c.epoch);
    let reference: BTreeMap<(String, u32), RawCompletion> = completions_at(&reference_dir)
        .into_iter()
        .map(|c| (key(&c), c))
        .collect();

    let dir = tmp.path().join("interrupted");
    let cfg = config_in(&dir, &seeds, epochs, vec![Stage::Ingest, Stage::Generate]);
    let run_dir = dir.join("work/run");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut kills = Vec::new();
    for _ in 0..10 {
        let step = rng.random_range(1..=total / 12);
        kills.push(step);
        run_pipeline_with(&cfg, &backend, None, Some(step)).map_err(|e| e.to_string())?;
        // Simulate the crash landing mid-write.
        let done: BTreeSet<(String, u32)> = completions_at(&dir).iter().map(key).collect();
        match rng.random_range(0..3) {
            0 => append(&run_dir.join(COMPLETIONS_FILE), br#"{"seed_post_id":"s00"#),
            1 => append(&run_dir.join(JOURNAL_FILE), br#"{"seed_post_id":"#),
            _ => {
                // Completion stored, journal entry lost.
                if let Some((_, c)) = reference.iter().find(|(k, _)| !done.contains(*k)) {
                    let mut line = serde_json::to_vec(c).unwrap();
                    line.push(b'\n');
                    append(&run_dir.join(COMPLETIONS_FILE), &line);
                }
            }
        }
    }
    let partial = completions_at(&dir).len();
    ensure(partial < total, || {
        "interruptions left nothing to resume".into()
    })?;

    run_pipeline_with(&cfg, &backend, None, None).map_err(|e| e.to_string())?;
    let resumed = completions_at(&dir);
    let keys: BTreeSet<(String, u32)> = resumed.iter().map(key).collect();
    ensure(resumed.len() == total, || {
        format!("{} completions, want {total}", resumed.len())
    })?;
    ensure(keys.len() == total, || {
        "duplicate (post, epoch) pairs".into()
    })?;
    for c in &resumed {
        ensure(reference.get(&key(c)) == Some(c), || {
            format!("{:?} differs from uninterrupted run", key(c))
        })?;
    }
    Ok(Verdict::Pass(format!(
        "kills after {kills:?} emissions, {partial} kept, resumed to {total} unique completions"
    )))
}

fn full_data() -> Outcome {
    // Always-on part: the mock detector's mean is exact.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus: Vec<Dialogue> = (0..20).map(|i| random_dialogue(&mut rng, i)).collect();
    let options = ToxicityOptions {
        rate_limit_per_sec: 0.0,
        ..ToxicityOptions::default()
    };
    let (profile, _) = assess_toxicity(
        &corpus,
        &MockScorer::Constant(MOCK_TOXICITY_CONSTANT),
        &options,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        profile
            .attribute_scores
            .values()
            .all(|&m| m == MOCK_TOXICITY_CONSTANT),
        || format!("mock means {:?}", profile.attribute_scores),
    )?;

    let (Ok(augmented), Ok(reference)) = (
        std::env::var("DIALAUG_AUGMENTED_CORPUS"),
        std::env::var("DIALAUG_REFERENCE_CORPUS"),
    ) else {
        return Ok(Verdict::Skip(
            "mock toxicity mean exact; set DIALAUG_AUGMENTED_CORPUS and DIALAUG_REFERENCE_CORPUS to corpus JSONL files for the rest".into(),
        ));
    };
    let augmented: Vec<Dialogue> =
        jsonl::read_all(Path::new(&augmented)).map_err(|e| e.to_string())?;
    let reference: Vec<Dialogue> =
        jsonl::read_all(Path::new(&reference)).map_err(|e| e.to_string())?;

    let stats = corpus_stats(&augmented, true, Exec::Parallel).map_err(|e| e.to_string())?;
    let within = |got: f64, want: f64| ((got - want) / want).abs() <= FULL_DATA_REL_TOL;
    ensure(
        (augmented.len() as f64 - 65_000.0).abs() / 65_000.0 <= SESSION_COUNT_REL_TOL,
        || format!("{} sessions", augmented.len()),
    )?;
    ensure(within(stats.avg_utterances_per_session, 26.7), || {
        format!("avg utterances {}", stats.avg_utterances_per_session)
    })?;
    ensure(within(stats.avg_utterance_tokens, 18.7), || {
        format!("avg utterance length {}", stats.avg_utterance_tokens)
    })?;

    let sample = dialaug_core::analytics::sample_sessions(&augmented, 1300, 42);
    let ranked = compare_corpora(&reference, &sample, &VocabOptions::default(), 1000.0)
        .map_err(|e| e.to_string())?;
    let top: BTreeSet<&str> = ranked.iter().take(30).map(|e| e.term.as_str()).collect();
    let table = [
        "pandemic",
        "covid",
        "depression",
        "support",
        "christmas",
        "job",
        "anxiety",
        "online",
        "vaccine",
        "zoom",
    ];
    let hits = table.iter().filter(|t| top.contains(*t)).count();
    ensure(hits >= 6, || {
        format!("{hits} of 10 reference terms in the top 30")
    })?;
    Ok(Verdict::Pass(format!(
        "statistics within tolerance, {hits}/10 reference terms recovered"
    )))
}
