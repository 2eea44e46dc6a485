use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dialaug_core::analytics::{
    compare_corpora, corpus_stats, distinct_n, pairwise_similarity_histogram, pca_2d,
    sample_sessions, stats_table, svg, tfidf_matrix, DistinctScope, SalienceReport,
};
use dialaug_core::genloop::{
    direct_prompt_params, run_into_store, simulate_chat, RunManifest, RunOptions, RunStore,
    SimChatOptions,
};
use dialaug_core::mockserver::{MockServer, MockServerConfig};
use dialaug_core::pipeline::{
    compare, read_corpus, run_pipeline, write_if_changed, PipelineConfig, Stage, StageOutcome,
};
use dialaug_core::prompt::export_finetune_record;
use dialaug_core::safety::{assess_toxicity, build_scorer, MockScorer, ToxicityOptions};
use dialaug_core::{jsonl, Dialogue, Error, SeedPost};

/// Dialogue corpus augmentation: seed screening, completion runs, heuristic
/// filtering and corpus analytics.
#[derive(Parser)]
#[command(name = "dialaug", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation and sampling; overrides `generation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Place the work dir, corpus and reports under this directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Screen seed posts from the configured source.
    Ingest {
        /// Overrides `paths.seeds`.
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
    /// Generate (or resume) completions for every seed post and epoch.
    Generate {
        /// Stop after this many new completions.
        #[arg(long)]
        halt_after: Option<usize>,
        /// Single epoch, 400-token cap, stored under `<work_dir>/direct`.
        #[arg(long)]
        direct: bool,
    },
    /// Simulate seeker/supporter chats seeded by the screened posts.
    Simchat {
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 40)]
        max_utterances: usize,
        #[arg(long, default_value = "bye")]
        stop_word: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and filter the completion store into the output corpus.
    Filter,
    /// Corpus statistics; without arguments, of the output corpus.
    Stats {
        corpora: Vec<PathBuf>,
        /// Keep supporter turns that precede the first seeker turn.
        #[arg(long)]
        keep_leading_supporter: bool,
    },
    /// Terms most characteristic of each of two corpora.
    Salience {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Sessions sampled per corpus (0 keeps all).
        #[arg(long)]
        sample: Option<usize>,
    },
    /// TF-IDF similarity histogram and PCA coordinates of one corpus.
    Diversity {
        corpus: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Distinct-n of a corpus.
    Distinct {
        corpus: PathBuf,
        #[arg(short, long, default_value_t = 2)]
        n: usize,
        #[arg(long, value_enum, default_value_t = ScopeArg::Supporter)]
        scope: ScopeArg,
    },
    /// Score utterances with the toxicity detector.
    Toxicity {
        corpus: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Side-by-side comparison of a reference corpus and an augmented one.
    Report {
        reference: PathBuf,
        augmented: PathBuf,
    },
    /// Write fine-tuning records with loss spans.
    ExportFinetune {
        corpus: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the stages listed in the config.
    Pipeline,
    /// Print the effective configuration as TOML.
    Config,
    /// Serve the mock completion and toxicity endpoints until killed.
    MockServer(MockServerArgs),
}

#[derive(Args)]
struct MockServerArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    bind: String,
    /// Require `Authorization: Bearer <token>`.
    #[arg(long)]
    require_token: Option<String>,
    /// Answer every n-th request with 503.
    #[arg(long)]
    transient_every: Option<u64>,
    /// Constant toxicity score instead of hashed pseudo-scores.
    #[arg(long)]
    toxicity_constant: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Supporter,
    All,
}

impl From<ScopeArg> for DistinctScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Supporter => DistinctScope::Supporter,
            ScopeArg::All => DistinctScope::All,
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.generation.seed = seed;
    }
    if let Some(out) = &cli.out_dir {
        cfg.paths.work_dir = out.join("work");
        cfg.paths.corpus_out = out.join("corpus.jsonl");
        cfg.paths.reports_dir = out.join("reports");
    }
    if cli.sequential {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn with_stages(cfg: &PipelineConfig, stages: &[Stage]) -> PipelineConfig {
    PipelineConfig {
        stages: stages.to_vec(),
        ..cfg.clone()
    }
}

fn print_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        println!("{}: {}", o.stage.as_str(), o.summary);
        for p in &o.written {
            println!("  wrote {}", p.display());
        }
    }
}

fn put(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if write_if_changed(path, bytes)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn corpus_label(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let exec = cfg.exec();
    let reports = cfg.paths.reports_dir.clone();
    match cli.command {
        Command::Ingest { seeds } => {
            if let Some(s) = seeds {
                cfg.paths.seeds = s;
            }
            print_outcomes(&run_pipeline(&with_stages(&cfg, &[Stage::Ingest]))?);
        }
        Command::Generate { halt_after, direct } => {
            cfg.validate()?;
            let posts: Vec<SeedPost> = jsonl::read_all(&cfg.paths.seed_posts())
                .context("no screened seed posts; run `dialaug ingest` first")?;
            let params = if direct {
                direct_prompt_params(&cfg.generation)
            } else {
                cfg.generation
            };
            let dir = if direct {
                cfg.paths.work_dir.join("direct")
            } else {
                cfg.paths.run_dir()
            };
            let mut store = RunStore::open(&dir, &RunManifest::fresh("run", &posts, params))?;
            let r = store.recovery();
            if r.truncated_bytes > 0 || r.journaled_from_store > 0 || r.dropped_from_journal > 0 {
                println!("recovered run store: {r:?}");
            }
            let backend = cfg.backend.build()?;
            let options = RunOptions {
                parallelism: cfg.workers,
                retry: cfg.backend.retry_policy(),
                halt_after,
            };
            let s = run_into_store(
                &posts,
                &cfg.template,
                &params,
                &*backend,
                &mut store,
                &options,
            )?;
            println!(
                "generate: {} new completions ({} backend errors, {} length-capped), {}/{} done",
                s.emitted,
                s.backend_errors,
                s.length_capped,
                store.manifest().completed.len(),
                store.manifest().total_pairs()
            );
        }
        Command::Simchat {
            limit,
            max_utterances,
            stop_word,
            output,
        } => {
            cfg.validate()?;
            let mut posts: Vec<SeedPost> = jsonl::read_all(&cfg.paths.seed_posts())
                .context("no screened seed posts; run `dialaug ingest` first")?;
            posts.truncate(limit.unwrap_or(posts.len()));
            let backend = cfg.backend.build()?;
            let options = SimChatOptions {
                max_utterances,
                stop_word,
                retry: cfg.backend.retry_policy(),
            };
            let chats: Vec<Dialogue> = exec
                .map(&posts, |p| {
                    simulate_chat(
                        p,
                        &*backend,
                        &*backend,
                        &cfg.template,
                        &cfg.generation,
                        &options,
                    )
                })
                .into_iter()
                .collect::<Result<_, _>>()?;
            let out = output.unwrap_or_else(|| cfg.paths.work_dir.join("simchat.jsonl"));
            let mut bytes = Vec::new();
            jsonl::write_lines(&mut bytes, &chats)?;
            put(&out, &bytes)?;
            println!("simchat: {} dialogues", chats.len());
        }
        Command::Filter => print_outcomes(&run_pipeline(&with_stages(&cfg, &[Stage::Filter]))?),
        Command::Stats {
            corpora,
            keep_leading_supporter,
        } => {
            if corpora.is_empty() {
                cfg.analytics.drop_leading_supporter = !keep_leading_supporter;
                print_outcomes(&run_pipeline(&with_stages(&cfg, &[Stage::Stats]))?);
                print!("{}", std::fs::read_to_string(reports.join("stats.txt"))?);
            } else {
                let mut columns = Vec::new();
                for p in &corpora {
                    let c = read_corpus(p)?;
                    columns.push((
                        corpus_label(p),
                        corpus_stats(&c, !keep_leading_supporter, exec)?,
                    ));
                }
                print!(
                    "{}",
                    stats_table(
                        &columns
                            .iter()
                            .map(|(n, s)| (n.as_str(), s))
                            .collect::<Vec<_>>()
                    )
                );
            }
        }
        Command::Salience {
            a,
            b,
            top_k,
            sample,
        } => {
            let k = sample.unwrap_or(cfg.analytics.sample_size);
            let pick = |c: Vec<Dialogue>| {
                if k == 0 {
                    c
                } else {
                    sample_sessions(&c, k, cfg.generation.seed)
                }
            };
            let (ca, cb) = (pick(read_corpus(&a)?), pick(read_corpus(&b)?));
            let ranked =
                compare_corpora(&ca, &cb, &cfg.analytics.vocabulary, cfg.analytics.alpha0)?;
            let report = SalienceReport::from_ranked(
                (&corpus_label(&a), &corpus_label(&b)),
                &ranked,
                top_k.unwrap_or(cfg.analytics.top_k),
            );
            print!("{}", report.to_text());
            put(&reports.join("salience.json"), &json(&report)?)?;
        }
        Command::Diversity {
            corpus,
            bins,
            sample,
        } => {
            let k = sample.unwrap_or(cfg.analytics.sample_size);
            let c = read_corpus(&corpus)?;
            let c = if k == 0 {
                c
            } else {
                sample_sessions(&c, k, cfg.generation.seed)
            };
            let m = tfidf_matrix(&c, exec)?;
            let h = pairwise_similarity_histogram(
                &m,
                bins.unwrap_or(cfg.analytics.histogram_bins),
                exec,
            )?;
            let p = pca_2d(&m, exec)?;
            let name = corpus_label(&corpus);
            let ids: Vec<String> = c.iter().map(|d| d.id.clone()).collect();
            println!(
                "{name}: {} documents, {} pairs, mean similarity {:.4}, explained variance ({:.4}, {:.4})",
                m.n_docs(),
                h.samples,
                h.mean,
                p.explained_variance[0],
                p.explained_variance[1]
            );
            put(
                &reports.join(format!("similarity_{name}.csv")),
                h.to_csv().as_bytes(),
            )?;
            put(
                &reports.join(format!("pca_{name}.csv")),
                p.to_csv(&ids).as_bytes(),
            )?;
            if cfg.analytics.svg {
                put(
                    &reports.join(format!("similarity_{name}.svg")),
                    svg::histogram_svg(&name, &[(&name, &h)]).as_bytes(),
                )?;
                put(
                    &reports.join(format!("pca_{name}.svg")),
                    svg::scatter_svg(&name, &[(&name, &p.coords)]).as_bytes(),
                )?;
            }
        }
        Command::Distinct { corpus, n, scope } => {
            let c = read_corpus(&corpus)?;
            println!("distinct-{n}: {:.4}", distinct_n(&c, n, scope.into()));
        }
        Command::Toxicity { corpus, rate } => {
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus_out.clone());
            let c = read_corpus(&corpus)?;
            let scorer = build_scorer(&cfg.toxicity.detector)?;
            let options = ToxicityOptions {
                rate_limit_per_sec: rate.unwrap_or(cfg.toxicity.rate_limit_per_sec),
                concurrency: cfg.toxicity.concurrency,
                retry: cfg.toxicity.detector.retry_policy(),
                ..ToxicityOptions::default()
            };
            let (profile, scores) = assess_toxicity(&c, &*scorer, &options)?;
            print!("{}", profile.to_table());
            put(&reports.join("toxicity.json"), &json(&profile)?)?;
            let mut bytes = Vec::new();
            jsonl::write_lines(&mut bytes, &scores)?;
            put(&reports.join("toxicity_scores.jsonl"), &bytes)?;
        }
        Command::Report {
            reference,
            augmented,
        } => {
            let (a, b) = (read_corpus(&reference)?, read_corpus(&augmented)?);
            let report = compare(
                (&corpus_label(&reference), &a),
                (&corpus_label(&augmented), &b),
                &cfg.analytics,
                cfg.generation.seed,
                exec,
            )?;
            print!(
                "{}",
                stats_table(&[
                    (&report.names[0], &report.stats[0]),
                    (&report.names[1], &report.stats[1])
                ])
            );
            println!();
            print!("{}", report.salience.to_text());
            for (name, bytes) in report.artifacts(cfg.analytics.svg)? {
                put(&reports.join("report").join(name), &bytes)?;
            }
        }
        Command::ExportFinetune { corpus, output } => {
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus_out.clone());
            let c = read_corpus(&corpus)?;
            let records: Vec<_> = c
                .iter()
                .map(|d| export_finetune_record(d, &cfg.template))
                .collect();
            let mut bytes = Vec::new();
            jsonl::write_lines(&mut bytes, &records)?;
            let out = output.unwrap_or_else(|| corpus.with_file_name("finetune.jsonl"));
            put(&out, &bytes)?;
            println!("export-finetune: {} records", records.len());
        }
        Command::Pipeline => print_outcomes(&run_pipeline(&cfg)?),
        Command::Config => print!("{}", toml::to_string_pretty(&cfg)?),
        Command::MockServer(args) => {
            let server = MockServer::start(
                &args.bind,
                MockServerConfig {
                    completion: cfg.backend.mock.clone(),
                    toxicity: args
                        .toxicity_constant
                        .map_or(MockScorer::Hashed, MockScorer::Constant),
                    required_token: args.require_token,
                    transient_every: args.transient_every,
                },
            )?;
            println!("listening on http://{}", server.addr());
            println!("  completions: {}", server.completions_url());
            println!("  toxicity:    {}", server.toxicity_url());
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Config(msg)) => {
                    eprintln!("error: invalid configuration");
                    for line in msg.lines() {
                        eprintln!("  {line}");
                    }
                    return ExitCode::from(2);
                }
                Some(Error::Auth(msg)) => eprintln!("error: authentication failed: {msg}"),
                _ => {
                    eprintln!("error: {e}");
                    for cause in e.chain().skip(1) {
                        eprintln!("  caused by: {cause}");
                    }
                }
            }
            ExitCode::FAILURE
        }
    }
}
