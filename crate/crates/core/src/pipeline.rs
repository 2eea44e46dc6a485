//! Stage orchestration: ingest → generate → filter → stats, plus the
//! comparison report and toxicity assessment.
//!
//! Every artifact is written through a temp file and rename, and only when
//! its bytes change, so a rerun over a finished run touches nothing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{
    compare_corpora, corpus_stats, distinct_n, pairwise_similarity_histogram, pca_2d,
    sample_sessions, stats_table, svg, CorpusStats, DistinctScope, Pca2d, SalienceReport,
    SimilarityHistogram, TfidfMatrix, VocabOptions,
};
use crate::backend::{BackendDescriptor, CompletionBackend};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filters::{postprocess_corpus, FilterThresholds};
use crate::genloop::{run_into_store, RunManifest, RunOptions, RunStore, RunSummary};
use crate::ingest::{
    load_seed_posts, read_source, ScreeningReport, SeedScreeningConfig, SourceFields, SourceFormat,
};
use crate::jsonl;
use crate::prompt::PromptTemplate;
use crate::safety::{assess_toxicity, build_scorer, ToxicityOptions, ToxicityScorer};
use crate::types::{Dialogue, GenerationParams, SeedPost};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Generate,
    Filter,
    Stats,
    Report,
    Toxicity,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Stats => "stats",
            Stage::Report => "report",
            Stage::Toxicity => "toxicity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Seed-post source, CSV or JSON-Lines.
    pub seeds: PathBuf,
    /// Screened seed posts and the generation run store live here.
    pub work_dir: PathBuf,
    /// Filtered corpus, JSON-Lines.
    pub corpus_out: PathBuf,
    pub reports_dir: PathBuf,
    /// Corpus compared against in the stats table and report.
    pub reference_corpus: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            seeds: "seeds.csv".into(),
            work_dir: "work".into(),
            corpus_out: "out/corpus.jsonl".into(),
            reports_dir: "out/reports".into(),
            reference_corpus: None,
        }
    }
}

impl PathsConfig {
    pub fn seed_posts(&self) -> PathBuf {
        self.work_dir.join("seed_posts.jsonl")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.work_dir.join("run")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsOptions {
    pub drop_leading_supporter: bool,
    pub vocabulary: VocabOptions,
    pub alpha0: f64,
    pub top_k: usize,
    /// Sessions sampled from each corpus for salience and diversity; 0 keeps all.
    pub sample_size: usize,
    pub histogram_bins: usize,
    pub pca: bool,
    pub svg: bool,
    pub distinct_scope: DistinctScope,
}

impl Default for AnalyticsOptions {
    fn default() -> Self {
        AnalyticsOptions {
            drop_leading_supporter: true,
            vocabulary: VocabOptions::default(),
            alpha0: 1000.0,
            top_k: 30,
            sample_size: 1300,
            histogram_bins: 20,
            pca: true,
            svg: true,
            distinct_scope: DistinctScope::Supporter,
        }
    }
}

impl AnalyticsOptions {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            out.push(format!(
                "analytics.alpha0: must be positive, got {}",
                self.alpha0
            ));
        }
        if self.top_k == 0 {
            out.push("analytics.top_k: must be positive".into());
        }
        if self.histogram_bins == 0 {
            out.push("analytics.histogram_bins: must be positive".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToxicityConfig {
    pub detector: BackendDescriptor,
    pub rate_limit_per_sec: f64,
    pub concurrency: usize,
}

impl Default for ToxicityConfig {
    fn default() -> Self {
        ToxicityConfig {
            detector: BackendDescriptor::mock(),
            rate_limit_per_sec: 1.0,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub parallel: bool,
    /// Completion requests in flight at once.
    pub workers: usize,
    pub paths: PathsConfig,
    pub source_fields: SourceFields,
    pub screening: SeedScreeningConfig,
    pub template: PromptTemplate,
    pub generation: GenerationParams,
    pub filters: FilterThresholds,
    pub analytics: AnalyticsOptions,
    pub backend: BackendDescriptor,
    pub toxicity: ToxicityConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: vec![Stage::Ingest, Stage::Generate, Stage::Filter, Stage::Stats],
            parallel: true,
            workers: 4,
            paths: PathsConfig::default(),
            source_fields: SourceFields::default(),
            screening: SeedScreeningConfig::default(),
            template: PromptTemplate::default(),
            generation: GenerationParams::default(),
            filters: FilterThresholds::default(),
            analytics: AnalyticsOptions::default(),
            backend: BackendDescriptor::mock(),
            toxicity: ToxicityConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Field-level messages; empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stages.is_empty() {
            out.push("stages: at least one stage is required".into());
        }
        if self.workers == 0 {
            out.push("workers: must be positive".into());
        }
        for (name, p) in [
            ("paths.seeds", &self.paths.seeds),
            ("paths.work_dir", &self.paths.work_dir),
            ("paths.corpus_out", &self.paths.corpus_out),
            ("paths.reports_dir", &self.paths.reports_dir),
        ] {
            if p.as_os_str().is_empty() {
                out.push(format!("{name}: must not be empty"));
            }
        }
        if self.stages.contains(&Stage::Report) && self.paths.reference_corpus.is_none() {
            out.push("paths.reference_corpus: required by the report stage".into());
        }
        out.extend(
            self.screening
                .problems()
                .into_iter()
                .map(|p| format!("screening.{p}")),
        );
        out.extend(self.template.problems());
        out.extend(
            self.generation
                .problems()
                .into_iter()
                .map(|p| format!("generation.{p}")),
        );
        out.extend(self.filters.problems());
        out.extend(self.analytics.problems());
        out.extend(self.backend.problems("backend"));
        if self.stages.contains(&Stage::Toxicity) && self.toxicity.concurrency == 0 {
            out.push("toxicity.concurrency: must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(Error::Config(p.join("\n"))),
        }
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Requested stages in canonical order, without repeats.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub summary: String,
    /// Artifacts whose bytes changed in this invocation.
    pub written: Vec<PathBuf>,
}

/// Writes `bytes` atomically unless the file already holds exactly them.
/// Returns whether anything was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    jsonl::write_atomic(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))?;
    Ok(true)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    jsonl::write_lines(&mut v, records)?;
    Ok(v)
}

struct Writer {
    written: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        if write_if_changed(&path, bytes)? {
            self.written.push(path);
        }
        Ok(())
    }
}

/// Runs the configured stages using the backends the config describes.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    config.validate()?;
    let backend = config.backend.build()?;
    let scorer = if config.stages.contains(&Stage::Toxicity) {
        Some(build_scorer(&config.toxicity.detector)?)
    } else {
        None
    };
    run_pipeline_with(config, &*backend, scorer.as_deref(), None)
}

/// As [`run_pipeline`] with injected backends. `halt_after` stops the
/// generation stage after that many new completions.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    backend: &dyn CompletionBackend,
    scorer: Option<&dyn ToxicityScorer>,
    halt_after: Option<usize>,
) -> Result<Vec<StageOutcome>> {
    config.validate()?;
    let mut out = Vec::new();
    let mut w = Writer {
        written: Vec::new(),
    };
    w.put(
        config.paths.reports_dir.join("effective_config.json"),
        &json_bytes(config)?,
    )?;
    for stage in config.ordered_stages() {
        let summary = match stage {
            Stage::Ingest => stage_ingest(config, &mut w)?,
            Stage::Generate => stage_generate(config, backend, halt_after, &mut w)?,
            Stage::Filter => stage_filter(config, &mut w)?,
            Stage::Stats => stage_stats(config, &mut w)?,
            Stage::Report => stage_report(config, &mut w)?,
            Stage::Toxicity => {
                let scorer = scorer
                    .ok_or_else(|| Error::Config("toxicity stage needs a detector".into()))?;
                stage_toxicity(config, scorer, &mut w)?
            }
        };
        log::info!("{}: {summary}", stage.as_str());
        out.push(StageOutcome {
            stage,
            summary,
            written: std::mem::take(&mut w.written),
        });
    }
    Ok(out)
}

pub fn ingest_seed_posts(config: &PipelineConfig) -> Result<(Vec<SeedPost>, ScreeningReport)> {
    let p = &config.paths.seeds;
    let records = read_source(p, SourceFormat::from_path(p), &config.source_fields)?;
    Ok(load_seed_posts(records, &config.screening))
}

fn stage_ingest(config: &PipelineConfig, w: &mut Writer) -> Result<String> {
    let (posts, report) = ingest_seed_posts(config)?;
    if posts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    w.put(config.paths.seed_posts(), &jsonl_bytes(&posts)?)?;
    w.put(
        config.paths.reports_dir.join("screening.json"),
        &json_bytes(&report)?,
    )?;
    Ok(format!(
        "{} of {} seed posts retained",
        report.retained, report.total
    ))
}

fn read_seed_posts(config: &PipelineConfig) -> Result<Vec<SeedPost>> {
    jsonl::read_all(&config.paths.seed_posts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenerationReport {
    backend: String,
    run: RunSummary,
    total_completions: usize,
    repaired_bytes: u64,
}

fn stage_generate(
    config: &PipelineConfig,
    backend: &dyn CompletionBackend,
    halt_after: Option<usize>,
    w: &mut Writer,
) -> Result<String> {
    let posts = read_seed_posts(config)?;
    let fresh = RunManifest::fresh("run", &posts, config.generation);
    let mut store = RunStore::open(&config.paths.run_dir(), &fresh)?;
    if store.manifest().is_finished() {
        return Ok(format!(
            "already complete ({} completions)",
            store.manifest().completed.len()
        ));
    }
    let options = RunOptions {
        parallelism: config.workers,
        retry: config.backend.retry_policy(),
        halt_after,
    };
    let summary = run_into_store(
        &posts,
        &config.template,
        &config.generation,
        backend,
        &mut store,
        &options,
    )?;
    let report = GenerationReport {
        backend: backend.label(),
        total_completions: store.manifest().completed.len(),
        repaired_bytes: store.recovery().truncated_bytes,
        run: summary.clone(),
    };
    if summary.finished {
        w.put(
            config.paths.reports_dir.join("generation.json"),
            &json_bytes(&report)?,
        )?;
    }
    Ok(format!(
        "{} new completions, {}/{} done",
        summary.emitted,
        report.total_completions,
        store.manifest().total_pairs()
    ))
}

fn stage_filter(config: &PipelineConfig, w: &mut Writer) -> Result<String> {
    let posts = read_seed_posts(config)?;
    let fresh = RunManifest::fresh("run", &posts, config.generation);
    let store = RunStore::open(&config.paths.run_dir(), &fresh)?;
    if !store.manifest().is_finished() {
        return Err(Error::Manifest(format!(
            "generation is incomplete ({}/{}); rerun the generate stage first",
            store.manifest().completed.len(),
            store.manifest().total_pairs()
        )));
    }
    let mut completions = store.read_completions()?;
    completions.sort_by(|a, b| (a.epoch, &a.seed_post_id).cmp(&(b.epoch, &b.seed_post_id)));
    let out = postprocess_corpus(
        &completions,
        &posts,
        &config.template,
        &config.filters,
        config.exec(),
    );
    w.put(
        config.paths.corpus_out.clone(),
        &jsonl_bytes(&out.retained)?,
    )?;
    w.put(
        config.paths.reports_dir.join("filter_report.json"),
        &json_bytes(&out.report)?,
    )?;
    w.put(
        config.paths.reports_dir.join("filter_report.txt"),
        out.report.to_table().as_bytes(),
    )?;
    Ok(format!(
        "{} of {} completions retained ({:.1}%)",
        out.report.retained,
        out.report.total,
        100.0 * out.report.retention_ratio
    ))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    jsonl::read_all(path)
}

fn corpus_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned())
}

fn stage_stats(config: &PipelineConfig, w: &mut Writer) -> Result<String> {
    let corpus = read_corpus(&config.paths.corpus_out)?;
    let stats = corpus_stats(
        &corpus,
        config.analytics.drop_leading_supporter,
        config.exec(),
    )?;
    let name = corpus_name(&config.paths.corpus_out);
    let mut columns = vec![(name.clone(), stats.clone())];
    if let Some(r) = &config.paths.reference_corpus {
        let reference = read_corpus(r)?;
        columns.insert(
            0,
            (
                corpus_name(r),
                corpus_stats(
                    &reference,
                    config.analytics.drop_leading_supporter,
                    config.exec(),
                )?,
            ),
        );
    }
    let table = stats_table(
        &columns
            .iter()
            .map(|(n, s)| (n.as_str(), s))
            .collect::<Vec<_>>(),
    );
    w.put(
        config.paths.reports_dir.join("stats.json"),
        &json_bytes(&stats)?,
    )?;
    w.put(config.paths.reports_dir.join("stats.txt"), table.as_bytes())?;
    Ok(format!(
        "{} sessions, {:.1} utterances each",
        stats.sessions, stats.avg_utterances_per_session
    ))
}

fn stage_report(config: &PipelineConfig, w: &mut Writer) -> Result<String> {
    let reference = config.paths.reference_corpus.as_ref().expect("validated");
    let a = read_corpus(reference)?;
    let b = read_corpus(&config.paths.corpus_out)?;
    let report = compare(
        (&corpus_name(reference), &a),
        (&corpus_name(&config.paths.corpus_out), &b),
        &config.analytics,
        config.generation.seed,
        config.exec(),
    )?;
    for (name, bytes) in report.artifacts(config.analytics.svg)? {
        w.put(config.paths.reports_dir.join("report").join(name), &bytes)?;
    }
    Ok(format!("compared {} and {} sessions", a.len(), b.len()))
}

fn stage_toxicity(
    config: &PipelineConfig,
    scorer: &dyn ToxicityScorer,
    w: &mut Writer,
) -> Result<String> {
    let corpus = read_corpus(&config.paths.corpus_out)?;
    let options = ToxicityOptions {
        rate_limit_per_sec: config.toxicity.rate_limit_per_sec,
        concurrency: config.toxicity.concurrency,
        retry: config.toxicity.detector.retry_policy(),
        ..ToxicityOptions::default()
    };
    let (profile, scores) = assess_toxicity(&corpus, scorer, &options)?;
    w.put(
        config.paths.reports_dir.join("toxicity.json"),
        &json_bytes(&profile)?,
    )?;
    w.put(
        config.paths.reports_dir.join("toxicity_scores.jsonl"),
        &jsonl_bytes(&scores)?,
    )?;
    Ok(format!(
        "{} utterances scored, {} failed",
        profile.scored_utterances, profile.failed_utterances
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctScores {
    pub distinct_2: f64,
    pub distinct_3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub names: [String; 2],
    pub stats: [CorpusStats; 2],
    pub salience: SalienceReport,
    pub histograms: [SimilarityHistogram; 2],
    pub distinct: [DistinctScores; 2],
    pub pca: Option<Pca2d>,
    /// `<corpus name>:<dialogue id>` per PCA row.
    pub pca_labels: Vec<String>,
}

impl ComparisonReport {
    /// File name and contents of every report artifact.
    pub fn artifacts(&self, with_svg: bool) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = vec![
            (
                "stats.txt".to_string(),
                stats_table(&[
                    (&self.names[0], &self.stats[0]),
                    (&self.names[1], &self.stats[1]),
                ])
                .into_bytes(),
            ),
            ("salience.json".into(), json_bytes(&self.salience)?),
            ("salience.txt".into(), self.salience.to_text().into_bytes()),
            ("distinct.json".into(), json_bytes(&self.distinct)?),
        ];
        for (name, h) in self.names.iter().zip(&self.histograms) {
            out.push((format!("similarity_{name}.csv"), h.to_csv().into_bytes()));
        }
        if let Some(p) = &self.pca {
            out.push(("pca.csv".into(), p.to_csv(&self.pca_labels).into_bytes()));
            out.push((
                "pca_summary.json".into(),
                json_bytes(&serde_json::json!({
                    "route": p.route,
                    "explained_variance": p.explained_variance,
                    "total_variance": p.total_variance,
                }))?,
            ));
        }
        if with_svg {
            let hs: Vec<(&str, &SimilarityHistogram)> = self
                .names
                .iter()
                .map(String::as_str)
                .zip(self.histograms.iter())
                .collect();
            out.push((
                "similarity.svg".into(),
                svg::histogram_svg("TF-IDF similarity", &hs).into_bytes(),
            ));
            if let Some(p) = &self.pca {
                let prefix = format!("{}:", self.names[0]);
                let (first, second): (Vec<_>, Vec<_>) = p
                    .coords
                    .iter()
                    .zip(&self.pca_labels)
                    .partition(|(_, l)| l.starts_with(&prefix));
                let a: Vec<[f64; 2]> = first.into_iter().map(|(c, _)| *c).collect();
                let b: Vec<[f64; 2]> = second.into_iter().map(|(c, _)| *c).collect();
                let series = [
                    (self.names[0].as_str(), a.as_slice()),
                    (self.names[1].as_str(), b.as_slice()),
                ];
                out.push((
                    "pca.svg".into(),
                    svg::scatter_svg("PCA of TF-IDF vectors", &series).into_bytes(),
                ));
            }
        }
        Ok(out)
    }
}

/// Side-by-side statistics, salience, diversity and distinct-n of two corpora.
/// Salience and diversity run on seeded samples of `sample_size` sessions.
pub fn compare(
    a: (&str, &[Dialogue]),
    b: (&str, &[Dialogue]),
    options: &AnalyticsOptions,
    seed: u64,
    exec: Exec,
) -> Result<ComparisonReport> {
    let sample = |c: &[Dialogue]| {
        if options.sample_size == 0 {
            c.to_vec()
        } else {
            sample_sessions(c, options.sample_size, seed)
        }
    };
    let (sa, sb) = (sample(a.1), sample(b.1));
    let stats = [
        corpus_stats(a.1, options.drop_leading_supporter, exec)?,
        corpus_stats(b.1, options.drop_leading_supporter, exec)?,
    ];
    let ranked = compare_corpora(&sa, &sb, &options.vocabulary, options.alpha0)?;
    let salience = SalienceReport::from_ranked((a.0, b.0), &ranked, options.top_k);

    let mut union = sa.clone();
    union.extend(sb.iter().cloned());
    let m = crate::analytics::tfidf_matrix(&union, exec)?;
    let subset = |range: std::ops::Range<usize>| TfidfMatrix {
        vocabulary: m.vocabulary.clone(),
        idf: m.idf.clone(),
        rows: m.rows[range].to_vec(),
    };
    let histograms = [
        pairwise_similarity_histogram(&subset(0..sa.len()), options.histogram_bins, exec)?,
        pairwise_similarity_histogram(
            &subset(sa.len()..union.len()),
            options.histogram_bins,
            exec,
        )?,
    ];
    let pca = if options.pca {
        Some(pca_2d(&m, exec)?)
    } else {
        None
    };
    let pca_labels = sa
        .iter()
        .map(|d| format!("{}:{}", a.0, d.id))
        .chain(sb.iter().map(|d| format!("{}:{}", b.0, d.id)))
        .collect();
    let distinct = |c: &[Dialogue]| DistinctScores {
        distinct_2: distinct_n(c, 2, options.distinct_scope),
        distinct_3: distinct_n(c, 3, options.distinct_scope),
    };
    Ok(ComparisonReport {
        names: [a.0.to_string(), b.0.to_string()],
        stats,
        salience,
        histograms,
        distinct: [distinct(a.1), distinct(b.1)],
        pca,
        pca_labels,
    })
}
