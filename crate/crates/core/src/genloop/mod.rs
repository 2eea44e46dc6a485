//! Generation drivers: the epoch sweep over seed posts, the direct-prompt
//! variant, and turn-by-turn simulated chat.

mod simchat;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

pub use simchat::{simulate_chat, SimChatOptions};
pub use store::{Recovery, RunStore, COMPLETIONS_FILE, JOURNAL_FILE, MANIFEST_FILE};

use crate::backend::{
    request_seed, with_retry, BackendError, CompletionBackend, CompletionRequest, RetryPolicy,
};
use crate::error::{Error, Result};
use crate::prompt::{build_completion_prompt, FinishReason, PromptTemplate, RawCompletion};
use crate::types::{GenerationParams, SeedPost};

pub const DIRECT_PROMPT_MAX_NEW_TOKENS: u32 = 400;

/// Which `(seed, epoch)` pairs a run covers and which are done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seeds: Vec<String>,
    pub epochs: u32,
    pub completed: BTreeSet<(String, u32)>,
    pub gen_params: GenerationParams,
}

impl RunManifest {
    pub fn fresh(run_id: &str, posts: &[SeedPost], params: GenerationParams) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            seeds: posts.iter().map(|p| p.id.clone()).collect(),
            epochs: params.epochs,
            completed: BTreeSet::new(),
            gen_params: params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Manifest("epochs must be positive".into()));
        }
        let seeds: HashSet<&str> = self.seeds.iter().map(String::as_str).collect();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Manifest("seed ids are not unique".into()));
        }
        if let Some((id, epoch)) = self
            .completed
            .iter()
            .find(|(id, e)| !seeds.contains(id.as_str()) || *e == 0 || *e > self.epochs)
        {
            return Err(Error::Manifest(format!(
                "completed pair ({id}, {epoch}) is outside seeds x [1..{}]",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn total_pairs(&self) -> usize {
        self.seeds.len() * self.epochs as usize
    }

    pub fn is_finished(&self) -> bool {
        self.completed.len() == self.total_pairs()
    }

    /// Pairs still to generate, epoch-major in seed order.
    pub fn pending(&self) -> Vec<(usize, u32)> {
        (1..=self.epochs)
            .flat_map(|e| (0..self.seeds.len()).map(move |i| (i, e)))
            .filter(|(i, e)| !self.completed.contains(&(self.seeds[*i].clone(), *e)))
            .collect()
    }
}

/// Receives completions in emission order.
pub trait CompletionSink {
    fn accept(&mut self, completion: RawCompletion) -> Result<()>;
}

impl CompletionSink for Vec<RawCompletion> {
    fn accept(&mut self, completion: RawCompletion) -> Result<()> {
        self.push(completion);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Requests in flight at once.
    pub parallelism: usize,
    pub retry: RetryPolicy,
    /// Stop cleanly after this many emissions (partial runs, crash drills).
    pub halt_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: 4,
            retry: RetryPolicy::default(),
            halt_after: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub emitted: usize,
    pub backend_errors: usize,
    pub length_capped: usize,
    pub already_completed: usize,
    pub finished: bool,
}

/// Sweeps every seed post over `manifest.epochs`, emitting exactly one
/// completion per pending pair. Requests run on `parallelism` worker
/// threads; emissions are reordered so the sink sees them in job order, and
/// the manifest is updated after each one.
pub fn run_augmentation<S: CompletionSink>(
    posts: &[SeedPost],
    template: &PromptTemplate,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
    manifest: &mut RunManifest,
    sink: &mut S,
    options: &RunOptions,
) -> Result<RunSummary> {
    params.validate()?;
    manifest.validate()?;
    if manifest.seeds.len() != posts.len()
        || manifest.seeds.iter().zip(posts).any(|(id, p)| *id != p.id)
    {
        return Err(Error::Manifest(
            "manifest seeds do not match the seed posts".into(),
        ));
    }
    if manifest.epochs != params.epochs || manifest.gen_params != *params {
        return Err(Error::Manifest(
            "manifest was created with different generation parameters".into(),
        ));
    }

    let jobs = manifest.pending();
    let mut summary = RunSummary {
        already_completed: manifest.completed.len(),
        ..Default::default()
    };
    let limit = options.halt_after.unwrap_or(usize::MAX).min(jobs.len());
    let label = backend.label();
    let prompts: Vec<String> = posts
        .iter()
        .map(|p| build_completion_prompt(p, template))
        .collect();

    let next_job = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, std::result::Result<RawCompletion, BackendError>)>();

    let outcome = std::thread::scope(|scope| -> Result<()> {
        for _ in 0..options.parallelism.max(1).min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (jobs, prompts, next_job, stop, label) =
                (&jobs, &prompts, &next_job, &stop, &label);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let j = next_job.fetch_add(1, Ordering::Relaxed);
                if j >= limit {
                    break;
                }
                let (i, epoch) = jobs[j];
                let post = &posts[i];
                let request = CompletionRequest {
                    prompt: prompts[i].clone(),
                    nucleus_p: params.nucleus_p,
                    repetition_penalty: params.repetition_penalty,
                    max_new_tokens: params.max_new_tokens,
                    seed: request_seed(params.seed, &post.id, epoch),
                    stop: Vec::new(),
                };
                let result = match with_retry(&options.retry, || backend.complete(&request)) {
                    Ok(resp) => Ok(RawCompletion {
                        seed_post_id: post.id.clone(),
                        epoch,
                        prompt_text: request.prompt,
                        generated_text: resp.text,
                        finish_reason: resp.finish_reason,
                        gen_params: *params,
                        backend_label: label.clone(),
                        error: None,
                    }),
                    Err(BackendError::Auth(msg)) => Err(BackendError::Auth(msg)),
                    Err(e) => Ok(RawCompletion {
                        seed_post_id: post.id.clone(),
                        epoch,
                        prompt_text: request.prompt,
                        generated_text: String::new(),
                        finish_reason: FinishReason::BackendError,
                        gen_params: *params,
                        backend_label: label.clone(),
                        error: Some(e.to_string()),
                    }),
                };
                let fatal = result.is_err();
                if tx.send((j, result)).is_err() || fatal {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut next_emit = 0;
        let result = (|| {
            for (j, result) in rx.iter() {
                pending.insert(j, result);
                while let Some(result) = pending.remove(&next_emit) {
                    let completion = match result {
                        Ok(c) => c,
                        Err(e) => return Err(Error::Auth(e.to_string())),
                    };
                    let key = (completion.seed_post_id.clone(), completion.epoch);
                    match completion.finish_reason {
                        FinishReason::BackendError => summary.backend_errors += 1,
                        FinishReason::LengthCap => summary.length_capped += 1,
                        FinishReason::Eos => {}
                    }
                    sink.accept(completion)?;
                    manifest.completed.insert(key);
                    summary.emitted += 1;
                    next_emit += 1;
                    if next_emit == limit {
                        return Ok(());
                    }
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        result
    });
    outcome?;
    summary.finished = manifest.is_finished();
    Ok(summary)
}

/// Runs (or resumes) the sweep recorded in `store`, appending to its
/// completion store and journal.
pub fn run_into_store(
    posts: &[SeedPost],
    template: &PromptTemplate,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
    store: &mut RunStore,
    options: &RunOptions,
) -> Result<RunSummary> {
    let mut manifest = store.manifest().clone();
    let result = run_augmentation(
        posts,
        template,
        params,
        backend,
        &mut manifest,
        store,
        options,
    );
    *store.manifest_mut() = manifest;
    result
}

/// Single-epoch sweep with the generation length capped at 400 tokens, for
/// prompting a model that was never adapted to the dialogue format.
pub fn run_direct_prompt<S: CompletionSink>(
    posts: &[SeedPost],
    template: &PromptTemplate,
    params: &GenerationParams,
    backend: &dyn CompletionBackend,
    manifest: &mut RunManifest,
    sink: &mut S,
    options: &RunOptions,
) -> Result<RunSummary> {
    let params = direct_prompt_params(params);
    run_augmentation(posts, template, &params, backend, manifest, sink, options)
}

pub fn direct_prompt_params(params: &GenerationParams) -> GenerationParams {
    GenerationParams {
        max_new_tokens: DIRECT_PROMPT_MAX_NEW_TOKENS,
        epochs: 1,
        ..*params
    }
}
