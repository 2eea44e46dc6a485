//! File-backed run state.
//!
//! A run directory holds three files:
//!
//! - `manifest.json`: run id, seed ids, epochs and decoding parameters;
//!   written once when the run is created.
//! - `completions.jsonl`: the raw-completion store, one record per line.
//! - `journal.jsonl`: append-only log of completed `(seed_post_id, epoch)`
//!   pairs.
//!
//! Each emission appends the completion first and the journal entry second.
//! On open, a torn trailing line in either file is cut off, completions that
//! never made it into the journal are journaled, and journal entries without
//! a stored completion are dropped so they get regenerated.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CompletionSink, RunManifest};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::prompt::RawCompletion;
use crate::types::GenerationParams;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPLETIONS_FILE: &str = "completions.jsonl";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    run_id: String,
    seeds: Vec<String>,
    epochs: u32,
    gen_params: GenerationParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JournalEntry {
    seed_post_id: String,
    epoch: u32,
}

/// What `RunStore::open` had to repair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovery {
    pub truncated_bytes: u64,
    pub journaled_from_store: usize,
    pub dropped_from_journal: usize,
}

pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    completions: File,
    journal: File,
    recovery: Recovery,
}

impl RunStore {
    /// Opens the run in `dir`, creating it from `fresh` when no manifest
    /// exists. An existing manifest must describe the same seeds, epochs and
    /// parameters as `fresh`.
    pub fn open(dir: &Path, fresh: &RunManifest) -> Result<RunStore> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header_path = dir.join(MANIFEST_FILE);
        let wanted = ManifestHeader {
            run_id: fresh.run_id.clone(),
            seeds: fresh.seeds.clone(),
            epochs: fresh.epochs,
            gen_params: fresh.gen_params,
        };
        let header = if header_path.exists() {
            let text =
                std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
            let existing: ManifestHeader = serde_json::from_str(&text)?;
            if existing.seeds != wanted.seeds
                || existing.epochs != wanted.epochs
                || existing.gen_params != wanted.gen_params
            {
                return Err(Error::Manifest(format!(
                    "{} describes a different run (seeds, epochs or parameters changed)",
                    header_path.display()
                )));
            }
            existing
        } else {
            jsonl::write_json_atomic(&header_path, &wanted)?;
            wanted
        };

        let mut recovery = Recovery::default();
        let store_path = dir.join(COMPLETIONS_FILE);
        let journal_path = dir.join(JOURNAL_FILE);
        let (stored, cut) = load_and_repair::<RawCompletion>(&store_path)?;
        recovery.truncated_bytes += cut;
        let (journal, cut) = load_and_repair::<JournalEntry>(&journal_path)?;
        recovery.truncated_bytes += cut;

        let mut in_store = HashSet::new();
        for c in &stored {
            if !in_store.insert((c.seed_post_id.clone(), c.epoch)) {
                return Err(Error::Manifest(format!(
                    "{} holds ({}, {}) twice",
                    store_path.display(),
                    c.seed_post_id,
                    c.epoch
                )));
            }
        }
        let journaled: BTreeSet<(String, u32)> = journal
            .iter()
            .map(|j| (j.seed_post_id.clone(), j.epoch))
            .collect();
        let completed: BTreeSet<(String, u32)> = journaled
            .intersection(&in_store.iter().cloned().collect())
            .cloned()
            .collect();
        recovery.dropped_from_journal = journaled.len() - completed.len();
        let missing: Vec<_> = stored
            .iter()
            .map(|c| (c.seed_post_id.clone(), c.epoch))
            .filter(|k| !journaled.contains(k))
            .collect();
        recovery.journaled_from_store = missing.len();

        if recovery.dropped_from_journal > 0 {
            let keep: Vec<_> = journal
                .into_iter()
                .filter(|j| completed.contains(&(j.seed_post_id.clone(), j.epoch)))
                .collect();
            jsonl::write_all_atomic(&journal_path, &keep)?;
        }

        let manifest = RunManifest {
            run_id: header.run_id,
            seeds: header.seeds,
            epochs: header.epochs,
            completed,
            gen_params: header.gen_params,
        };
        manifest.validate()?;

        let open_append = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let mut store = RunStore {
            dir: dir.to_path_buf(),
            manifest,
            completions: open_append(&store_path)?,
            journal: open_append(&journal_path)?,
            recovery,
        };
        for (seed_post_id, epoch) in missing {
            store.append_journal(&seed_post_id, epoch)?;
            store.manifest.completed.insert((seed_post_id, epoch));
        }
        if store.recovery != Recovery::default() {
            log::warn!(
                "recovered run state in {}: {:?}",
                dir.display(),
                store.recovery
            );
        }
        Ok(store)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn completions_path(&self) -> PathBuf {
        self.dir.join(COMPLETIONS_FILE)
    }

    /// Every stored completion, in store order.
    pub fn read_completions(&self) -> Result<Vec<RawCompletion>> {
        jsonl::read_all(&self.completions_path())
    }

    fn append_journal(&mut self, seed_post_id: &str, epoch: u32) -> Result<()> {
        let entry = JournalEntry {
            seed_post_id: seed_post_id.to_string(),
            epoch,
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        self.journal
            .write_all(&line)
            .and_then(|()| self.journal.flush())
            .map_err(|e| Error::io(self.dir.join(JOURNAL_FILE), e))
    }
}

impl CompletionSink for RunStore {
    fn accept(&mut self, completion: RawCompletion) -> Result<()> {
        let mut line = serde_json::to_vec(&completion)?;
        line.push(b'\n');
        self.completions
            .write_all(&line)
            .and_then(|()| self.completions.flush())
            .map_err(|e| Error::io(self.dir.join(COMPLETIONS_FILE), e))?;
        self.append_journal(&completion.seed_post_id, completion.epoch)
    }
}

/// Reads a JSON-Lines file, cutting off a torn final line (no trailing
/// newline or unparsable). A bad line anywhere else is an error.
fn load_and_repair<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Vec<T>, u64)> {
    if !path.exists() {
        return Ok((Vec::new(), 0));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut good_end = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.last() == Some(&b'\n');
        let parsed = std::str::from_utf8(&buf)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|s| serde_json::from_str::<T>(s.trim_end()));
        match parsed {
            None if complete => good_end += n as u64,
            Some(Ok(v)) if complete => {
                out.push(v);
                good_end += n as u64;
            }
            _ if good_end + n as u64 == total => break,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "corrupt record before end of file".into(),
                })
            }
        }
    }
    let cut = total - good_end;
    if cut > 0 {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(good_end).map_err(|e| Error::io(path, e))?;
    }
    Ok((out, cut))
}
