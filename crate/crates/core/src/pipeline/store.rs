//! On-disk layout of a run:
//!
//! ```text
//! <run>/run.json              seed and schema
//! <run>/pretrained.ckpt
//! <run>/iter<i>/dataset.jsonl  cumulative real dataset after iteration i
//! <run>/iter<i>/model.ckpt
//! <run>/iter<i>/candidates/<id>.ckpt, <id>.stats.jsonl
//! <run>/iter<i>/elites/<id>.ckpt
//! <run>/iter<i>/best.ckpt
//! <run>/iter<i>/record.json
//! ```
//!
//! Each iteration directory is assembled under a temporary name and renamed
//! into place, so a crash leaves either a whole iteration or none.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IterationOutput, IterationRecord, LoopState, RECORD_SCHEMA};
use crate::error::{Error, Result};
use crate::measurement::RealDataset;
use crate::persist::{check_schema, read_json, write_atomic, write_json};
use crate::policy::PolicyCheckpoint;
use crate::rl::UpdateStats;

pub const RUN_SCHEMA: &str = "powertune.run/1";
const STATS_SCHEMA: &str = "powertune.update-stats/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    schema: String,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }

    pub fn iter_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("iter{i}"))
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    /// Write the pre-trained policy and run metadata. Refuses to overwrite.
    pub fn init(&self, pretrained: &PolicyCheckpoint, seed: u64) -> Result<()> {
        if self.pretrained_path().exists() {
            return Err(Error::rejected(format!("{} already holds a pre-trained policy", self.root.display())));
        }
        write_json(&self.root.join("run.json"), &RunMeta { schema: RUN_SCHEMA.into(), seed })?;
        pretrained.save(&self.pretrained_path())
    }

    pub fn seed(&self) -> Result<u64> {
        let path = self.root.join("run.json");
        let meta: RunMeta = read_json(&path)?;
        check_schema(&path, &meta.schema, RUN_SCHEMA)?;
        Ok(meta.seed)
    }

    /// Completed iterations, counted as the unbroken prefix iter0, iter1, ...
    pub fn completed(&self) -> usize {
        (0..).take_while(|&i| self.iter_dir(i).join("record.json").is_file()).count()
    }

    pub fn record(&self, i: usize) -> Result<IterationRecord> {
        let path = self.iter_dir(i).join("record.json");
        let r: IterationRecord = read_json(&path)?;
        check_schema(&path, &r.schema, RECORD_SCHEMA)?;
        Ok(r)
    }

    pub fn records(&self) -> Result<Vec<IterationRecord>> {
        (0..self.completed()).map(|i| self.record(i)).collect()
    }

    /// Find a saved policy by id; `best` names the latest best policy.
    pub fn find_policy(&self, id: &str) -> Result<PolicyCheckpoint> {
        let n = self.completed();
        if id == "best" {
            return if n == 0 {
                PolicyCheckpoint::load(&self.pretrained_path())
            } else {
                PolicyCheckpoint::load(&self.iter_dir(n - 1).join("best.ckpt"))
            };
        }
        if id == "pretrained" {
            return PolicyCheckpoint::load(&self.pretrained_path());
        }
        let file = format!("{id}.ckpt");
        let mut dirs: Vec<PathBuf> = (0..n).map(|i| self.iter_dir(i).join("candidates")).collect();
        dirs.push(self.baseline_dir().join("candidates"));
        for d in dirs {
            let p = d.join(&file);
            if p.is_file() {
                return PolicyCheckpoint::load(&p);
            }
        }
        Err(Error::rejected(format!("no policy {id:?} in {}", self.root.display())))
    }
}

fn stats_jsonl(stats: &[UpdateStats]) -> Result<String> {
    let mut out = serde_json::json!({ "schema": STATS_SCHEMA }).to_string();
    out.push('\n');
    for s in stats {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Numeric(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Persist one finished iteration atomically.
pub fn save_iteration(store: &RunStore, state: &LoopState, out: &IterationOutput) -> Result<()> {
    let i = out.record.iteration;
    if store.completed() != i {
        return Err(Error::rejected(format!("iteration {i} does not follow the {} on disk", store.completed())));
    }
    let tmp = store.root.join(format!(".iter{i}.tmp"));
    remove_dir(&tmp)?;
    state.dataset.save(&tmp.join("dataset.jsonl"))?;
    out.model.save(&tmp.join("model.ckpt"))?;
    for (p, stats) in &out.candidates {
        p.save(&tmp.join("candidates").join(format!("{}.ckpt", p.id)))?;
        write_atomic(&tmp.join("candidates").join(format!("{}.stats.jsonl", p.id)), stats_jsonl(stats)?.as_bytes())?;
    }
    for e in &state.elites {
        e.save(&tmp.join("elites").join(format!("{}.ckpt", e.id)))?;
    }
    state.best.save(&tmp.join("best.ckpt"))?;
    write_json(&tmp.join("record.json"), &out.record)?;
    let dst = store.iter_dir(i);
    remove_dir(&dst)?;
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

/// Rebuild the loop state from the completed iterations on disk.
pub fn load_state(store: &RunStore) -> Result<LoopState> {
    let seed = store.seed()?;
    let pretrained = PolicyCheckpoint::load(&store.pretrained_path())?;
    let records = store.records()?;
    let Some(last) = records.last() else {
        return Ok(LoopState::new(pretrained, seed));
    };
    let dir = store.iter_dir(last.iteration);
    let elites = last
        .elites
        .iter()
        .map(|id| PolicyCheckpoint::load(&dir.join("elites").join(format!("{id}.ckpt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoopState {
        dataset: RealDataset::load(&dir.join("dataset.jsonl"))?,
        best: PolicyCheckpoint::load(&dir.join("best.ckpt"))?,
        pretrained,
        elites,
        records,
        seed,
    })
}
