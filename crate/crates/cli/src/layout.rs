//! Paths inside a run directory.

use std::path::{Path, PathBuf};

use crate::{usage, CliError};

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

pub const TRAIN_STEM: &str = "train";
pub const TEST_STEM: &str = "test";
pub const SYNTH_STEM: &str = "synth";

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn stats(&self) -> PathBuf {
        self.data().join("stats.tsv")
    }

    pub fn prepare_record(&self) -> PathBuf {
        self.data().join("prepare.toml")
    }

    pub fn run(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.run(id).join("model.ckpt")
    }

    pub fn optimizer(&self, id: &str) -> PathBuf {
        self.run(id).join("optimizer.ckpt")
    }

    pub fn train_log(&self, id: &str) -> PathBuf {
        self.run(id).join("train.jsonl")
    }

    pub fn run_config(&self, id: &str) -> PathBuf {
        self.run(id).join("run.json")
    }

    pub fn synth(&self, id: &str) -> PathBuf {
        self.run(id).join("synth")
    }

    pub fn sidecar(&self, id: &str) -> PathBuf {
        self.synth(id).join("sidecar.jsonl")
    }

    pub fn scores(&self, id: &str) -> PathBuf {
        self.run(id).join("scores.tsv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Refuses to replace existing files unless `force` is set.
pub fn guard(force: bool, paths: &[&Path]) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(usage(format!("{} exists; pass --force to overwrite", p.display())));
    }
    Ok(())
}
