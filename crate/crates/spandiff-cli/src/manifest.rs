//! Run manifest: the config snapshot, content hashes of every input
//! dataset, and the artifacts a run wrote. Reruns with an equal manifest
//! reproduce toy-encoder results exactly.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spandiff::config::TrainConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub datasets: Vec<DatasetRef>,
    pub checkpoint: String,
    pub metrics: String,
    pub best_dev_f1: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn collect(
        config: &TrainConfig,
        datasets: &[(&str, &Path)],
        checkpoint: &Path,
        metrics: &Path,
        best_dev_f1: f64,
    ) -> Result<Self> {
        let mut refs = Vec::with_capacity(datasets.len());
        for (role, path) in datasets {
            refs.push(DatasetRef {
                role: role.to_string(),
                path: path.display().to_string(),
                sha256: sha256_file(path)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            seed: config.seed,
            datasets: refs,
            checkpoint: checkpoint.display().to_string(),
            metrics: metrics.display().to_string(),
            best_dev_f1,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
