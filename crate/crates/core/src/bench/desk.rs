//! The pinned desk experiment: dataset, architecture, training and attack
//! settings read from `experiments/desk.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{gen_dataset, split, SyntheticDatasetSpec};
use super::train::{train, DeskArch, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::nnengine::{Dataset, Model};
use crate::shield::Scheme;

pub const PINNED_JSON: &str = include_str!("../../../../experiments/desk.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub n: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub gauss_seed: u64,
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselineSettings {
    pub runs: usize,
    pub seed_base: u64,
}

impl RandomBaselineSettings {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed_base + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSettings {
    pub scheme: String,
    pub fractions: Vec<f64>,
    pub selection_seed: u64,
    pub stress_flip_fraction: f64,
    pub stress_seeds: usize,
    pub stress_seed_base: u64,
}

impl DefenseSettings {
    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme.parse()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.stress_seeds as u64).map(|i| self.stress_seed_base + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub dataset: SyntheticDatasetSpec,
    pub arch: DeskArch,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub attack: AttackSettings,
    pub random_baseline: RandomBaselineSettings,
    pub defense: DefenseSettings,
    pub oracle: OracleSettings,
}

impl DeskConfig {
    pub fn pinned() -> Self {
        Self::from_json(PINNED_JSON).expect("pinned desk config parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("desk config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Trained desk model with its data splits.
pub struct Desk {
    pub model: Model,
    pub train: Dataset,
    pub test: Dataset,
    pub log: TrainLog,
}

impl Desk {
    pub fn build(cfg: &DeskConfig) -> Result<Desk> {
        let (train_set, test) = split(&gen_dataset(&cfg.dataset)?);
        let (manifest, init) = cfg.arch.build(cfg.dataset.image_size, cfg.dataset.classes, cfg.init_seed)?;
        let (model, log) = train(&manifest, &init, &train_set, &cfg.train)?;
        Ok(Desk {
            model,
            train: train_set,
            test,
            log,
        })
    }

    /// Leading test samples used by the exhaustive oracle.
    pub fn oracle_set(&self, cfg: &DeskConfig) -> Dataset {
        self.test.head(cfg.oracle.eval_samples)
    }
}
