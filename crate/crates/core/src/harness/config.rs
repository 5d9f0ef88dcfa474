use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{LambdaGrid, Strategy, DEFAULT_RHO, DEFAULT_TENT_LR, DEFAULT_TENT_STEPS};
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::synthdata::DatasetPlan;
use crate::trainer::TrainConfig;

/// One experiment: which data to use, how to train, and how to adapt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    /// Generation recipe, needed by `gen-data` only.
    pub dataset: Option<DatasetPlan>,
    pub source: String,
    pub targets: Vec<String>,
    /// Step C of the lambda grid.
    pub grid_step: f64,
    /// Explicit grid members; replaces `grid_step` when set.
    pub lambdas: Option<Vec<f64>>,
    pub strategies: Vec<Strategy>,
    pub rho: f64,
    pub trials: usize,
    pub seed: u64,
    /// Keep the train/validation split at `seed` in every trial; otherwise
    /// trial `t` splits with `seed + t` like its initialization.
    pub fixed_split: bool,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub tent_steps: usize,
    pub tent_lr: f32,
    /// Use at most this many images per target domain.
    pub max_target_images: Option<usize>,
    /// Extra grid steps evaluated with ENT_BALN for the C-sensitivity table.
    pub c_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            dataset: None,
            source: "source".into(),
            targets: Vec::new(),
            grid_step: 0.2,
            lambdas: None,
            strategies: Strategy::ALL.to_vec(),
            rho: DEFAULT_RHO,
            trials: 10,
            seed: 0,
            fixed_split: true,
            network: NetConfig::default(),
            train: TrainConfig::default(),
            tent_steps: DEFAULT_TENT_STEPS,
            tent_lr: DEFAULT_TENT_LR,
            max_target_images: None,
            c_values: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<LambdaGrid> {
        match &self.lambdas {
            Some(values) => LambdaGrid::from_values(values.clone()),
            None => LambdaGrid::new(self.grid_step),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        let grid = self.grid()?;
        if self.source.is_empty() {
            return Err(Error::Config("source domain is not set".into()));
        }
        if self.targets.contains(&self.source) {
            return Err(Error::Config(format!("source {:?} is also a target", self.source)));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.tent_lr > 0.0) {
            return Err(Error::Config("tent_lr must be positive".into()));
        }
        if self.max_target_images == Some(0) {
            return Err(Error::Config("max_target_images must be >= 1".into()));
        }
        for s in &self.strategies {
            if let Strategy::EntTopK(k) = s {
                if *k == 0 || *k > grid.len() {
                    return Err(Error::Config(format!(
                        "ENT_TOPK K = {k} needs 1 <= K <= {} grid members",
                        grid.len()
                    )));
                }
            }
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::Config(format!("strategy {s} listed twice")));
            }
        }
        for &c in &self.c_values {
            LambdaGrid::new(c)?;
        }
        if let Some(plan) = &self.dataset {
            plan.validate()?;
        }
        Ok(())
    }

    /// Training settings for trial `t`.
    pub fn trial_train_config(&self, trial: usize) -> TrainConfig {
        let seed = self.seed + trial as u64;
        TrainConfig {
            seed,
            split_seed: Some(if self.fixed_split { self.seed } else { seed }),
            ..self.train.clone()
        }
    }

    pub fn trial_init_seed(&self, trial: usize) -> u64 {
        self.seed + trial as u64
    }
}
