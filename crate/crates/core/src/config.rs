//! TOML run configuration with `[reward]`, `[train]`, `[bench]` and
//! `[report]` sections. Every key is optional; missing keys take defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchgen::BenchConfig;
use crate::error::{CoprError, Result};
use crate::reward::AdvantageSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Write `curves.svg` when learning curves were recorded.
    pub svg: bool,
    pub svg_width: u32,
    pub svg_height: u32,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            svg: true,
            svg_width: 640,
            svg_height: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub reward: AdvantageSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoprError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoprError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoprError::InvalidConfig(m) => CoprError::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoprError::InvalidConfig(e.to_string()))
    }

    /// Task-incremental preset: three drifting tasks and the matching
    /// training settings.
    pub fn til() -> Self {
        let train = TrainConfig::til();
        Self {
            reward: train.reward.clone(),
            train,
            bench: BenchConfig::til(),
            report: ReportConfig::default(),
        }
    }

    /// Domain-incremental preset: eighteen clustered domains grouped into
    /// three super-tasks.
    pub fn dil() -> Self {
        let train = TrainConfig::dil();
        Self {
            reward: train.reward.clone(),
            train,
            bench: BenchConfig::dil(),
            report: ReportConfig::default(),
        }
    }

    /// Training settings with the `[reward]` section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            reward: self.reward.clone(),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.train_config().validate()
    }
}

/// Annotated configuration listing every key at its default value.
pub const EXAMPLE_CONFIG: &str = r#"# copr run configuration. Every key is optional.

[reward]
# Advantage scheme: "linear" gives (2j - J - 1) / J for rank j of J;
# "gaussian" gives sorted N(0, sigma) draws seeded per prompt.
scheme = "linear"
sigma = 1.0
seed = 0
# KL temperature of the sampling distribution.
beta = 1.0

[train]
# copr | sft | sft-l2 | sft-ewc | dpo
method = "copr"
# tabular | linear-feature
backend = "linear-feature"
# Hidden width of the feature policy; 0 is a linear scorer.
hidden = 0
# sgd | adam
optimizer = "adam"
lr = 0.001
steps_per_task = 500
# 0 is full batch.
batch_size = 32
lambda_reg = 1.0
lambda_rank = 0.1
# Strength of the sft-l2 / sft-ewc penalty.
lambda_method = 1.0
# Fraction of each task kept for replay.
replay_fraction = 0.01
seed = 0
# target-to-model | model-to-target
kl_direction = "target-to-model"
# pooled | task-balanced
reg_averaging = "pooled"
# Train a ranking value head alongside the policy.
value_head = false
# Record learning curves every N steps; 0 disables.
eval_every = 0
fisher_samples = 200

[bench]
# til | dil
preset = "til"
seed = 0
dim = 16
n_train = 500
n_test = 200
min_responses = 2
max_responses = 4
# til: tasks, cosine between consecutive scorers, prompt drift.
tasks = 3
cosine = 0.0
prompt_shift = 3.0
prompt_scale_step = 0.5
# dil: domains, super-tasks, cluster geometry.
domains = 18
groups = 3
group_cosine = 0.5
domain_cosine = 0.9

[bench.scorer]
# Per-domain ranking scorer used for the degradation matrix.
lr = 0.05
steps = 300
batch_size = 0
max_loss = 0.3
seed = 0

[report]
svg = true
svg_width = 640
svg_height = 400
"#;
