//! Continual alignment of a policy to a sequence of preference tasks by
//! fitting, per task, the KL-optimal sampling distribution relative to the
//! previous policy, while regularizing toward frozen replay anchors.

pub mod autodiff;
pub mod baselines;
pub mod benchgen;
pub mod config;
pub mod domain;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod trainer;

pub use benchgen::{BenchConfig, BenchManifest, Benchmark, DegradationMatrix, LatentTask};
pub use config::RunConfig;
pub use domain::{
    LatentScorer, Mode, PreferenceExample, ReplayBuffer, ReplayEntry, Response, TargetDistribution,
    TaskDataset, TaskSequence,
};
pub use error::{CoprError, Result};
pub use metrics::{MetricsRow, ScoreMatrix};
pub use objective::{KlDirection, LossValue, LossWeights, RegAveraging};
pub use policy::{Architecture, Backend, PolicyModel, PolicySnapshot};
pub use reward::{AdvantageScheme, AdvantageSpec};
pub use trainer::{Method, RunRecord, TrainConfig, Trainer};
