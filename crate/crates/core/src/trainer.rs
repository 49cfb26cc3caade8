//! Sequential training over a task sequence.
//!
//! For task `t` the trainer snapshots `π_{t−1}`, builds the fresh sampling
//! targets against that snapshot (COPR), optimizes the method's loss over
//! mixed current/replay batches, then freezes the task's replay anchors and
//! records a score-matrix row.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Var};
use crate::baselines::{dpo_loss, ewc_penalty, l2_penalty, sft_loss};
use crate::domain::{select_replay, PreferenceExample, ReplayBuffer, TargetDistribution, TaskDataset, TaskSequence};
use crate::error::{CoprError, Result};
use crate::metrics::ScoreMatrix;
use crate::objective::{
    optimal_sampling_distribution, ranking_loss, train_loss_terms, BatchItem, KlDirection,
    LossValue, LossWeights, RegAveraging, Source,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{Backend, Forward, ParamScope, PolicyModel, PolicySnapshot};
use crate::reward::{advantages_for, AdvantageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Copr,
    Sft,
    SftL2,
    SftEwc,
    Dpo,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Copr,
        Method::Sft,
        Method::SftL2,
        Method::SftEwc,
        Method::Dpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Copr => "copr",
            Method::Sft => "sft",
            Method::SftL2 => "sft-l2",
            Method::SftEwc => "sft-ewc",
            Method::Dpo => "dpo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CoprError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                CoprError::InvalidConfig(format!(
                    "unknown method `{s}`; valid methods: {}",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub backend: Backend,
    /// Hidden width of the feature policy; 0 means purely linear.
    pub hidden: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps_per_task: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub lambda_rank: f64,
    /// Strength of the L2 / EWC penalty.
    pub lambda_method: f64,
    pub replay_fraction: f64,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub reg_averaging: RegAveraging,
    pub value_head: bool,
    /// Evaluate every N steps for learning curves; 0 disables.
    pub eval_every: usize,
    /// Examples used for the diagonal Fisher estimate.
    pub fisher_samples: usize,
    /// Advantage scheme and KL temperature; read from the `[reward]` section.
    #[serde(skip)]
    pub reward: AdvantageSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Copr,
            backend: Backend::LinearFeature,
            hidden: 0,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            steps_per_task: 500,
            batch_size: 32,
            lambda_reg: 1.0,
            lambda_rank: 0.1,
            lambda_method: 1.0,
            replay_fraction: 0.01,
            seed: 0,
            kl_direction: KlDirection::TargetToModel,
            reg_averaging: RegAveraging::Pooled,
            value_head: false,
            eval_every: 0,
            fisher_samples: 200,
            reward: AdvantageSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Full-batch gradient descent on the tabular backend.
    pub fn tabular() -> Self {
        Self {
            backend: Backend::Tabular,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            steps_per_task: 2000,
            batch_size: 0,
            ..Self::default()
        }
    }

    /// Settings used for the task-incremental preset: a hidden layer so the
    /// policy can condition on the prompt, a sharp temperature and strong
    /// replay regularization.
    pub fn til() -> Self {
        Self {
            hidden: 16,
            lr: 0.01,
            steps_per_task: 1000,
            lambda_reg: 10.0,
            reward: AdvantageSpec::linear(0.1),
            ..Self::default()
        }
    }

    /// Settings used for the domain-incremental preset; the value head is
    /// trained alongside the policy so it can label later domains.
    pub fn dil() -> Self {
        Self {
            value_head: true,
            ..Self::til()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoprError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.steps_per_task == 0 {
            return Err(CoprError::InvalidConfig("steps_per_task must be >= 1".into()));
        }
        if !(self.replay_fraction > 0.0 && self.replay_fraction <= 1.0) {
            return Err(CoprError::InvalidConfig(format!(
                "replay_fraction must be in (0, 1], got {}",
                self.replay_fraction
            )));
        }
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_rank", self.lambda_rank),
            ("lambda_method", self.lambda_method),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoprError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        self.reward.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: self.lambda_reg,
            lambda_rank: self.lambda_rank,
            direction: self.kl_direction,
            reg_averaging: self.reg_averaging,
        }
    }
}

/// Fresh model for `sequence` as described by `config`.
pub fn build_model(sequence: &TaskSequence, config: &TrainConfig) -> Result<PolicyModel> {
    Ok(match config.backend {
        Backend::Tabular => PolicyModel::tabular(sequence.all_examples(), config.value_head),
        Backend::LinearFeature => {
            let dim = sequence
                .all_examples()
                .next()
                .map(PreferenceExample::dim)
                .ok_or(CoprError::EmptySequence)?;
            PolicyModel::linear_feature(
                dim,
                (config.hidden > 0).then_some(config.hidden),
                config.value_head,
                config.seed,
            )
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: usize,
    pub fit: f64,
    pub reg: f64,
    pub rank: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub task: usize,
    pub eval_task: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<LossRecord>,
    pub scores: ScoreMatrix,
    pub curves: Vec<CurvePoint>,
    /// Model at the end of each task.
    pub checkpoints: Vec<PolicySnapshot>,
    pub replay: ReplayBuffer,
    /// Current-task examples drawn per task.
    pub examples_consumed: Vec<usize>,
}

/// Fraction of correctly ordered preference pairs under `score`; exact ties
/// count one half.
pub fn pairwise_accuracy<F>(examples: &[PreferenceExample], mut score: F) -> Result<f64>
where
    F: FnMut(&PreferenceExample) -> Result<Vec<f64>>,
{
    let mut correct = 0.0;
    let mut total = 0usize;
    for ex in examples {
        let s = score(ex)?;
        for (w, l) in ex.preference_pairs() {
            total += 1;
            correct += match s[w].partial_cmp(&s[l]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    if total == 0 {
        return Err(CoprError::InvalidConfig("no preference pairs to score".into()));
    }
    Ok(correct / total as f64)
}

/// Policy pairwise accuracy on a task's evaluation split.
pub fn policy_accuracy(model: &PolicyModel, task: &TaskDataset) -> Result<f64> {
    pairwise_accuracy(task.eval_split(), |ex| model.logits(ex))
}

/// Evaluation hook: scores for tasks `1..=t` given the tasks seen so far.
pub type EvalHook<'a> = dyn FnMut(&PolicyModel, &[TaskDataset]) -> Result<Vec<f64>> + 'a;

/// The default hook: policy pairwise accuracy on every seen task.
pub fn accuracy_hook(model: &PolicyModel, seen: &[TaskDataset]) -> Result<Vec<f64>> {
    seen.iter().map(|t| policy_accuracy(model, t)).collect()
}

fn replay_seed(seed: u64, task_id: usize) -> u64 {
    seed ^ (task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stepwise continual learner; [`train_sequence`] drives it over a whole
/// sequence.
pub struct Trainer {
    config: TrainConfig,
    model: PolicyModel,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    /// Anchor and accumulated diagonal Fisher for EWC.
    fisher: Option<Vec<f64>>,
    global_step: usize,
    record: RunRecord,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: PolicyModel) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            record: RunRecord {
                config: config.clone(),
                losses: Vec::new(),
                scores: ScoreMatrix::new(),
                curves: Vec::new(),
                checkpoints: Vec::new(),
                replay: ReplayBuffer::new(),
                examples_consumed: Vec::new(),
            },
            config,
            model,
            replay: ReplayBuffer::new(),
            rng,
            fisher: None,
            global_step: 0,
        })
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn into_record(mut self) -> RunRecord {
        self.record.replay = self.replay.clone();
        self.record
    }

    /// Fresh COPR targets for every training example of `task` against the
    /// frozen previous policy.
    fn targets(&self, prev: &PolicyModel, task: &TaskDataset) -> Result<Vec<TargetDistribution>> {
        task.examples
            .iter()
            .map(|ex| {
                let adv = advantages_for(ex, &self.config.reward)?;
                optimal_sampling_distribution(prev, ex, &adv, self.config.reward.beta)
            })
            .collect()
    }

    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        if b == 0 || b >= n {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut self.rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    /// Train on `seen.last()` (the current task), then evaluate every task in
    /// `seen` to append a score-matrix row.
    pub fn train_task(&mut self, seen: &[TaskDataset], eval_hook: &mut EvalHook<'_>) -> Result<()> {
        let task = seen.last().ok_or(CoprError::EmptySequence)?;
        let t = task.task_id;
        if task.examples.is_empty() {
            return Err(CoprError::EmptyTask(t));
        }
        if !task.is_labeled() {
            return Err(CoprError::UnlabeledData(t));
        }
        if !self.replay.precedes(t) {
            return Err(CoprError::InvalidConfig(format!(
                "task {t} arrives after replay from a later task"
            )));
        }
        let prev = self.model.snapshot();
        let targets = match self.config.method {
            Method::Copr => self.targets(&prev, task)?,
            _ => Vec::new(),
        };
        let mut optimizer = Optimizer::new(
            self.config.optimizer,
            self.config.lr,
            self.model.param_count(),
        );
        let weights = self.config.loss_weights();
        let use_replay = self.config.method == Method::Copr && self.config.lambda_reg > 0.0;
        let mut consumed = 0usize;

        for step in 0..self.config.steps_per_task {
            let current = self.batch_indices(task.examples.len());
            consumed += current.len();
            let replay_idx = if use_replay && !self.replay.is_empty() {
                self.batch_indices(self.replay.len())
            } else {
                Vec::new()
            };
            let entries = self.replay.entries();
            let mut items: Vec<BatchItem<'_>> = current
                .iter()
                .map(|&i| BatchItem {
                    example: &task.examples[i],
                    source: Source::Current,
                    target: targets.get(i),
                    task_id: t,
                })
                .collect();
            items.extend(replay_idx.iter().map(|&i| BatchItem {
                example: &entries[i].example,
                source: Source::Replay,
                target: Some(&entries[i].target),
                task_id: entries[i].task_id,
            }));

            let mut value: Option<LossValue> = None;
            let config = &self.config;
            let fisher = self.fisher.as_deref();
            let result = self.model.gradient(|scope| {
                let (total, v) = method_loss(scope, config, &items, &weights, &prev, fisher)?;
                value = Some(v);
                Ok(total)
            });
            let (loss, grad) = match result {
                Ok(ok) => ok,
                Err(CoprError::NumericOverflow { op }) => {
                    return Err(CoprError::NonFiniteLoss {
                        step: self.global_step,
                        component: value.as_ref().map(non_finite_component).unwrap_or(op),
                    })
                }
                Err(e) => return Err(e),
            };
            let value = value.expect("loss closure ran");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CoprError::NonFiniteLoss {
                    step: self.global_step,
                    component: non_finite_component(&value),
                });
            }
            optimizer.step(self.model.params_mut(), &grad);
            self.record.losses.push(LossRecord {
                step: self.global_step,
                task: t,
                fit: value.fit_component,
                reg: value.reg_component,
                rank: value.ranking_component,
                total: value.total,
            });
            self.global_step += 1;
            if self.config.eval_every > 0 && (step + 1) % self.config.eval_every == 0 {
                let scores = eval_hook(&self.model, seen)?;
                for (j, score) in scores.into_iter().enumerate() {
                    self.record.curves.push(CurvePoint {
                        step: self.global_step,
                        task: t,
                        eval_task: j + 1,
                        score,
                    });
                }
            }
        }

        if self.config.method == Method::Copr {
            let chosen = select_replay(
                task,
                self.config.replay_fraction,
                replay_seed(self.config.seed, t),
            )?;
            let position: HashMap<&str, usize> = task
                .examples
                .iter()
                .enumerate()
                .map(|(i, ex)| (ex.prompt_id.as_str(), i))
                .collect();
            let frozen = chosen
                .into_iter()
                .map(|ex| {
                    let target = targets[position[ex.prompt_id.as_str()]].clone();
                    (ex, target)
                })
                .collect();
            self.replay.freeze_task(t, frozen)?;
        }
        if self.config.method == Method::SftEwc {
            let f = self.estimate_fisher(task)?;
            match &mut self.fisher {
                Some(acc) => acc.iter_mut().zip(&f).for_each(|(a, b)| *a += b),
                None => self.fisher = Some(f),
            }
        }
        self.record.checkpoints.push(self.model.snapshot());
        self.record.examples_consumed.push(consumed);
        let row = eval_hook(&self.model, seen)?;
        self.record.scores.push_row(row)?;
        Ok(())
    }

    /// Mean squared per-example gradient of the SFT loss over up to
    /// `fisher_samples` training examples.
    fn estimate_fisher(&mut self, task: &TaskDataset) -> Result<Vec<f64>> {
        let n = task.examples.len();
        let take = self.config.fisher_samples.clamp(1, n);
        let mut idx = sample(&mut self.rng, n, take).into_vec();
        idx.sort_unstable();
        let mut fisher = vec![0.0; self.model.param_count()];
        for &i in &idx {
            let (_, g) = self
                .model
                .gradient(|s| sft_loss(s, &task.examples[i]))?;
            for (f, gi) in fisher.iter_mut().zip(g) {
                *f += gi * gi;
            }
        }
        fisher.iter_mut().for_each(|f| *f /= take as f64);
        Ok(fisher)
    }
}

fn non_finite_component(v: &LossValue) -> &'static str {
    if !v.fit_component.is_finite() {
        "fit"
    } else if !v.reg_component.is_finite() {
        "reg"
    } else if !v.ranking_component.is_finite() {
        "rank"
    } else {
        "total"
    }
}

/// Loss of the configured method on one batch. Baselines report their main
/// objective as `fit_component` and their penalty as `reg_component`.
fn method_loss<'t>(
    scope: &ParamScope<'t, '_>,
    config: &TrainConfig,
    items: &[BatchItem<'_>],
    weights: &LossWeights,
    prev: &PolicySnapshot,
    fisher: Option<&[f64]>,
) -> Result<(Var<'t>, LossValue)> {
    if config.method == Method::Copr {
        return train_loss_terms(scope, items, weights);
    }
    let current: Vec<&PreferenceExample> = items
        .iter()
        .filter(|i| i.source == Source::Current)
        .map(|i| i.example)
        .collect();
    let main: Vec<Var<'t>> = current
        .iter()
        .map(|ex| match config.method {
            Method::Dpo => dpo_loss(scope, prev, ex, config.reward.beta),
            _ => sft_loss(scope, ex),
        })
        .collect::<Result<_>>()?;
    let per_example: Vec<f64> = main.iter().map(Scalar::value).collect();
    let main = Scalar::sum(&main) / main.len() as f64;
    let mut value = LossValue {
        fit_component: main.value(),
        per_example,
        ..LossValue::default()
    };
    let mut total = main;
    let penalty = match (config.method, fisher) {
        (Method::SftL2, _) => Some(l2_penalty(scope, prev)?),
        (Method::SftEwc, Some(f)) => Some(ewc_penalty(scope, prev, f)?),
        _ => None,
    };
    if let Some(p) = penalty {
        value.reg_component = p.value();
        total = total + p * config.lambda_method;
    }
    if weights.lambda_rank > 0.0 && scope.model().has_value_head() {
        let ranks: Vec<Var<'t>> = current
            .iter()
            .map(|ex| ranking_loss(scope, ex))
            .collect::<Result<_>>()?;
        let rank = Scalar::sum(&ranks) / ranks.len() as f64;
        value.ranking_component = rank.value();
        total = total + rank * weights.lambda_rank;
    }
    value.total = total.value();
    Ok((total, value))
}

/// Train a fresh model over every task of `sequence` in order.
pub fn train_sequence(
    sequence: &TaskSequence,
    config: &TrainConfig,
    eval_hook: &mut EvalHook<'_>,
) -> Result<RunRecord> {
    let model = build_model(sequence, config)?;
    train_sequence_from(model, sequence, config, eval_hook)
}

/// Train an existing model over every task of `sequence` in order.
pub fn train_sequence_from(
    model: PolicyModel,
    sequence: &TaskSequence,
    config: &TrainConfig,
    eval_hook: &mut EvalHook<'_>,
) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config.clone(), model)?;
    for t in 1..=sequence.len() {
        trainer.train_task(&sequence.tasks[..t], eval_hook)?;
    }
    Ok(trainer.into_record())
}
