//! Sampling distribution, distribution-fitting and regularization losses,
//! pairwise ranking loss and the combined per-task training loss.
//!
//! Every loss is generic over [`Forward`], so the same code produces plain
//! values (on a [`PolicyModel`]) or taped values for exact gradients (on a
//! [`crate::policy::ParamScope`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::domain::{PreferenceExample, ReplayEntry, TargetDistribution};
use crate::error::{CoprError, Result};
use crate::policy::{log_softmax, softmax, Forward, PolicyModel};

/// Which KL the fit and regularization terms minimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(P* ‖ P_θ)`, the direction of `F.kl_div(P_θ.log(), P*)`.
    #[default]
    TargetToModel,
    /// `KL(P_θ ‖ P*)`.
    ModelToTarget,
}

/// How replay terms are pooled into the regularization loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegAveraging {
    /// Uniform mean over all replay entries.
    #[default]
    Pooled,
    /// Mean over tasks of the per-task mean.
    TaskBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairReduction {
    #[default]
    Mean,
    Sum,
}

/// `P*(y) ∝ π_prev(y|x) · exp(Adv(y)/β)` over the example's responses,
/// evaluated as `softmax(log π_prev + Adv/β)`.
pub fn optimal_sampling_distribution(
    prev: &PolicyModel,
    example: &PreferenceExample,
    advantages: &[f64],
    beta: f64,
) -> Result<TargetDistribution> {
    check_advantages(example, advantages, beta)?;
    let logits = prev.logits(example)?;
    let log_prev = log_softmax(&logits);
    let shifted: Vec<f64> = log_prev
        .iter()
        .zip(advantages)
        .map(|(lp, a)| lp + a / beta)
        .collect();
    TargetDistribution::new(softmax(&shifted))
}

fn check_advantages(example: &PreferenceExample, advantages: &[f64], beta: f64) -> Result<()> {
    if advantages.len() != example.len() {
        return Err(CoprError::InvalidExample {
            prompt_id: example.prompt_id.clone(),
            reason: format!(
                "{} advantages for {} responses",
                advantages.len(),
                example.len()
            ),
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CoprError::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Literal evaluation of `π*(y|x) = π_prev(y|x) exp(r(x,y)/β) / Z(x)` with
/// `r = Adv + δ` and an explicit partition function over the response set,
/// then re-normalization over the set. Exists to check that `δ` and `Z`
/// cancel in [`optimal_sampling_distribution`].
pub fn oracle_uncancelled(
    prev: &PolicyModel,
    example: &PreferenceExample,
    advantages: &[f64],
    delta: f64,
    beta: f64,
) -> Result<TargetDistribution> {
    check_advantages(example, advantages, beta)?;
    let logits = prev.logits(example)?;
    // log π_prev(y|x) over the enumerable support.
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let log_prev: Vec<f64> = logits.iter().map(|l| l - log_norm).collect();
    let rewards: Vec<f64> = advantages.iter().map(|a| a + delta).collect();
    // log Z = log Σ π_prev exp(r/β), accumulated in log space.
    let exponents: Vec<f64> = log_prev
        .iter()
        .zip(&rewards)
        .map(|(lp, r)| lp + r / beta)
        .collect();
    let emax = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = emax + exponents.iter().map(|e| (e - emax).exp()).sum::<f64>().ln();
    let optimal: Vec<f64> = exponents.iter().map(|e| (e - log_z).exp()).collect();
    let mass: f64 = optimal.iter().sum();
    TargetDistribution::new(optimal.into_iter().map(|p| p / mass).collect())
}

/// KL between a fixed target and the model's re-normalized distribution
/// given as logits.
pub fn kl_to_logits<S: Scalar>(target: &[f64], logits: &[S], direction: KlDirection) -> S {
    let log_model = log_softmax(logits);
    match direction {
        KlDirection::TargetToModel => {
            let entropy_part: f64 = target
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum();
            let cross: Vec<S> = target
                .iter()
                .zip(&log_model)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &lq)| lq * (-p))
                .collect();
            S::sum(&cross) + entropy_part
        }
        KlDirection::ModelToTarget => {
            let terms: Vec<S> = target
                .iter()
                .zip(&log_model)
                .map(|(&p, &lq)| lq.exp() * (lq - p.ln()))
                .collect();
            S::sum(&terms)
        }
    }
}

/// `KL(P* ‖ P_θ)` on one example.
pub fn fit_loss<F: Forward>(
    model: &F,
    example: &PreferenceExample,
    target: &TargetDistribution,
) -> Result<F::S> {
    fit_loss_directed(model, example, target, KlDirection::TargetToModel)
}

pub fn fit_loss_directed<F: Forward>(
    model: &F,
    example: &PreferenceExample,
    target: &TargetDistribution,
    direction: KlDirection,
) -> Result<F::S> {
    if target.len() != example.len() {
        return Err(CoprError::InvalidExample {
            prompt_id: example.prompt_id.clone(),
            reason: "target length differs from response count".into(),
        });
    }
    let logits = model.logits(example)?;
    Ok(kl_to_logits(&target.probabilities, &logits, direction))
}

/// Mean KL of the model to each replay entry's frozen target; 0 when empty.
pub fn reg_loss<F: Forward>(model: &F, replay: &[ReplayEntry]) -> Result<F::S> {
    reg_loss_with(model, replay, KlDirection::TargetToModel, RegAveraging::Pooled)
}

pub fn reg_loss_with<F: Forward>(
    model: &F,
    replay: &[ReplayEntry],
    direction: KlDirection,
    averaging: RegAveraging,
) -> Result<F::S> {
    if replay.is_empty() {
        return Ok(model.constant(0.0));
    }
    let terms = replay
        .iter()
        .map(|e| fit_loss_directed(model, &e.example, &e.target, direction))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<usize> = replay.iter().map(|e| e.task_id).collect();
    Ok(average(&terms, &tasks, averaging))
}

fn average<S: Scalar>(terms: &[S], tasks: &[usize], averaging: RegAveraging) -> S {
    match averaging {
        RegAveraging::Pooled => S::sum(terms) / terms.len() as f64,
        RegAveraging::TaskBalanced => {
            let mut ids: Vec<usize> = tasks.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let per_task: Vec<S> = ids
                .iter()
                .map(|id| {
                    let group: Vec<S> = terms
                        .iter()
                        .zip(tasks)
                        .filter(|(_, t)| *t == id)
                        .map(|(&s, _)| s)
                        .collect();
                    S::sum(&group) / group.len() as f64
                })
                .collect();
            S::sum(&per_task) / per_task.len() as f64
        }
    }
}

/// `−log σ(r_w − r_l)` over all ordered pairs, averaged.
pub fn ranking_loss<F: Forward>(model: &F, example: &PreferenceExample) -> Result<F::S> {
    ranking_loss_with(model, example, PairReduction::Mean)
}

pub fn ranking_loss_with<F: Forward>(
    model: &F,
    example: &PreferenceExample,
    reduction: PairReduction,
) -> Result<F::S> {
    let scores = model.scores(example)?;
    let pairs = example.preference_pairs();
    if pairs.is_empty() {
        return Err(CoprError::UnlabeledData(0));
    }
    let terms: Vec<F::S> = pairs
        .iter()
        .map(|&(w, l)| (scores[l] - scores[w]).softplus())
        .collect();
    let total = Scalar::sum(&terms);
    Ok(match reduction {
        PairReduction::Mean => total / pairs.len() as f64,
        PairReduction::Sum => total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Current,
    Replay,
}

/// One element of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a PreferenceExample,
    pub source: Source,
    /// Fresh `P*` for current items, frozen anchor for replay items.
    pub target: Option<&'a TargetDistribution>,
    pub task_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_rank: f64,
    pub direction: KlDirection,
    pub reg_averaging: RegAveraging,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            lambda_rank: 0.1,
            direction: KlDirection::TargetToModel,
            reg_averaging: RegAveraging::Pooled,
        }
    }
}

/// Evaluated training loss with its components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub fit_component: f64,
    pub reg_component: f64,
    pub ranking_component: f64,
    /// Fit or regularization KL of each batch item, in batch order.
    pub per_example: Vec<f64>,
}

/// Combined loss: mean fit over current items + `λ_reg` · regularization over
/// replay items + `λ_rank` · mean ranking loss over current items (only when
/// the model has a value head and `λ_rank > 0`).
pub fn train_loss_terms<F: Forward>(
    model: &F,
    batch: &[BatchItem<'_>],
    weights: &LossWeights,
) -> Result<(F::S, LossValue)> {
    let mut fit_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut reg_tasks = Vec::new();
    let mut rank_terms = Vec::new();
    let mut per_example = Vec::with_capacity(batch.len());
    let use_rank = weights.lambda_rank > 0.0 && model.model().has_value_head();
    for item in batch {
        let target = item.target.ok_or_else(|| CoprError::MissingAnchor {
            prompt_id: item.example.prompt_id.clone(),
        })?;
        let kl = fit_loss_directed(model, item.example, target, weights.direction)?;
        per_example.push(kl.value());
        match item.source {
            Source::Current => {
                fit_terms.push(kl);
                if use_rank {
                    rank_terms.push(ranking_loss(model, item.example)?);
                }
            }
            Source::Replay => {
                reg_terms.push(kl);
                reg_tasks.push(item.task_id);
            }
        }
    }
    let mut total = model.constant(0.0);
    let mut value = LossValue {
        per_example,
        ..LossValue::default()
    };
    if !fit_terms.is_empty() {
        let fit = Scalar::sum(&fit_terms) / fit_terms.len() as f64;
        value.fit_component = fit.value();
        total = total + fit;
    }
    if !reg_terms.is_empty() {
        let reg = average(&reg_terms, &reg_tasks, weights.reg_averaging);
        value.reg_component = reg.value();
        total = total + reg * weights.lambda_reg;
    }
    if !rank_terms.is_empty() {
        let rank = Scalar::sum(&rank_terms) / rank_terms.len() as f64;
        value.ranking_component = rank.value();
        total = total + rank * weights.lambda_rank;
    }
    value.total = total.value();
    Ok((total, value))
}

pub fn train_loss(
    model: &PolicyModel,
    batch: &[BatchItem<'_>],
    weights: &LossWeights,
) -> Result<LossValue> {
    Ok(train_loss_terms(model, batch, weights)?.1)
}

/// Predicted rewards after one unnormalized gradient step of the all-pairs
/// ranking loss from zero rewards: `η·j − η(J+1)/2` for `j = 1..=J`.
pub fn early_gradient_oracle(size: usize, eta: f64) -> Vec<f64> {
    (1..=size)
        .map(|j| eta * j as f64 - 0.5 * eta * (size as f64 + 1.0))
        .collect()
}
