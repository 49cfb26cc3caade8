//! Losses of the comparison learners: supervised fine-tuning on the top
//! response, parameter-space L2 and EWC penalties, and a pairwise DPO-style
//! objective.

use crate::autodiff::Scalar;
use crate::domain::PreferenceExample;
use crate::error::{CoprError, Result};
use crate::policy::{log_softmax, Forward, PolicyModel};

/// `−log P_θ(y_top | x)` with `P_θ` re-normalized over the response set.
pub fn sft_loss<F: Forward>(model: &F, example: &PreferenceExample) -> Result<F::S> {
    let top = example.top_index().ok_or_else(|| CoprError::InvalidExample {
        prompt_id: example.prompt_id.clone(),
        reason: "sft needs ranked responses".into(),
    })?;
    let log_p = log_softmax(&model.logits(example)?);
    Ok(-log_p[top])
}

fn check_shape(model_len: usize, anchor_len: usize) -> Result<()> {
    if model_len != anchor_len {
        return Err(CoprError::IncompatibleSnapshot {
            model: model_len,
            anchor: anchor_len,
        });
    }
    Ok(())
}

/// `Σ_i (θ_i − anchor_i)²`.
pub fn l2_penalty<F: Forward>(model: &F, anchor: &PolicyModel) -> Result<F::S> {
    let params = model.params();
    check_shape(params.len(), anchor.param_count())?;
    let terms: Vec<F::S> = params
        .iter()
        .zip(anchor.params())
        .map(|(&p, &a)| (p - a).square())
        .collect();
    Ok(Scalar::sum(&terms))
}

/// `Σ_i F_i (θ_i − anchor_i)²` with a nonnegative diagonal Fisher `F`.
pub fn ewc_penalty<F: Forward>(model: &F, anchor: &PolicyModel, fisher: &[f64]) -> Result<F::S> {
    let params = model.params();
    check_shape(params.len(), anchor.param_count())?;
    check_shape(params.len(), fisher.len())?;
    if let Some((index, &value)) = fisher
        .iter()
        .enumerate()
        .find(|(_, f)| !(f.is_finite() && **f >= 0.0))
    {
        return Err(CoprError::InvalidFisher { index, value });
    }
    let terms: Vec<F::S> = params
        .iter()
        .zip(anchor.params())
        .zip(fisher)
        .map(|((&p, &a), &f)| (p - a).square() * f)
        .collect();
    Ok(Scalar::sum(&terms))
}

/// Mean over preferred/dispreferred pairs of
/// `−log σ(β[(log π_θ(y_w) − log π_ref(y_w)) − (log π_θ(y_l) − log π_ref(y_l))])`,
/// with both policies re-normalized over the response set.
pub fn dpo_loss<F: Forward>(
    model: &F,
    reference: &PolicyModel,
    example: &PreferenceExample,
    beta: f64,
) -> Result<F::S> {
    let pairs = example.preference_pairs();
    if pairs.is_empty() {
        return Err(CoprError::InvalidExample {
            prompt_id: example.prompt_id.clone(),
            reason: "dpo needs ranked responses".into(),
        });
    }
    let log_p = log_softmax(&model.logits(example)?);
    let log_ref = log_softmax(&reference.logits(example)?);
    let terms: Vec<F::S> = pairs
        .iter()
        .map(|&(w, l)| {
            let margin = (log_p[w] - log_p[l]) - (log_ref[w] - log_ref[l]);
            (-(margin * beta)).softplus()
        })
        .collect();
    Ok(Scalar::sum(&terms) / pairs.len() as f64)
}
