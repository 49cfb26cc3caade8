//! Parameterized policies over finite response sets.
//!
//! Two backends share one flat parameter vector `θ`:
//!
//! * **Tabular**: one free logit per registered `(prompt_id, response_id)`
//!   pair. Any target distribution is exactly representable, which makes it
//!   the reference backend for convergence checks.
//! * **LinearFeature**: a scalar logit from the concatenated prompt/response
//!   features `z = x ⊕ y` (dimension `2d`), either linear `w · z` or with one
//!   `tanh` hidden layer `v · tanh(W z + b)`.
//!
//! The optional value head produces a preference score `r_θ(x, y)` from the
//! same input representation (pair one-hots for tabular, `z` for features).
//! Its parameters sit at the tail of `θ`.

use std::collections::HashMap;
use std::ops::{Deref, Range};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::domain::PreferenceExample;
use crate::error::{CoprError, Result};

pub const CHECKPOINT_FORMAT: &str = "copr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Tabular,
    LinearFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum Architecture {
    Tabular {
        pairs: Vec<(String, String)>,
    },
    LinearFeature {
        /// Per-side feature dimension `d`.
        dim: usize,
        hidden: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    arch: Architecture,
    index: HashMap<(String, String), usize>,
    params: Vec<f64>,
    policy_len: usize,
    value_head: bool,
}

impl PartialEq for PolicyModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.value_head == other.value_head
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn pair_index(pairs: &[(String, String)]) -> HashMap<(String, String), usize> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i))
        .collect()
}

impl PolicyModel {
    /// Tabular policy over every pair appearing in `examples`, all logits 0.
    pub fn tabular<'a>(
        examples: impl IntoIterator<Item = &'a PreferenceExample>,
        value_head: bool,
    ) -> Self {
        let mut pairs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for ex in examples {
            for r in &ex.responses {
                let key = (ex.prompt_id.clone(), r.response_id.clone());
                if seen.insert(key.clone()) {
                    pairs.push(key);
                }
            }
        }
        let n = pairs.len();
        Self {
            index: pair_index(&pairs),
            arch: Architecture::Tabular { pairs },
            params: vec![0.0; if value_head { 2 * n } else { n }],
            policy_len: n,
            value_head,
        }
    }

    /// Feature policy with weights drawn from `N(0, 1/√fan_in)` (standard
    /// deviation) and a zero value head.
    pub fn linear_feature(dim: usize, hidden: Option<usize>, value_head: bool, seed: u64) -> Self {
        let input = 2 * dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, count: usize, out: &mut Vec<f64>| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            out.extend((0..count).map(|_| normal.sample(&mut rng)));
        };
        let mut params = Vec::new();
        match hidden {
            None => draw(input, input, &mut params),
            Some(h) => {
                draw(input, h * input, &mut params);
                params.extend(std::iter::repeat_n(0.0, h));
                draw(h, h, &mut params);
            }
        }
        let policy_len = params.len();
        if value_head {
            params.extend(std::iter::repeat_n(0.0, input));
        }
        Self {
            arch: Architecture::LinearFeature { dim, hidden },
            index: HashMap::new(),
            params,
            policy_len,
            value_head,
        }
    }

    pub fn backend(&self) -> Backend {
        match self.arch {
            Architecture::Tabular { .. } => Backend::Tabular,
            Architecture::LinearFeature { .. } => Backend::LinearFeature,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn has_value_head(&self) -> bool {
        self.value_head
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn policy_range(&self) -> Range<usize> {
        0..self.policy_len
    }

    pub fn head_range(&self) -> Range<usize> {
        self.policy_len..self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(CoprError::IncompatibleSnapshot {
                model: self.params.len(),
                anchor: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    fn pair(&self, prompt_id: &str, response_id: &str) -> Result<usize> {
        self.index
            .get(&(prompt_id.to_owned(), response_id.to_owned()))
            .copied()
            .ok_or_else(|| CoprError::UnknownPair {
                prompt_id: prompt_id.to_owned(),
                response_id: response_id.to_owned(),
            })
    }

    /// Overwrite the tabular logit of one pair.
    pub fn set_logit(&mut self, prompt_id: &str, response_id: &str, value: f64) -> Result<()> {
        let i = self.pair(prompt_id, response_id)?;
        self.params[i] = value;
        Ok(())
    }

    /// Overwrite the tabular value score of one pair.
    pub fn set_score(&mut self, prompt_id: &str, response_id: &str, value: f64) -> Result<()> {
        if !self.value_head {
            return Err(CoprError::NoValueHead);
        }
        let i = self.pair(prompt_id, response_id)?;
        self.params[self.policy_len + i] = value;
        Ok(())
    }

    fn check_dim(&self, example: &PreferenceExample) -> Result<()> {
        if let Architecture::LinearFeature { dim, .. } = self.arch {
            if example.dim() != dim {
                return Err(CoprError::DimensionMismatch {
                    expected: dim,
                    got: example.dim(),
                });
            }
        }
        Ok(())
    }

    /// Logits of every response of `example` under parameters `params`.
    pub fn logits_with<S: Scalar>(&self, params: &[S], example: &PreferenceExample) -> Result<Vec<S>> {
        self.check_dim(example)?;
        match &self.arch {
            Architecture::Tabular { .. } => example
                .responses
                .iter()
                .map(|r| Ok(params[self.pair(&example.prompt_id, &r.response_id)?]))
                .collect(),
            Architecture::LinearFeature { dim, hidden } => {
                let input = 2 * dim;
                Ok((0..example.len())
                    .map(|i| {
                        let z = example.joint_features(i);
                        match hidden {
                            None => S::dot(&params[..input], &z),
                            Some(h) => {
                                let (w, rest) = params.split_at(h * input);
                                let (b, v) = rest.split_at(*h);
                                let act: Vec<S> = (0..*h)
                                    .map(|k| {
                                        (S::dot(&w[k * input..(k + 1) * input], &z) + b[k]).tanh()
                                    })
                                    .collect();
                                let terms: Vec<S> =
                                    act.iter().zip(&v[..*h]).map(|(&a, &vk)| a * vk).collect();
                                S::sum(&terms)
                            }
                        }
                    })
                    .collect())
            }
        }
    }

    /// Value-head scores of every response of `example` under `params`.
    pub fn scores_with<S: Scalar>(&self, params: &[S], example: &PreferenceExample) -> Result<Vec<S>> {
        if !self.value_head {
            return Err(CoprError::NoValueHead);
        }
        self.check_dim(example)?;
        let head = &params[self.policy_len..];
        match &self.arch {
            Architecture::Tabular { .. } => example
                .responses
                .iter()
                .map(|r| Ok(head[self.pair(&example.prompt_id, &r.response_id)?]))
                .collect(),
            Architecture::LinearFeature { .. } => Ok((0..example.len())
                .map(|i| S::dot(head, &example.joint_features(i)))
                .collect()),
        }
    }

    pub fn logits(&self, example: &PreferenceExample) -> Result<Vec<f64>> {
        self.logits_with(&self.params, example)
    }

    pub fn logit(&self, example: &PreferenceExample, response: usize) -> Result<f64> {
        Ok(self.logits(example)?[response])
    }

    /// Softmax of the logits restricted to the example's response set.
    pub fn renormalized_distribution(&self, example: &PreferenceExample) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(example)?))
    }

    pub fn value_scores(&self, example: &PreferenceExample) -> Result<Vec<f64>> {
        self.scores_with(&self.params, example)
    }

    pub fn value_score(&self, example: &PreferenceExample, response: usize) -> Result<f64> {
        Ok(self.value_scores(example)?[response])
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    pub fn restore(snapshot: &PolicySnapshot) -> Self {
        (*snapshot.0).clone()
    }

    /// Value and exact gradient of a scalar loss built from `scope`.
    pub fn gradient<F>(&self, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: for<'t> FnOnce(&ParamScope<'t, '_>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let scope = ParamScope {
            params: self.params.iter().map(|&p| tape.var(p)).collect(),
            model: self,
            tape: &tape,
        };
        let out = loss(&scope)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(CoprError::NumericOverflow { op });
        }
        let adjoint = tape.backward(out);
        let grad = scope.params.iter().map(|p| adjoint[p.index()]).collect();
        Ok((out.value(), grad))
    }
}

/// `log_softmax(x)_i = x_i − logsumexp(x)`, shifted by the max for stability.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .map(Scalar::value)
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<S> = logits.iter().map(|&l| l - max).collect();
    let exps: Vec<S> = shifted.iter().map(|&s| s.exp()).collect();
    let lse = S::sum(&exps).ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Frozen copy of a policy. Cheap to clone and share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot(Arc<PolicyModel>);

impl Deref for PolicySnapshot {
    type Target = PolicyModel;
    fn deref(&self) -> &PolicyModel {
        &self.0
    }
}

/// Parameters of a [`PolicyModel`] lifted onto a tape.
pub struct ParamScope<'t, 'm> {
    model: &'m PolicyModel,
    params: Vec<Var<'t>>,
    tape: &'t Tape,
}

/// Anything that can evaluate a policy's logits and scores, either with plain
/// values or on a gradient tape.
pub trait Forward {
    type S: Scalar;
    fn model(&self) -> &PolicyModel;
    fn params(&self) -> &[Self::S];
    fn constant(&self, c: f64) -> Self::S;

    fn logits(&self, example: &PreferenceExample) -> Result<Vec<Self::S>> {
        self.model().logits_with(self.params(), example)
    }

    fn scores(&self, example: &PreferenceExample) -> Result<Vec<Self::S>> {
        self.model().scores_with(self.params(), example)
    }
}

impl Forward for PolicyModel {
    type S = f64;
    fn model(&self) -> &PolicyModel {
        self
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn constant(&self, c: f64) -> f64 {
        c
    }
}

impl<'t> Forward for ParamScope<'t, '_> {
    type S = Var<'t>;
    fn model(&self) -> &PolicyModel {
        self.model
    }
    fn params(&self) -> &[Var<'t>] {
        &self.params
    }
    fn constant(&self, c: f64) -> Var<'t> {
        self.tape.var(c)
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position, decimal string (u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn resume(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| CoprError::InvalidConfig(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    architecture: Architecture,
    value_head: bool,
    param_count: usize,
    params: Vec<f64>,
    rng: Option<RngState>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &PolicyModel, rng: Option<RngState>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: model.arch.clone(),
        value_head: model.value_head,
        param_count: model.params.len(),
        params: model.params.clone(),
        rng,
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| CoprError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PolicyModel, Option<RngState>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CoprError::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(CoprError::InvalidConfig(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let (policy_len, index) = match &file.architecture {
        Architecture::Tabular { pairs } => (pairs.len(), pair_index(pairs)),
        Architecture::LinearFeature { dim, hidden } => (
            match hidden {
                None => 2 * dim,
                Some(h) => h * 2 * dim + 2 * h,
            },
            HashMap::new(),
        ),
    };
    let head_len = match (&file.architecture, file.value_head) {
        (_, false) => 0,
        (Architecture::Tabular { pairs }, true) => pairs.len(),
        (Architecture::LinearFeature { dim, .. }, true) => 2 * dim,
    };
    if file.params.len() != policy_len + head_len || file.param_count != file.params.len() {
        return Err(CoprError::IncompatibleSnapshot {
            model: policy_len + head_len,
            anchor: file.params.len(),
        });
    }
    Ok((
        PolicyModel {
            arch: file.architecture,
            index,
            params: file.params,
            policy_len,
            value_head: file.value_head,
        },
        file.rng,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Response;
    use rand::Rng;

    fn example(id: &str, j: usize, d: usize, seed: u64) -> PreferenceExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreferenceExample {
            prompt_id: id.into(),
            features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            responses: (0..j)
                .map(|i| Response {
                    response_id: format!("r{i}"),
                    features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rank: Some(i + 1),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_linear_model_gives_zero_logits() {
        let mut m = PolicyModel::linear_feature(3, None, true, 1);
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let ex = example("p", 3, 3, 2);
        assert_eq!(m.logits(&ex).unwrap(), vec![0.0; 3]);
        assert_eq!(m.value_scores(&ex).unwrap(), vec![0.0; 3]);
        let u = m.renormalized_distribution(&ex).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn linear_logit_is_linear_in_weights() {
        let mut m = PolicyModel::linear_feature(4, None, false, 5);
        let ex = example("p", 2, 4, 6);
        let before = m.logit(&ex, 1).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p *= 2.0);
        assert!((m.logit(&ex, 1).unwrap() - 2.0 * before).abs() < 1e-12);
    }

    #[test]
    fn tabular_read_back_and_unknown_pair() {
        let ex = example("p", 3, 2, 0);
        let mut m = PolicyModel::tabular([&ex], false);
        m.set_logit("p", "r1", 2.5).unwrap();
        assert_eq!(m.logit(&ex, 1).unwrap(), 2.5);
        let other = example("q", 2, 2, 0);
        assert!(matches!(
            m.logits(&other),
            Err(CoprError::UnknownPair { .. })
        ));
        assert!(matches!(m.value_scores(&ex), Err(CoprError::NoValueHead)));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[-3.0, 997.0]);
        assert!(p[0] < 1e-300 && (p[1] - 1.0).abs() < 1e-15);
        let lp = log_softmax(&[7.0, 7.0, 7.0, 7.0]);
        assert!(lp.iter().all(|l| (l + 4f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn dimension_is_checked() {
        let m = PolicyModel::linear_feature(3, Some(4), false, 0);
        assert!(matches!(
            m.logits(&example("p", 2, 5, 0)),
            Err(CoprError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_isolation() {
        let mut m = PolicyModel::linear_feature(3, Some(5), true, 9);
        let ex = example("p", 4, 3, 1);
        let snap = m.snapshot();
        let again = m.snapshot();
        assert_eq!(snap, again);
        let before = snap.renormalized_distribution(&ex).unwrap();
        m.params_mut()[0] += 1.0;
        assert_eq!(snap.renormalized_distribution(&ex).unwrap(), before);
        let restored = PolicyModel::restore(&snap);
        assert_eq!(restored.renormalized_distribution(&ex).unwrap(), before);
        assert_ne!(m.snapshot(), snap);
    }

    #[test]
    fn gradient_basics() {
        let ex = example("p", 3, 2, 0);
        let m = PolicyModel::tabular([&ex], false);
        let (_, g) = m.gradient(|s| Ok(s.constant(4.0))).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = m
            .gradient(|s| Ok(s.logits(&ex)?[1]))
            .unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_reports_overflow() {
        let ex = example("p", 2, 2, 0);
        let m = PolicyModel::tabular([&ex], false);
        let err = m
            .gradient(|s| Ok((s.logits(&ex)?[0] * 0.0 + 1000.0).exp()))
            .unwrap_err();
        assert!(matches!(err, CoprError::NumericOverflow { op: "exp" }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("copr-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ex = example("p", 3, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: f64 = rng.random();
        for model in [
            PolicyModel::linear_feature(3, Some(4), true, 3),
            PolicyModel::linear_feature(3, None, false, 3),
            PolicyModel::tabular([&ex], true),
        ] {
            let path = dir.join("m.json");
            save_checkpoint(&path, &model, Some(RngState::capture(77, &rng))).unwrap();
            let (back, state) = load_checkpoint(&path).unwrap();
            assert_eq!(back, model);
            let mut resumed = state.unwrap().resume().unwrap();
            let mut original = rng.clone();
            assert_eq!(resumed.random::<u64>(), original.random::<u64>());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
