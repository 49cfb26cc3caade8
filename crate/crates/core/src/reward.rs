//! Rank-derived advantage scores.
//!
//! Only the advantage part of the reward is ever built. The prompt-level
//! expected reward cancels in the sampling distribution, so it has no
//! representation here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::PreferenceExample;
use crate::error::{CoprError, Result};

/// Added `k · TIE_EPSILON` to the k-th sorted Gaussian draw.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageScheme {
    #[default]
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageSpec {
    pub scheme: AdvantageScheme,
    /// Standard deviation of the Gaussian scheme.
    pub sigma: f64,
    /// Seed of the Gaussian scheme.
    pub seed: u64,
    /// KL temperature.
    pub beta: f64,
}

impl Default for AdvantageSpec {
    fn default() -> Self {
        Self {
            scheme: AdvantageScheme::Linear,
            sigma: 1.0,
            seed: 0,
            beta: 1.0,
        }
    }
}

impl AdvantageSpec {
    pub fn linear(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn gaussian(sigma: f64, seed: u64, beta: f64) -> Self {
        Self {
            scheme: AdvantageScheme::Gaussian,
            sigma,
            seed,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CoprError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.scheme == AdvantageScheme::Gaussian && !(self.sigma > 0.0 && self.sigma.is_finite())
        {
            return Err(CoprError::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// `(2j − J − 1) / J`.
pub fn linear_advantage(rank: usize, size: usize) -> Result<f64> {
    if size < 2 || rank == 0 || rank > size {
        return Err(CoprError::RankOutOfRange { rank, size });
    }
    Ok((2.0 * rank as f64 - size as f64 - 1.0) / size as f64)
}

fn prompt_seed(seed: u64, prompt_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `size` sorted draws from `N(0, σ²)`; entry `j − 1` is the advantage of rank
/// `j`. The stream depends only on `(spec.seed, prompt_id)`.
pub fn gaussian_advantages(size: usize, spec: &AdvantageSpec, prompt_id: &str) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(CoprError::RankOutOfRange { rank: size, size });
    }
    let normal = Normal::new(0.0, spec.sigma)
        .map_err(|e| CoprError::InvalidConfig(format!("sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(spec.seed, prompt_id));
    let mut draws: Vec<f64> = (0..size).map(|_| normal.sample(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    for (k, v) in draws.iter_mut().enumerate() {
        *v += k as f64 * TIE_EPSILON;
    }
    Ok(draws)
}

/// Advantages in the example's stored response order.
pub fn advantages_for(example: &PreferenceExample, spec: &AdvantageSpec) -> Result<Vec<f64>> {
    let ranks = example
        .ranks()
        .ok_or_else(|| CoprError::InvalidExample {
            prompt_id: example.prompt_id.clone(),
            reason: "advantages need ranked responses".into(),
        })?;
    let size = example.len();
    match spec.scheme {
        AdvantageScheme::Linear => ranks.iter().map(|&j| linear_advantage(j, size)).collect(),
        AdvantageScheme::Gaussian => {
            let sorted = gaussian_advantages(size, spec, &example.prompt_id)?;
            ranks
                .iter()
                .map(|&j| {
                    sorted
                        .get(j.wrapping_sub(1))
                        .copied()
                        .ok_or(CoprError::RankOutOfRange { rank: j, size })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Response;
    use proptest::prelude::*;

    fn ranked(ranks: &[usize]) -> PreferenceExample {
        PreferenceExample {
            prompt_id: "p".into(),
            features: vec![0.0],
            responses: ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| Response {
                    response_id: format!("r{i}"),
                    features: vec![0.0],
                    rank: Some(r),
                })
                .collect(),
        }
    }

    #[test]
    fn linear_values() {
        assert!((linear_advantage(1, 3).unwrap() + 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(linear_advantage(2, 3).unwrap(), 0.0);
        assert!((linear_advantage(3, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(linear_advantage(1, 2).unwrap(), -0.5);
        assert_eq!(linear_advantage(2, 2).unwrap(), 0.5);
        for j in 1..5 {
            let step = linear_advantage(j + 1, 5).unwrap() - linear_advantage(j, 5).unwrap();
            assert!((step - 0.4).abs() < 1e-15);
        }
        assert!(matches!(
            linear_advantage(0, 3),
            Err(CoprError::RankOutOfRange { .. })
        ));
        assert!(linear_advantage(4, 3).is_err());
    }

    #[test]
    fn permuted_example() {
        let adv = advantages_for(&ranked(&[2, 1, 3]), &AdvantageSpec::default()).unwrap();
        assert_eq!(adv[0], 0.0);
        assert!((adv[1] + 2.0 / 3.0).abs() < 1e-15);
        assert!((adv[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_is_deterministic_and_sorted() {
        let spec = AdvantageSpec::gaussian(1.0, 42, 1.0);
        let ex = ranked(&[3, 1, 4, 2]);
        let a = advantages_for(&ex, &spec).unwrap();
        assert_eq!(a, advantages_for(&ex, &spec).unwrap());
        let argmax = a
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
        let other = gaussian_advantages(4, &spec, "another-prompt").unwrap();
        assert_ne!(other, gaussian_advantages(4, &spec, "p").unwrap());
    }

    #[test]
    fn gaussian_small_sigma_collapses() {
        let spec = AdvantageSpec::gaussian(1e-12, 3, 1.0);
        let v = gaussian_advantages(6, &spec, "p").unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-10));
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn gaussian_moments() {
        // 10^5 draws pooled from 50_000 prompts of size 2.
        let sigma = 1.7;
        let spec = AdvantageSpec::gaussian(sigma, 9, 1.0);
        let draws: Vec<f64> = (0..50_000)
            .flat_map(|i| gaussian_advantages(2, &spec, &format!("p{i}")).unwrap())
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn spec_validation() {
        assert!(AdvantageSpec::linear(0.0).validate().is_err());
        assert!(AdvantageSpec::gaussian(-1.0, 0, 1.0).validate().is_err());
        assert!(AdvantageSpec::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn linear_is_bounded_centered_monotone(size in 2usize..40) {
            let v: Vec<f64> = (1..=size).map(|j| linear_advantage(j, size).unwrap()).collect();
            prop_assert!(v.iter().all(|x| *x > -1.0 && *x < 1.0));
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
            // Integer numerators sum to zero exactly.
            let numer: i64 = (1..=size as i64).map(|j| 2 * j - size as i64 - 1).sum();
            prop_assert_eq!(numer, 0);
            prop_assert!(v.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn gaussian_strictly_increasing(size in 2usize..12, seed in any::<u64>()) {
            let spec = AdvantageSpec::gaussian(1.0, seed, 1.0);
            let v = gaussian_advantages(size, &spec, "x").unwrap();
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
