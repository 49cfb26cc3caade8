//! Fixtures shared by the criterion benchmarks.

use copr_core::benchgen::{generate_task, random_weights, LatentTask};
use copr_core::TaskDataset;
use rand::SeedableRng;

/// A seeded synthetic task with `n` training prompts of per-side dimension `dim`.
pub fn fixture_task(dim: usize, n: usize, seed: u64) -> TaskDataset {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = LatentTask {
        task_id: 1,
        id_prefix: "b".into(),
        weights: random_weights(dim, &mut rng),
        n_train: n,
        n_test: 0,
        min_responses: 2,
        max_responses: 4,
        prompt_shift: 0.0,
        prompt_scale: 1.0,
        reference: None,
        target_cosine: None,
    };
    generate_task(&spec, seed).expect("fixture spec is valid")
}
