use copr_core::benchgen::*;
use copr_core::{CoprError, Mode, PolicyModel, TaskDataset};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn latent(task_id: usize, prefix: &str, weights: Vec<f64>, n_train: usize, n_test: usize) -> LatentTask {
    LatentTask {
        task_id,
        id_prefix: prefix.into(),
        weights,
        n_train,
        n_test,
        min_responses: 2,
        max_responses: 4,
        prompt_shift: 0.0,
        prompt_scale: 1.0,
        reference: None,
        target_cosine: None,
    }
}

fn small_til(seed: u64, cosine: f64) -> BenchConfig {
    BenchConfig {
        seed,
        cosine,
        dim: 4,
        n_train: 30,
        n_test: 10,
        ..BenchConfig::til()
    }
}

#[test]
fn til_preset_shape() {
    let bench = generate_benchmark(&BenchConfig::til()).unwrap();
    assert_eq!(bench.sequence.len(), 3);
    assert_eq!(bench.sequence.mode, Mode::Til);
    for (t, task) in bench.sequence.tasks.iter().enumerate() {
        assert_eq!(task.task_id, t + 1);
        assert_eq!(task.examples.len(), 500);
        assert_eq!(task.test.len(), 200);
        assert!(task.all_examples().all(|e| e.dim() == 16 && (2..=4).contains(&e.len())));
    }
    for spec in &bench.latent {
        spec.validate().unwrap();
    }
}

#[test]
fn cosine_one_repeats_the_scorer() {
    let bench = generate_benchmark(&small_til(3, 1.0)).unwrap();
    let w: Vec<&Vec<f64>> = bench.latent.iter().map(|l| &l.weights).collect();
    for pair in w.windows(2) {
        for (a, b) in pair[0].iter().zip(pair[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn consecutive_cosines_hit_target() {
    for c in [0.0, 0.3, 0.7, 0.95] {
        let bench = generate_benchmark(&small_til(11, c)).unwrap();
        for pair in bench.latent.windows(2) {
            assert!((cosine(&pair[0].weights, &pair[1].weights) - c).abs() < COSINE_TOLERANCE);
        }
    }
}

#[test]
fn refit_recovers_rank_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let task = generate_task(&latent(1, "r", random_weights(16, &mut rng), 500, 200), 5).unwrap();
    let fit = ScorerFit {
        steps: 3000,
        ..ScorerFit::default()
    };
    let (model, _) = fit_scorer(&task, &fit).unwrap();
    let exact = task
        .test
        .iter()
        .filter(|ex| {
            let s = model.value_scores(ex).unwrap();
            let ranks = ex.ranks().unwrap();
            (0..s.len()).all(|i| (0..s.len()).all(|j| ranks[i] <= ranks[j] || s[i] > s[j]))
        })
        .count();
    let rate = exact as f64 / task.test.len() as f64;
    assert!(rate >= 0.99, "exact rank recovery {rate}");
}

#[test]
fn identical_domains_do_not_degrade() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random_weights(6, &mut rng);
    let a = generate_task(&latent(1, "a", w.clone(), 300, 400), 1).unwrap();
    let b = generate_task(&latent(2, "b", w, 300, 400), 2).unwrap();
    let m = degradation_matrix(&[a, b], &ScorerFit::default()).unwrap();
    assert_eq!(m.values[0][0], 0.0);
    assert_eq!(m.values[1][1], 0.0);
    assert!(m.values[0][1].abs() < 0.02, "{:?}", m.values);
    assert!(m.values[1][0].abs() < 0.02, "{:?}", m.values);
}

#[test]
fn orthogonal_domains_drop_to_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w1 = random_weights(8, &mut rng);
    let w2 = interfering_weights(&w1, 0.0, &mut rng);
    let a = generate_task(&latent(1, "a", w1, 300, 400), 1).unwrap();
    let b = generate_task(&latent(2, "b", w2, 300, 400), 2).unwrap();
    let m = degradation_matrix(&[a, b], &ScorerFit::default()).unwrap();
    for (i, j) in [(0, 1), (1, 0)] {
        assert!((m.values[i][j] + 0.5).abs() < 0.05, "{:?}", m.values);
    }
}

#[test]
fn unfittable_domain_is_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = generate_task(&latent(1, "a", random_weights(3, &mut rng), 40, 10), 1).unwrap();
    let b = generate_task(&latent(2, "b", random_weights(3, &mut rng), 40, 10), 2).unwrap();
    let fit = ScorerFit {
        steps: 1,
        lr: 1e-6,
        ..ScorerFit::default()
    };
    match degradation_matrix(&[a, b], &fit) {
        Err(CoprError::FitFailed { domain: 1, .. }) => {}
        other => panic!("expected fit-failed for domain 1, got {other:?}"),
    }
}

fn planted(blocks: &[usize], n: usize) -> DegradationMatrix {
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else if blocks[i] == blocks[j] {
                        -0.05 - 0.01 * ((i + j) % 3) as f64
                    } else {
                        -0.4 - 0.01 * ((i * j) % 5) as f64
                    }
                })
                .collect()
        })
        .collect();
    DegradationMatrix::from_values(values).unwrap()
}

#[test]
fn planted_blocks_are_recovered() {
    let blocks = [0, 1, 0, 0, 1, 1, 0, 1];
    let groups = group_domains(&planted(&blocks, 8), 2).unwrap();
    assert_eq!(groups, vec![vec![0, 2, 3, 6], vec![1, 4, 5, 7]]);
}

#[test]
fn uneven_groups_differ_by_at_most_one() {
    let blocks = [0, 1, 2, 0, 1, 2, 0];
    let groups = group_domains(&planted(&blocks, 7), 3).unwrap();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 7);
}

fn random_matrix(seed: u64, n: usize) -> DegradationMatrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { -rng.random_range(0.0..0.5) })
                .collect()
        })
        .collect();
    DegradationMatrix::from_values(values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grouping_is_label_equivariant(seed in 0u64..1000, n in 3usize..10, k in 1usize..4) {
        let k = k.min(n);
        let m = random_matrix(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        // Domain i of the permuted matrix is domain perm[i] of the original.
        let permuted = DegradationMatrix::from_values(
            (0..n).map(|i| (0..n).map(|j| m.values[perm[i]][perm[j]]).collect()).collect(),
        ).unwrap();
        let original = group_domains(&m, k).unwrap();
        let mut mapped: Vec<Vec<usize>> = group_domains(&permuted, k)
            .unwrap()
            .into_iter()
            .map(|g| { let mut g: Vec<usize> = g.into_iter().map(|i| perm[i]).collect(); g.sort(); g })
            .collect();
        mapped.sort();
        prop_assert_eq!(original, mapped);
    }

    #[test]
    fn grouping_is_a_balanced_partition(seed in 0u64..1000, n in 1usize..12, k in 1usize..6) {
        let k = k.min(n);
        let groups = group_domains(&random_matrix(seed, n), k).unwrap();
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn generated_ranks_follow_latent_scores(seed in 0u64..500, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = generate_task(&latent(1, "g", random_weights(dim, &mut rng), 20, 5), seed).unwrap();
        let scorer = task.latent.clone().unwrap();
        for ex in task.all_examples() {
            let s = scorer.scores(ex);
            let r = ex.ranks().unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    prop_assert!(!(s[i] < s[j]) || r[i] < r[j]);
                }
            }
        }
    }
}

#[test]
fn too_many_groups() {
    assert!(matches!(
        group_domains(&random_matrix(1, 3), 5),
        Err(CoprError::TooManyGroups { groups: 5, domains: 3 })
    ));
}

fn labeled_task(seed: u64) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_task(&latent(1, "u", random_weights(5, &mut rng), 400, 20), seed).unwrap()
}

#[test]
fn random_scorers_agree_at_chance() {
    use rand::Rng;
    let task = labeled_task(7);
    let stripped = strip_labels(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    // Each chunk of prompts is labeled by an independent random head.
    let (mut agree, mut pairs) = (0.0, 0usize);
    for chunk in 0..40 {
        let range = chunk * 10..(chunk + 1) * 10;
        let part = |d: &TaskDataset| TaskDataset {
            examples: d.examples[range.clone()].to_vec(),
            ..d.clone()
        };
        let mut scorer = PolicyModel::linear_feature(5, None, true, chunk as u64);
        let head = scorer.head_range();
        for p in &mut scorer.params_mut()[head] {
            *p = rng.random_range(-1.0..1.0);
        }
        let relabeled = relabel_with_scorer(&part(&stripped), &scorer).unwrap();
        let (a, n) = pairwise_agreement(&part(&task), &relabeled).unwrap();
        agree += a * n as f64;
        pairs += n;
    }
    let rate = agree / pairs as f64;
    assert!(pairs >= 1000, "{pairs} pairs");
    assert!((rate - 0.5).abs() < 0.05, "agreement {rate}");
}

#[test]
fn latent_scorer_relabel_matches_truth() {
    let task = labeled_task(8);
    let relabeled = relabel_with_latent(&strip_labels(&task), task.latent.as_ref().unwrap()).unwrap();
    assert_eq!(pairwise_agreement(&task, &relabeled).unwrap().0, 1.0);
    assert_eq!(relabeled, task);
}

#[test]
fn strip_keeps_test_labels() {
    let task = labeled_task(9);
    let stripped = strip_labels(&task);
    assert!(stripped.examples.iter().all(|e| !e.is_labeled()));
    assert_eq!(stripped.test, task.test);
}

#[test]
fn benchmark_files_are_deterministic_and_verified() {
    let a = tempdir("a");
    let b = tempdir("b");
    let config = small_til(5, 0.2);
    let ma = write_benchmark(&generate_benchmark(&config).unwrap(), &a).unwrap();
    let mb = write_benchmark(&generate_benchmark(&config).unwrap(), &b).unwrap();
    assert_eq!(ma, mb);
    for f in [MANIFEST_FILE, LATENT_FILE, &task_file(1), &task_file(2), &task_file(3)] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (manifest, seq) = load_benchmark(&a).unwrap();
    assert_eq!(manifest, ma);
    assert_eq!(seq, generate_benchmark(&config).unwrap().sequence);

    let path = a.join(task_file(2));
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_benchmark(&a), Err(CoprError::StaleBenchmark { .. })));
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("copr-benchgen-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn dil_preset_groups_eighteen_domains() {
    let config = BenchConfig {
        n_train: 200,
        n_test: 100,
        ..BenchConfig::dil()
    };
    let bench = generate_benchmark(&config).unwrap();
    let groups = bench.grouping.clone().unwrap();
    assert_eq!(bench.domains.len(), 18);
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g.len() == 6));
    // The planted clusters are domains congruent mod 3.
    for g in &groups {
        assert!(g.iter().all(|d| d % 3 == g[0] % 3), "{groups:?}");
    }
    for (task, g) in bench.sequence.tasks.iter().zip(&groups) {
        assert_eq!(task.examples.len(), 6 * 200);
        assert_eq!(task.test.len(), 6 * 100);
        assert_eq!(task.examples[0].prompt_id, format!("d{}-p0", g[0]));
    }
    let m = bench.degradation.unwrap();
    assert!((0..18).all(|i| m.values[i][i] == 0.0));
}
