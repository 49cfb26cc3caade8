use copr_core::autodiff::Scalar;
use copr_core::baselines::sft_loss;
use copr_core::benchgen::{generate_benchmark, strip_labels, BenchConfig};
use copr_core::metrics::forgetting_measure;
use copr_core::optim::OptimizerKind;
use copr_core::policy::{load_checkpoint, save_checkpoint};
use copr_core::trainer::*;
use copr_core::{CoprError, TaskSequence};

fn small(seed: u64, cosine: f64) -> TaskSequence {
    generate_benchmark(&BenchConfig {
        seed,
        cosine,
        dim: 4,
        n_train: 40,
        n_test: 20,
        ..BenchConfig::til()
    })
    .unwrap()
    .sequence
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        steps_per_task: 30,
        batch_size: 8,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_deterministic() {
    let seq = small(1, 0.3);
    for method in Method::ALL {
        let config = TrainConfig {
            value_head: true,
            eval_every: 10,
            ..quick(method)
        };
        let a = train_sequence(&seq, &config, &mut accuracy_hook).unwrap();
        let b = train_sequence(&seq, &config, &mut accuracy_hook).unwrap();
        assert_eq!(a, b, "{}", method.name());
        assert_eq!(a.scores.len(), 3);
        assert!(a.scores.is_complete());
        assert_eq!(a.checkpoints.len(), 3);
        assert_eq!(a.curves.len(), 3 * (1 + 2 + 3));
    }
}

#[test]
fn every_method_consumes_the_same_examples() {
    let seq = small(2, 0.0);
    let consumed: Vec<Vec<usize>> = Method::ALL
        .iter()
        .map(|&m| {
            train_sequence(&seq, &quick(m), &mut accuracy_hook)
                .unwrap()
                .examples_consumed
        })
        .collect();
    assert!(consumed.windows(2).all(|w| w[0] == w[1]), "{consumed:?}");
    assert_eq!(consumed[0], vec![30 * 8; 3]);
}

#[test]
fn each_task_starts_from_the_previous_parameters() {
    let seq = small(3, 0.0);
    let config = TrainConfig {
        method: Method::Sft,
        optimizer: OptimizerKind::Sgd,
        steps_per_task: 1,
        batch_size: 0,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let model = build_model(&seq, &config).unwrap();
    let mut trainer = Trainer::new(config.clone(), model).unwrap();
    trainer.train_task(&seq.tasks[..1], &mut accuracy_hook).unwrap();
    let after_first = trainer.model().clone();
    trainer.train_task(&seq.tasks[..2], &mut accuracy_hook).unwrap();

    let task = &seq.tasks[1];
    let (_, grad) = after_first
        .gradient(|s| {
            let terms = task
                .examples
                .iter()
                .map(|ex| sft_loss(s, ex))
                .collect::<copr_core::Result<Vec<_>>>()?;
            Ok(Scalar::sum(&terms) / terms.len() as f64)
        })
        .unwrap();
    let expected: Vec<f64> = after_first
        .params()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - config.lr * g)
        .collect();
    assert_eq!(trainer.model().params(), &expected[..]);
    assert_eq!(*trainer.record().checkpoints[0], after_first);
}

#[test]
fn frozen_anchors_never_change() {
    let seq = small(4, 0.2);
    let config = TrainConfig {
        replay_fraction: 0.1,
        ..quick(Method::Copr)
    };
    let model = build_model(&seq, &config).unwrap();
    let mut trainer = Trainer::new(config, model).unwrap();
    trainer.train_task(&seq.tasks[..1], &mut accuracy_hook).unwrap();
    let first = trainer.replay().entries().to_vec();
    assert_eq!(first.len(), 4);
    for t in 2..=3 {
        trainer.train_task(&seq.tasks[..t], &mut accuracy_hook).unwrap();
    }
    let last = trainer.replay().entries();
    assert_eq!(last.len(), 12);
    for (a, b) in first.iter().zip(last) {
        assert_eq!(serde_json::to_vec(a).unwrap(), serde_json::to_vec(b).unwrap());
    }
}

#[test]
fn tabular_fit_loss_never_increases() {
    let seq = small(5, 0.0);
    let one = TaskSequence::new(vec![seq.tasks[0].clone()], seq.mode).unwrap();
    let config = TrainConfig {
        steps_per_task: 300,
        ..TrainConfig::tabular()
    };
    let record = train_sequence(&one, &config, &mut accuracy_hook).unwrap();
    let fit: Vec<f64> = record.losses.iter().map(|l| l.fit).collect();
    assert!(fit[0] > 0.0);
    for w in fit.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn unlabeled_tasks_are_rejected() {
    let seq = small(6, 0.0);
    let stripped = TaskSequence::new(vec![strip_labels(&seq.tasks[0])], seq.mode).unwrap();
    let err = train_sequence(&stripped, &quick(Method::Copr), &mut accuracy_hook).unwrap_err();
    assert!(matches!(err, CoprError::UnlabeledData(1)), "{err}");
}

#[test]
fn divergence_reports_step_and_component() {
    let seq = small(7, 0.0);
    // An oversized L2 coefficient makes every SGD step amplify the drift.
    let config = TrainConfig {
        method: Method::SftL2,
        lambda_method: 1e100,
        lr: 1.0,
        steps_per_task: 10,
        ..TrainConfig::tabular()
    };
    match train_sequence(&seq, &config, &mut accuracy_hook) {
        Err(CoprError::NonFiniteLoss { step, component }) => {
            assert!(step > 0 && step < 10, "step {step}");
            assert_eq!(component, "reg");
        }
        other => panic!("expected non-finite-loss, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let seq = small(8, 0.0);
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            steps_per_task: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            replay_fraction: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            replay_fraction: 1.5,
            ..TrainConfig::default()
        },
    ] {
        assert!(train_sequence(&seq, &bad, &mut accuracy_hook).is_err());
    }
    let err = "ppo".parse::<Method>().unwrap_err().to_string();
    for m in Method::ALL {
        assert!(err.contains(m.name()), "{err}");
    }
}

#[test]
fn trained_checkpoint_round_trips() {
    let seq = small(9, 0.0);
    let config = TrainConfig {
        hidden: 3,
        value_head: true,
        ..quick(Method::Copr)
    };
    let record = train_sequence(&seq, &config, &mut accuracy_hook).unwrap();
    let model = &*record.checkpoints[2];
    let path = std::env::temp_dir().join(format!("copr-ckpt-{}.json", std::process::id()));
    save_checkpoint(&path, model, None).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(&back, model);
    for ex in seq.all_examples() {
        assert_eq!(back.logits(ex).unwrap(), model.logits(ex).unwrap());
    }
}

fn final_fm(seq: &TaskSequence, config: &TrainConfig) -> f64 {
    let record = train_sequence(seq, config, &mut accuracy_hook).unwrap();
    forgetting_measure(&record.scores, record.scores.len()).unwrap()
}

#[test]
fn regularization_reduces_forgetting_on_two_tasks() {
    let mut wins = 0;
    for seed in 0..5 {
        let seq = generate_benchmark(&BenchConfig {
            seed,
            tasks: 2,
            ..BenchConfig::til()
        })
        .unwrap()
        .sequence;
        let base = TrainConfig {
            seed,
            steps_per_task: 500,
            ..TrainConfig::til()
        };
        let with = final_fm(&seq, &TrainConfig { lambda_reg: 1.0, ..base.clone() });
        let without = final_fm(&seq, &TrainConfig { lambda_reg: 0.0, ..base });
        if with <= without {
            wins += 1;
        }
    }
    assert!(wins >= 4, "λ_reg = 1 forgot no more than λ_reg = 0 in only {wins}/5 seeds");
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn sft_forgetting_falls_as_tasks_align() {
    let cosines = [0.0, 0.5, 0.9, 1.0];
    let mut mean_fm = Vec::new();
    for &c in &cosines {
        let mut total = 0.0;
        for seed in 0..5 {
            let seq = generate_benchmark(&BenchConfig {
                seed,
                cosine: c,
                prompt_shift: 0.0,
                prompt_scale_step: 0.0,
                ..BenchConfig::til()
            })
            .unwrap()
            .sequence;
            let config = TrainConfig {
                method: Method::Sft,
                seed,
                ..TrainConfig::default()
            };
            total += final_fm(&seq, &config) / 5.0;
        }
        mean_fm.push(total);
    }
    let neg: Vec<f64> = mean_fm.iter().map(|f| -f).collect();
    let rho = spearman(&cosines, &neg);
    assert!(rho > 0.0, "mean FM by cosine {mean_fm:?}, spearman {rho}");
}
