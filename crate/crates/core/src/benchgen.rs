//! Synthetic preference benchmarks with controllable inter-task interference.
//!
//! Each task owns a latent linear scorer `s(x, y) = w · (x ⊕ y)`; responses
//! are ranked by it. Consecutive tasks (or domains and their cluster centre)
//! are tied by a target cosine between their `w`, applied separately to the
//! prompt half and the response half so that ranking behaviour, which only
//! sees the response half, inherits the same cosine.
//!
//! The domain-incremental preset generates many domains, fits one scorer per
//! domain, builds the cross-domain degradation matrix and partitions the
//! domains into super-tasks with [`group_domains`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    load_tasks, save_tasks, LatentScorer, Mode, PreferenceExample, Response, TaskDataset,
    TaskSequence,
};
use crate::error::{CoprError, Result};
use crate::objective::ranking_loss;
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::PolicyModel;
use crate::trainer::pairwise_accuracy;

/// Tolerance on the realized cosine to the reference scorer.
pub const COSINE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTask {
    pub task_id: usize,
    /// Prefix of generated prompt ids, unique within a benchmark.
    pub id_prefix: String,
    /// Unit-norm weights over `x ⊕ y` (length `2d`).
    pub weights: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub min_responses: usize,
    pub max_responses: usize,
    /// Prompt features are `shift + scale · N(0, 1)` per coordinate.
    pub prompt_shift: f64,
    pub prompt_scale: f64,
    /// Designated previous scorer and the cosine `weights` keeps to it.
    pub reference: Option<Vec<f64>>,
    pub target_cosine: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Unit vector at exactly `cos` to `reference` (which must be nonzero).
fn rotate_from(reference: &[f64], cos: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = unit(reference.to_vec());
    let mut u = gaussian_vec(rng, r.len());
    let proj = dot(&u, &r);
    u.iter_mut().zip(&r).for_each(|(x, ri)| *x -= proj * ri);
    let u = unit(u);
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    r.iter().zip(&u).map(|(a, b)| cos * a + sin * b).collect()
}

/// Random unit weights with equal mass on the prompt and response halves.
pub fn random_weights(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut w: Vec<f64> = unit(gaussian_vec(rng, dim))
        .into_iter()
        .map(|x| x * scale)
        .collect();
    w.extend(unit(gaussian_vec(rng, dim)).into_iter().map(|x| x * scale));
    w
}

/// Unit weights whose prompt half and response half each sit at `cos` to
/// the corresponding half of `reference`.
pub fn interfering_weights(reference: &[f64], cos: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = reference.len() / 2;
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut w: Vec<f64> = rotate_from(&reference[..d], cos, rng)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    w.extend(
        rotate_from(&reference[d..], cos, rng)
            .into_iter()
            .map(|x| x * scale),
    );
    w
}

impl LatentTask {
    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoprError::InvalidConfig(format!("latent task {}: {m}", self.task_id)));
        if self.weights.is_empty() || !self.weights.len().is_multiple_of(2) {
            return bad("weights must have even, nonzero length".into());
        }
        if (norm(&self.weights) - 1.0).abs() > 1e-9 {
            return bad(format!("weights have norm {}", norm(&self.weights)));
        }
        if self.n_train == 0 {
            return bad("n_train must be >= 1".into());
        }
        if self.min_responses < 2 || self.max_responses < self.min_responses {
            return bad(format!(
                "response range {}..={} invalid",
                self.min_responses, self.max_responses
            ));
        }
        if !(self.prompt_scale > 0.0) {
            return bad("prompt_scale must be positive".into());
        }
        if let (Some(r), Some(c)) = (&self.reference, self.target_cosine) {
            if r.len() != self.weights.len() {
                return bad("reference length differs from weights".into());
            }
            let realized = cosine(&self.weights, r);
            if (realized - c).abs() > COSINE_TOLERANCE {
                return bad(format!("cosine to reference {realized:.4}, target {c:.4}"));
            }
        }
        Ok(())
    }

    pub fn scorer(&self) -> LatentScorer {
        LatentScorer(self.weights.clone())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("latent task serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Ranks (1-based) for `scores`: ascending score, ties broken by index.
fn ranks_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// Train and test examples for one latent task, deterministic in `seed`.
pub fn generate_task(spec: &LatentTask, seed: u64) -> Result<TaskDataset> {
    spec.validate()?;
    let d = spec.dim();
    let scorer = spec.scorer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |tag: &str, i: usize, rng: &mut ChaCha8Rng| {
        let features: Vec<f64> = gaussian_vec(rng, d)
            .into_iter()
            .map(|z| spec.prompt_shift + spec.prompt_scale * z)
            .collect();
        let size = rng.random_range(spec.min_responses..=spec.max_responses);
        let mut responses: Vec<Response> = (0..size)
            .map(|r| Response {
                response_id: format!("r{r}"),
                features: gaussian_vec(rng, d),
                rank: None,
            })
            .collect();
        let scores: Vec<f64> = responses
            .iter()
            .map(|r| scorer.score(&features, &r.features))
            .collect();
        for (r, rank) in responses.iter_mut().zip(ranks_from_scores(&scores)) {
            r.rank = Some(rank);
        }
        PreferenceExample::new(format!("{}-{tag}{i}", spec.id_prefix), features, responses)
    };
    let train = (0..spec.n_train)
        .map(|i| make("p", i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.n_test)
        .map(|i| make("q", i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut task = TaskDataset::new(spec.task_id, train)?.with_test(test);
    task.latent = Some(scorer);
    Ok(task)
}

/// Settings for fitting a per-domain ranking scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerFit {
    pub lr: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    /// Mean pairwise ranking loss that counts as converged.
    pub max_loss: f64,
    pub seed: u64,
}

impl Default for ScorerFit {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 300,
            batch_size: 0,
            max_loss: 0.3,
            seed: 0,
        }
    }
}

/// Fit a linear value head with the pairwise ranking loss on the training
/// split. Returns the model and its final mean ranking loss.
pub fn fit_scorer(task: &TaskDataset, fit: &ScorerFit) -> Result<(PolicyModel, f64)> {
    let dim = task.examples[0].dim();
    let mut model = PolicyModel::linear_feature(dim, None, true, fit.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, fit.lr, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let n = task.examples.len();
    for _ in 0..fit.steps {
        let batch: Vec<&PreferenceExample> = if fit.batch_size == 0 || fit.batch_size >= n {
            task.examples.iter().collect()
        } else {
            rand::seq::index::sample(&mut rng, n, fit.batch_size)
                .into_iter()
                .map(|i| &task.examples[i])
                .collect()
        };
        let (_, grad) = model.gradient(|s| {
            let terms = batch
                .iter()
                .map(|ex| ranking_loss(s, ex))
                .collect::<Result<Vec<_>>>()?;
            Ok(crate::autodiff::Scalar::sum(&terms) / terms.len() as f64)
        })?;
        opt.step(model.params_mut(), &grad);
    }
    let mut loss = 0.0;
    for ex in &task.examples {
        loss += ranking_loss(&model, ex)?;
    }
    Ok((model, loss / n as f64))
}

/// Value-head pairwise accuracy on a task's evaluation split.
pub fn scorer_accuracy(model: &PolicyModel, task: &TaskDataset) -> Result<f64> {
    pairwise_accuracy(task.eval_split(), |ex| model.value_scores(ex))
}

/// `values[i][j]`: accuracy on domain `j` of the scorer fit to domain `i`,
/// minus its accuracy on domain `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationMatrix {
    pub values: Vec<Vec<f64>>,
    pub accuracy: Vec<Vec<f64>>,
}

impl DegradationMatrix {
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values.len();
        for (i, row) in values.iter().enumerate() {
            if row.len() != n {
                return Err(CoprError::InvalidConfig("degradation matrix must be square".into()));
            }
            if row[i] != 0.0 {
                return Err(CoprError::InvalidConfig(format!(
                    "degradation diagonal entry {i} is {}",
                    row[i]
                )));
            }
        }
        Ok(Self {
            accuracy: Vec::new(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV: one row per training domain, one column per evaluated domain.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.len();
        let header: Vec<String> = std::iter::once("train_domain".to_string())
            .chain((1..=n).map(|j| format!("d{j}")))
            .collect();
        let csv_err = |e: csv::Error| CoprError::InvalidConfig(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.values.iter().enumerate() {
            let rec: Vec<String> = std::iter::once(format!("d{}", i + 1))
                .chain(row.iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CoprError::io("<degradation csv>", e))
    }
}

/// Fit one ranking scorer per domain (in parallel) and cross-evaluate.
pub fn degradation_matrix(domains: &[TaskDataset], fit: &ScorerFit) -> Result<DegradationMatrix> {
    if domains.len() < 2 {
        return Err(CoprError::InvalidConfig(
            "degradation matrix needs at least 2 domains".into(),
        ));
    }
    let fitted: Vec<Result<PolicyModel>> = std::thread::scope(|scope| {
        let handles: Vec<_> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                scope.spawn(move || {
                    let (model, loss) = fit_scorer(d, fit)?;
                    if !(loss <= fit.max_loss) {
                        return Err(CoprError::FitFailed { domain: i + 1, loss });
                    }
                    Ok(model)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scorer thread panicked"))
            .collect()
    });
    let models = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    let accuracy = models
        .iter()
        .map(|m| domains.iter().map(|d| scorer_accuracy(m, d)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let values = accuracy
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|a| a - row[i]).collect())
        .collect();
    Ok(DegradationMatrix { values, accuracy })
}

fn group_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|g| n / k + usize::from(g < n % k)).collect()
}

fn partition_score(dist: &[Vec<f64>], label: &[usize]) -> f64 {
    let (mut out_sum, mut out_n, mut in_sum, mut in_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..label.len() {
        for j in 0..label.len() {
            if i == j {
                continue;
            }
            if label[i] == label[j] {
                in_sum += dist[i][j];
                in_n += 1;
            } else {
                out_sum += dist[i][j];
                out_n += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(out_sum, out_n) - mean(in_sum, in_n)
}

/// Balanced partition of the domains into `k` groups that maximizes mean
/// out-of-group degradation magnitude minus mean in-group magnitude.
///
/// Farthest-point seeding, greedy balanced filling, then best-improvement
/// pairwise swaps. Groups are returned sorted, each group ascending.
pub fn group_domains(matrix: &DegradationMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = matrix.len();
    if k == 0 || k > n {
        return Err(CoprError::TooManyGroups { groups: k, domains: n });
    }
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| 0.5 * (matrix.values[i][j].abs() + matrix.values[j][i].abs()))
                .collect()
        })
        .collect();
    let argmax = |cands: &mut dyn Iterator<Item = (usize, f64)>| {
        cands
            .fold(None::<(usize, f64)>, |best, (i, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    };
    let sizes = group_sizes(n, k);
    let mut label = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];

    // Seeds: most distinct domain first, then farthest from existing seeds.
    for g in 0..k {
        let seed = if g == 0 {
            argmax(&mut (0..n).map(|i| (i, dist[i].iter().sum::<f64>())))
        } else {
            argmax(
                &mut (0..n)
                    .filter(|&i| label[i] == usize::MAX)
                    .map(|i| {
                        let near = members[..g]
                            .iter()
                            .map(|m| dist[i][m[0]])
                            .fold(f64::INFINITY, f64::min);
                        (i, near)
                    }),
            )
        }
        .expect("unassigned domain available");
        label[seed] = g;
        members[g].push(seed);
    }

    // Fill: each group in turn takes its closest unassigned domain.
    while label.contains(&usize::MAX) {
        for g in 0..k {
            if members[g].len() >= sizes[g] {
                continue;
            }
            let pick = argmax(
                &mut (0..n).filter(|&i| label[i] == usize::MAX).map(|i| {
                    let mean = members[g].iter().map(|&m| dist[i][m]).sum::<f64>()
                        / members[g].len() as f64;
                    (i, -mean)
                }),
            );
            if let Some(i) = pick {
                label[i] = g;
                members[g].push(i);
            }
        }
    }

    // Swap refinement.
    let mut current = partition_score(&dist, &label);
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            for b in (a + 1)..n {
                if label[a] == label[b] {
                    continue;
                }
                label.swap(a, b);
                let s = partition_score(&dist, &label);
                label.swap(a, b);
                if s > current + 1e-12 && best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        match best {
            Some((a, b, s)) => {
                label.swap(a, b);
                current = s;
            }
            None => break,
        }
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &g) in label.iter().enumerate() {
        groups[g].push(i);
    }
    groups.sort();
    Ok(groups)
}

/// Remove preference ranks from the training split; the held-out split keeps
/// its ground truth for evaluation.
pub fn strip_labels(dataset: &TaskDataset) -> TaskDataset {
    TaskDataset {
        examples: dataset
            .examples
            .iter()
            .map(PreferenceExample::without_ranks)
            .collect(),
        ..dataset.clone()
    }
}

fn relabel_by<F>(dataset: &TaskDataset, mut score: F) -> Result<TaskDataset>
where
    F: FnMut(&PreferenceExample) -> Result<Vec<f64>>,
{
    let examples = dataset
        .examples
        .iter()
        .map(|ex| {
            let ranks = ranks_from_scores(&score(ex)?);
            let mut out = ex.clone();
            for (r, rank) in out.responses.iter_mut().zip(ranks) {
                r.rank = Some(rank);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskDataset {
        examples,
        ..dataset.clone()
    })
}

/// Rank training responses by ascending value-head score (ties by index).
pub fn relabel_with_scorer(dataset: &TaskDataset, model: &PolicyModel) -> Result<TaskDataset> {
    if !model.has_value_head() {
        return Err(CoprError::NoValueHead);
    }
    relabel_by(dataset, |ex| model.value_scores(ex))
}

/// Rank training responses by a latent ground-truth scorer.
pub fn relabel_with_latent(dataset: &TaskDataset, scorer: &LatentScorer) -> Result<TaskDataset> {
    relabel_by(dataset, |ex| Ok(scorer.scores(ex)))
}

/// Fraction of response pairs ordered the same way in both datasets'
/// training splits, and the number of pairs compared.
pub fn pairwise_agreement(truth: &TaskDataset, other: &TaskDataset) -> Result<(f64, usize)> {
    let mut agree = 0usize;
    let mut total = 0usize;
    for (a, b) in truth.examples.iter().zip(&other.examples) {
        let (Some(ra), Some(rb)) = (a.ranks(), b.ranks()) else {
            return Err(CoprError::UnlabeledData(truth.task_id));
        };
        for i in 0..ra.len() {
            for j in (i + 1)..ra.len() {
                total += 1;
                agree += usize::from((ra[i] > ra[j]) == (rb[i] > rb[j]));
            }
        }
    }
    if total == 0 {
        return Err(CoprError::EmptyTask(truth.task_id));
    }
    Ok((agree as f64 / total as f64, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub preset: Mode,
    pub seed: u64,
    /// Per-side feature dimension `d`.
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub min_responses: usize,
    pub max_responses: usize,
    /// TIL: number of tasks.
    pub tasks: usize,
    /// TIL: cosine between consecutive task scorers.
    pub cosine: f64,
    /// TIL: prompt mean of task t is `prompt_shift · (t − 1)`.
    pub prompt_shift: f64,
    /// TIL: prompt scale of task t is `1 + prompt_scale_step · (t − 1)`.
    pub prompt_scale_step: f64,
    /// DIL: number of domains.
    pub domains: usize,
    /// DIL: number of super-tasks the domains are grouped into.
    pub groups: usize,
    /// DIL: cosine between consecutive cluster centres.
    pub group_cosine: f64,
    /// DIL: cosine between a domain and its cluster centre.
    pub domain_cosine: f64,
    pub scorer: ScorerFit,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            preset: Mode::Til,
            seed: 0,
            dim: 16,
            n_train: 500,
            n_test: 200,
            min_responses: 2,
            max_responses: 4,
            tasks: 3,
            cosine: 0.0,
            prompt_shift: 3.0,
            prompt_scale_step: 0.5,
            domains: 18,
            groups: 3,
            group_cosine: 0.5,
            domain_cosine: 0.9,
            scorer: ScorerFit::default(),
        }
    }
}

impl BenchConfig {
    pub fn til() -> Self {
        Self::default()
    }

    pub fn dil() -> Self {
        Self {
            preset: Mode::Dil,
            ..Self::default()
        }
    }

    fn latent(&self, task_id: usize, prefix: String, weights: Vec<f64>) -> LatentTask {
        LatentTask {
            task_id,
            id_prefix: prefix,
            weights,
            n_train: self.n_train,
            n_test: self.n_test,
            min_responses: self.min_responses,
            max_responses: self.max_responses,
            prompt_shift: 0.0,
            prompt_scale: 1.0,
            reference: None,
            target_cosine: None,
        }
    }

    fn task_seed(&self, salt: u64, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(salt << 32)
            .wrapping_add(index as u64)
    }
}

/// A generated benchmark ready to be written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub sequence: TaskSequence,
    /// Latent specs: one per task (TIL) or one per domain (DIL).
    pub latent: Vec<LatentTask>,
    /// DIL only: per-domain datasets, id `i` is domain `i`.
    pub domains: Vec<TaskDataset>,
    pub degradation: Option<DegradationMatrix>,
    /// DIL only: 1-based domain ids per super-task, in task order.
    pub grouping: Option<Vec<Vec<usize>>>,
}

/// Latent specs for a task-incremental chain of scorers.
pub fn til_latents(config: &BenchConfig) -> Vec<LatentTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.task_seed(1, 0));
    let mut out: Vec<LatentTask> = Vec::new();
    for t in 1..=config.tasks {
        let (weights, reference) = match out.last() {
            None => (random_weights(config.dim, &mut rng), None),
            Some(prev) => (
                interfering_weights(&prev.weights, config.cosine, &mut rng),
                Some(prev.weights.clone()),
            ),
        };
        let mut spec = config.latent(t, format!("t{t}"), weights);
        spec.target_cosine = reference.as_ref().map(|_| config.cosine);
        spec.reference = reference;
        spec.prompt_shift = config.prompt_shift * (t - 1) as f64;
        spec.prompt_scale = 1.0 + config.prompt_scale_step * (t - 1) as f64;
        out.push(spec);
    }
    out
}

/// Latent specs for clustered domains; domain `i` (0-based) belongs to
/// cluster `i mod groups`, so the grouping has to be discovered.
pub fn dil_latents(config: &BenchConfig) -> Vec<LatentTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.task_seed(2, 0));
    let mut centres: Vec<Vec<f64>> = Vec::new();
    for g in 0..config.groups.max(1) {
        let c = match centres.last() {
            None => random_weights(config.dim, &mut rng),
            Some(prev) => interfering_weights(prev, config.group_cosine, &mut rng),
        };
        debug_assert!(g == centres.len());
        centres.push(c);
    }
    (0..config.domains)
        .map(|i| {
            let centre = &centres[i % centres.len()];
            let w = interfering_weights(centre, config.domain_cosine, &mut rng);
            let mut spec = config.latent(i + 1, format!("d{}", i + 1), w);
            spec.reference = Some(centre.clone());
            spec.target_cosine = Some(config.domain_cosine);
            spec
        })
        .collect()
}

pub fn generate_benchmark(config: &BenchConfig) -> Result<Benchmark> {
    match config.preset {
        Mode::Til => {
            let latent = til_latents(config);
            let tasks = latent
                .iter()
                .enumerate()
                .map(|(i, spec)| generate_task(spec, config.task_seed(3, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Benchmark {
                config: config.clone(),
                sequence: TaskSequence::new(tasks, Mode::Til)?,
                latent,
                domains: Vec::new(),
                degradation: None,
                grouping: None,
            })
        }
        Mode::Dil => {
            let latent = dil_latents(config);
            let domains = latent
                .iter()
                .enumerate()
                .map(|(i, spec)| generate_task(spec, config.task_seed(4, i)))
                .collect::<Result<Vec<_>>>()?;
            let degradation = degradation_matrix(&domains, &config.scorer)?;
            let groups = group_domains(&degradation, config.groups)?;
            let tasks = groups
                .iter()
                .enumerate()
                .map(|(g, members)| merge_domains(g + 1, members.iter().map(|&i| &domains[i])))
                .collect::<Result<Vec<_>>>()?;
            Ok(Benchmark {
                config: config.clone(),
                sequence: TaskSequence::new(tasks, Mode::Dil)?,
                latent,
                domains,
                degradation: Some(degradation),
                grouping: Some(
                    groups
                        .into_iter()
                        .map(|g| g.into_iter().map(|i| i + 1).collect())
                        .collect(),
                ),
            })
        }
    }
}

/// Pool several domains into one super-task.
pub fn merge_domains<'a>(
    task_id: usize,
    domains: impl IntoIterator<Item = &'a TaskDataset>,
) -> Result<TaskDataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in domains {
        train.extend(d.examples.iter().cloned());
        test.extend(d.test.iter().cloned());
    }
    Ok(TaskDataset::new(task_id, train)?.with_test(test))
}

pub const MANIFEST_FORMAT: &str = "copr-bench";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATENT_FILE: &str = "latent.json";
pub const GROUPING_FILE: &str = "grouping.json";
pub const DEGRADATION_FILE: &str = "degradation.csv";

pub fn task_file(task_id: usize) -> String {
    format!("task-{task_id}.jsonl")
}

pub fn domain_file(domain: usize) -> String {
    format!("domains/domain-{domain:02}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: usize,
    pub file: String,
    pub sha256: String,
    pub train: usize,
    pub test: usize,
    /// Domains pooled into this task (DIL), 1-based.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub config: BenchConfig,
    pub task_order: Vec<usize>,
    pub tasks: Vec<ManifestTask>,
    /// SHA-256 of each latent spec, in `latent.json` order.
    pub latent_sha256: Vec<String>,
}

impl BenchManifest {
    /// SHA-256 of the canonical JSON encoding; identifies the benchmark.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingFile {
    pub groups: Vec<Vec<usize>>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CoprError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CoprError::io(path, e))
}

fn save_task(task: &TaskDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CoprError::io(parent, e))?;
    }
    save_tasks(std::slice::from_ref(task), path)
}

/// Write one dataset file per task, the latent specs, the manifest and
/// (DIL) the per-domain files, degradation matrix and grouping.
pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<BenchManifest> {
    std::fs::create_dir_all(dir).map_err(|e| CoprError::io(dir, e))?;
    let mode = bench.sequence.mode;
    let mut tasks = Vec::with_capacity(bench.sequence.len());
    for (i, task) in bench.sequence.tasks.iter().enumerate() {
        let file = task_file(task.task_id);
        let path = dir.join(&file);
        save_task(task, &path)?;
        tasks.push(ManifestTask {
            task_id: task.task_id,
            sha256: sha256_file(&path)?,
            file,
            train: task.examples.len(),
            test: task.test.len(),
            domains: bench
                .grouping
                .as_ref()
                .map(|g| g[i].clone())
                .unwrap_or_default(),
        });
    }
    write_json(&dir.join(LATENT_FILE), &bench.latent)?;
    for domain in &bench.domains {
        save_task(domain, &dir.join(domain_file(domain.task_id)))?;
    }
    if let Some(m) = &bench.degradation {
        let path = dir.join(DEGRADATION_FILE);
        let file = std::fs::File::create(&path).map_err(|e| CoprError::io(&path, e))?;
        m.write_csv(file)?;
    }
    if let Some(groups) = &bench.grouping {
        write_json(
            &dir.join(GROUPING_FILE),
            &GroupingFile {
                groups: groups.clone(),
            },
        )?;
    }
    let manifest = BenchManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        mode,
        config: bench.config.clone(),
        task_order: bench.sequence.tasks.iter().map(|t| t.task_id).collect(),
        tasks,
        latent_sha256: bench.latent.iter().map(LatentTask::digest).collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BenchManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CoprError::io(&path, e))?;
    let manifest: BenchManifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CoprError::InvalidConfig(format!(
            "{}: not a benchmark manifest",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Load a benchmark's task sequence in manifest order, attaching TIL latent
/// scorers when available. Any task file whose hash differs from the
/// manifest fails with [`CoprError::StaleBenchmark`].
pub fn load_benchmark(dir: &Path) -> Result<(BenchManifest, TaskSequence)> {
    let manifest = read_manifest(dir)?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let path = dir.join(&entry.file);
        let actual = sha256_file(&path)?;
        if actual != entry.sha256 {
            return Err(CoprError::StaleBenchmark {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let mut loaded = load_tasks(&path)?;
        if loaded.len() != 1 || loaded[0].task_id != entry.task_id {
            return Err(CoprError::InvalidConfig(format!(
                "{}: expected exactly task {}",
                path.display(),
                entry.task_id
            )));
        }
        tasks.push(loaded.remove(0));
    }
    if manifest.mode == Mode::Til {
        let path = dir.join(LATENT_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CoprError::io(&path, e))?;
            let latent: Vec<LatentTask> = serde_json::from_str(&text)?;
            for (task, spec) in tasks.iter_mut().zip(latent) {
                task.latent = Some(spec.scorer());
            }
        }
    }
    let sequence = TaskSequence::new(tasks, manifest.mode)?;
    Ok((manifest, sequence))
}
