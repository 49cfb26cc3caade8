//! Prompts, ordered response sets, tasks, task sequences and replay storage,
//! plus the line-oriented dataset file format.
//!
//! # Dataset file
//!
//! UTF-8 JSON Lines, one example per line. Blank lines are ignored.
//!
//! ```text
//! {"task_id":1,"split":"train","prompt_id":"t1-p0","features":[0.1,-0.3],
//!  "responses":[{"response_id":"r0","features":[0.2,0.9],"rank":2},
//!               {"response_id":"r1","features":[-1.0,0.4],"rank":1}]}
//! ```
//!
//! * `split` is `"train"` (default when omitted) or `"test"`.
//! * `rank` is 1-based, larger is more preferred; omit it on every response of
//!   an example to mark the example as unlabeled.
//! * Records may appear in any order; tasks are grouped by `task_id`, which
//!   must cover `1..=T` without gaps.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoprError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub response_id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

/// A prompt and its finite response set. Ranks are stored explicitly, so the
/// response order carries no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt_id: String,
    pub features: Vec<f64>,
    pub responses: Vec<Response>,
}

enum Violation {
    RankCollision(usize),
    Other(String),
}

impl PreferenceExample {
    pub fn new(
        prompt_id: impl Into<String>,
        features: Vec<f64>,
        responses: Vec<Response>,
    ) -> Result<Self> {
        let ex = Self {
            prompt_id: prompt_id.into(),
            features,
            responses,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|v| CoprError::InvalidExample {
            prompt_id: self.prompt_id.clone(),
            reason: match v {
                Violation::RankCollision(r) => format!("rank-collision on rank {r}"),
                Violation::Other(s) => s,
            },
        })
    }

    fn check(&self) -> std::result::Result<(), Violation> {
        let size = self.responses.len();
        if size < 2 {
            return Err(Violation::Other(format!(
                "needs at least 2 responses, has {size}"
            )));
        }
        let d = self.features.len();
        let mut ids = HashSet::new();
        for r in &self.responses {
            if r.features.len() != d {
                return Err(Violation::Other(format!(
                    "response {} has dimension {}, prompt has {d}",
                    r.response_id,
                    r.features.len()
                )));
            }
            if !ids.insert(r.response_id.as_str()) {
                return Err(Violation::Other(format!(
                    "duplicate response id {}",
                    r.response_id
                )));
            }
        }
        if self
            .features
            .iter()
            .chain(self.responses.iter().flat_map(|r| &r.features))
            .any(|v| !v.is_finite())
        {
            return Err(Violation::Other("non-finite feature".into()));
        }
        let labeled = self.responses.iter().filter(|r| r.rank.is_some()).count();
        if labeled != 0 && labeled != size {
            return Err(Violation::Other(
                "ranks must be present on all responses or on none".into(),
            ));
        }
        if labeled == size {
            let mut seen = vec![false; size];
            for r in &self.responses {
                let rank = r.rank.unwrap_or(0);
                if rank == 0 || rank > size {
                    return Err(Violation::Other(format!(
                        "rank {rank} outside 1..={size}"
                    )));
                }
                if std::mem::replace(&mut seen[rank - 1], true) {
                    return Err(Violation::RankCollision(rank));
                }
            }
        }
        Ok(())
    }

    /// Number of responses `J_x`.
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.responses.iter().all(|r| r.rank.is_some())
    }

    /// Ranks in stored response order.
    pub fn ranks(&self) -> Option<Vec<usize>> {
        self.responses.iter().map(|r| r.rank).collect()
    }

    /// Index of the rank-`J_x` response.
    pub fn top_index(&self) -> Option<usize> {
        let top = self.len();
        self.responses.iter().position(|r| r.rank == Some(top))
    }

    /// All `(preferred, dispreferred)` index pairs.
    pub fn preference_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (w, rw) in self.responses.iter().enumerate() {
            for (l, rl) in self.responses.iter().enumerate() {
                if let (Some(a), Some(b)) = (rw.rank, rl.rank) {
                    if a > b {
                        pairs.push((w, l));
                    }
                }
            }
        }
        pairs
    }

    /// Prompt features concatenated with the features of response `i`.
    pub fn joint_features(&self, i: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.dim());
        z.extend_from_slice(&self.features);
        z.extend_from_slice(&self.responses[i].features);
        z
    }

    /// Copy with every rank removed.
    pub fn without_ranks(&self) -> Self {
        let mut ex = self.clone();
        for r in &mut ex.responses {
            r.rank = None;
        }
        ex
    }
}

/// Ground-truth linear scorer `s(x, y) = w · (x ⊕ y)` of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScorer(pub Vec<f64>);

impl LatentScorer {
    pub fn score(&self, prompt: &[f64], response: &[f64]) -> f64 {
        let d = prompt.len();
        self.0[..d].iter().zip(prompt).map(|(w, x)| w * x).sum::<f64>()
            + self.0[d..].iter().zip(response).map(|(w, y)| w * y).sum::<f64>()
    }

    pub fn scores(&self, example: &PreferenceExample) -> Vec<f64> {
        example
            .responses
            .iter()
            .map(|r| self.score(&example.features, &r.features))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Training split.
    pub examples: Vec<PreferenceExample>,
    /// Held-out split; may be empty.
    pub test: Vec<PreferenceExample>,
    pub latent: Option<LatentScorer>,
}

impl TaskDataset {
    pub fn new(task_id: usize, examples: Vec<PreferenceExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(CoprError::EmptyTask(task_id));
        }
        Ok(Self {
            task_id,
            examples,
            test: Vec::new(),
            latent: None,
        })
    }

    pub fn with_test(mut self, test: Vec<PreferenceExample>) -> Self {
        self.test = test;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.examples.iter().all(PreferenceExample::is_labeled)
    }

    /// The split used for evaluation: test when present, train otherwise.
    pub fn eval_split(&self) -> &[PreferenceExample] {
        if self.test.is_empty() {
            &self.examples
        } else {
            &self.test
        }
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &PreferenceExample> {
        self.examples.iter().chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Til,
    Dil,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
    pub mode: Mode,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskDataset>, mode: Mode) -> Result<Self> {
        if tasks.is_empty() {
            return Err(CoprError::EmptySequence);
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i + 1 {
                return Err(CoprError::InvalidConfig(format!(
                    "task ids must run 1..={} in order; position {} has id {}",
                    tasks.len(),
                    i + 1,
                    t.task_id
                )));
            }
            if t.examples.is_empty() {
                return Err(CoprError::EmptyTask(t.task_id));
            }
        }
        Ok(Self { tasks, mode })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &PreferenceExample> {
        self.tasks.iter().flat_map(TaskDataset::all_examples)
    }
}

/// Re-normalized optimal distribution `P*` over an example's response set,
/// indexed like the example's stored responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probabilities: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9
        {
            return Err(CoprError::InvalidConfig(format!(
                "target distribution must be nonnegative and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { probabilities })
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub task_id: usize,
    pub example: PreferenceExample,
    pub target: TargetDistribution,
}

/// Per-task replay stores, each frozen when its task ends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut ids: Vec<_> = self.entries.iter().map(|e| e.task_id).collect();
        ids.dedup();
        ids
    }

    /// Freeze the replay set of a finished task. Task ids must arrive in
    /// increasing order and each target must match its example.
    pub fn freeze_task(
        &mut self,
        task_id: usize,
        items: Vec<(PreferenceExample, TargetDistribution)>,
    ) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if last.task_id >= task_id {
                return Err(CoprError::InvalidConfig(format!(
                    "replay for task {task_id} frozen after task {}",
                    last.task_id
                )));
            }
        }
        for (example, target) in items {
            if target.len() != example.len() {
                return Err(CoprError::InvalidExample {
                    prompt_id: example.prompt_id,
                    reason: "frozen target length differs from response count".into(),
                });
            }
            self.entries.push(ReplayEntry {
                task_id,
                example,
                target,
            });
        }
        Ok(())
    }

    /// True when every entry belongs to a task strictly before `current_task`.
    pub fn precedes(&self, current_task: usize) -> bool {
        self.entries.iter().all(|e| e.task_id < current_task)
    }
}

/// `max(1, round(fraction · n))`.
pub fn replay_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Uniform sample without replacement of `max(1, round(fraction · |dataset|))`
/// training examples, deterministic in `seed`.
pub fn select_replay(
    dataset: &TaskDataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    if dataset.examples.is_empty() {
        return Err(CoprError::EmptyTask(dataset.task_id));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoprError::InvalidConfig(format!(
            "replay fraction {fraction} outside (0, 1]"
        )));
    }
    let n = dataset.examples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, replay_size(n, fraction)).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct Record {
    task_id: usize,
    #[serde(default)]
    split: Split,
    #[serde(flatten)]
    example: PreferenceExample,
}

/// Parse a dataset stream into its tasks, ordered by task id. Task ids need
/// not be contiguous.
pub fn read_tasks<R: BufRead>(reader: R) -> Result<Vec<TaskDataset>> {
    let mut tasks: BTreeMap<usize, (Vec<PreferenceExample>, Vec<PreferenceExample>)> =
        BTreeMap::new();
    let mut dim: Option<usize> = None;
    let mut prompt_ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CoprError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CoprError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let malformed = |reason: String| CoprError::Malformed {
            line: line_no,
            reason,
        };
        if record.task_id == 0 {
            return Err(malformed("task_id must be >= 1".into()));
        }
        match record.example.check() {
            Ok(()) => {}
            Err(Violation::RankCollision(rank)) => {
                return Err(CoprError::RankCollision {
                    line: line_no,
                    prompt_id: record.example.prompt_id,
                    rank,
                })
            }
            Err(Violation::Other(reason)) => return Err(malformed(reason)),
        }
        let d = *dim.get_or_insert(record.example.dim());
        if record.example.dim() != d {
            return Err(malformed(format!(
                "feature dimension {} differs from {d} used earlier in the file",
                record.example.dim()
            )));
        }
        if !prompt_ids.insert(record.example.prompt_id.clone()) {
            return Err(malformed(format!(
                "duplicate prompt id {}",
                record.example.prompt_id
            )));
        }
        let slot = tasks.entry(record.task_id).or_default();
        match record.split {
            Split::Train => slot.0.push(record.example),
            Split::Test => slot.1.push(record.example),
        }
    }
    if tasks.is_empty() {
        return Err(CoprError::EmptySequence);
    }
    tasks
        .into_iter()
        .map(|(task_id, (train, test))| Ok(TaskDataset::new(task_id, train)?.with_test(test)))
        .collect()
}

/// Parse a dataset stream whose task ids run contiguously from 1. `mode` is
/// left at its default; it is metadata carried by benchmark manifests.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<TaskSequence> {
    let tasks = read_tasks(reader)?;
    for (expected, task) in (1..).zip(&tasks) {
        if task.task_id != expected {
            return Err(CoprError::InvalidConfig(format!(
                "task ids must be contiguous from 1; missing task {expected}"
            )));
        }
    }
    TaskSequence::new(tasks, Mode::default())
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskDataset>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoprError::io(path, e))?;
    read_tasks(BufReader::new(file))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TaskSequence> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoprError::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(sequence: &TaskSequence, writer: W) -> Result<()> {
    write_tasks(&sequence.tasks, writer)
}

pub fn write_tasks<W: Write>(tasks: &[TaskDataset], mut writer: W) -> Result<()> {
    for task in tasks {
        for (split, examples) in [(Split::Train, &task.examples), (Split::Test, &task.test)] {
            for example in examples {
                let record = Record {
                    task_id: task.task_id,
                    split,
                    example: example.clone(),
                };
                serde_json::to_writer(&mut writer, &record)?;
                writer
                    .write_all(b"\n")
                    .map_err(|e| CoprError::io("<dataset stream>", e))?;
            }
        }
    }
    Ok(())
}

pub fn save_dataset(sequence: &TaskSequence, path: impl AsRef<Path>) -> Result<()> {
    save_tasks(&sequence.tasks, path)
}

pub fn save_tasks(tasks: &[TaskDataset], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CoprError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_tasks(tasks, &mut writer)?;
    writer.flush().map_err(|e| CoprError::io(path, e))
}
