use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use copr_core::benchgen::{load_benchmark, sha256_file, MANIFEST_FILE};
use copr_core::metrics::{summarize, write_metrics_csv};
use copr_core::policy::{load_checkpoint, save_checkpoint};
use copr_core::trainer::{accuracy_hook, train_sequence, Method};
use copr_core::ScoreMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::load_config;
use crate::fsutil::{create, prepare_dir, resolve_out, write_csv, write_json, DirLock};
use crate::Preset;

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_ECHO: &str = "config.toml";
pub const SCORES_FILE: &str = "scores.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_file(task: usize) -> String {
    format!("checkpoints/task-{task}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Config file used, or `None` for a built-in preset.
    pub config_path: Option<String>,
    pub config_sha256: String,
    pub bench_dir: String,
    pub bench_manifest_sha256: String,
    pub out_dir: String,
    pub method: Method,
    pub seed: u64,
    pub tasks: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub preset: Preset,
    pub bench: PathBuf,
    pub out: PathBuf,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub overwrite: bool,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Distinct run directories under one output root get distinct ids: the
/// directory name leads, and the hash pins the inputs.
fn run_id(out: &Path, config_text: &str, bench_sha: &str, method: Method, seed: u64) -> String {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update(bench_sha.as_bytes());
    h.update(method.name().as_bytes());
    h.update(seed.to_le_bytes());
    format!("{name}-{}", &hex::encode(h.finalize())[..12])
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), args.preset)?;
    if let Some(method) = args.method {
        config.train.method = method;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    let bench_dir = resolve_out(&args.bench);
    let (_, sequence) = load_benchmark(&bench_dir).with_context(|| format!("loading {}", bench_dir.display()))?;
    let bench_sha = sha256_file(&bench_dir.join(MANIFEST_FILE))?;

    // The echo is the file itself when one was given; overrides are
    // recorded in run.json.
    let config_text = match &args.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => config.to_toml()?,
    };

    let out = resolve_out(&args.out);
    prepare_dir(&out, RUN_FILE, args.overwrite)?;
    let _lock = DirLock::acquire(&out)?;
    std::fs::write(out.join(CONFIG_ECHO), &config_text)?;
    let train_config = config.train_config();
    let mut manifest = RunManifest {
        run_id: run_id(&out, &config_text, &bench_sha, train_config.method, train_config.seed),
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
        bench_dir: bench_dir.display().to_string(),
        bench_manifest_sha256: bench_sha,
        out_dir: out.display().to_string(),
        method: train_config.method,
        seed: train_config.seed,
        tasks: sequence.len(),
        started_unix: now(),
        finished_unix: None,
    };
    write_json(&out.join(RUN_FILE), &manifest)?;

    let record = train_sequence(&sequence, &train_config, &mut accuracy_hook)
        .with_context(|| format!("training {}", train_config.method.name()))?;

    write_csv(&out.join(LOSSES_FILE), &record.losses)?;
    if !record.curves.is_empty() {
        write_csv(&out.join(CURVES_FILE), &record.curves)?;
    }
    record.scores.write_csv(create(&out.join(SCORES_FILE))?)?;
    let metrics = summarize(&record.scores)?;
    write_metrics_csv(&metrics, create(&out.join(METRICS_FILE))?)?;
    for (i, model) in record.checkpoints.iter().enumerate() {
        let path = out.join(checkpoint_file(i + 1));
        create(&path)?;
        save_checkpoint(&path, model, None)?;
    }
    manifest.finished_unix = Some(now());
    write_json(&out.join(RUN_FILE), &manifest)?;

    let last = metrics.last().expect("at least one task");
    println!(
        "{} ({}): AA {:.4} AIA {:.4} FM {} BWT {}",
        manifest.run_id,
        train_config.method.name(),
        last.aa,
        last.aia,
        fmt_opt(last.fm),
        fmt_opt(last.bwt)
    );
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Rebuild the score matrix from saved checkpoints, check it against
/// `scores.csv`, and rewrite `metrics.csv`.
pub fn eval(run: &Path, bench: Option<&Path>) -> Result<()> {
    let run = resolve_out(run);
    let manifest = RunManifest::load(&run)?;
    if manifest.finished_unix.is_none() {
        bail!("{} is incomplete: training did not finish", run.display());
    }
    let bench_dir = bench.map(resolve_out).unwrap_or_else(|| PathBuf::from(&manifest.bench_dir));
    let bench_sha = sha256_file(&bench_dir.join(MANIFEST_FILE))?;
    if bench_sha != manifest.bench_manifest_sha256 {
        bail!(
            "stale-benchmark: {} hashes to {bench_sha}, run {} was trained on {}",
            bench_dir.join(MANIFEST_FILE).display(),
            manifest.run_id,
            manifest.bench_manifest_sha256
        );
    }
    let (_, sequence) = load_benchmark(&bench_dir)?;
    let _lock = DirLock::acquire(&run)?;

    let mut scores = ScoreMatrix::new();
    for k in 1..=manifest.tasks {
        let (model, _) = load_checkpoint(run.join(checkpoint_file(k)))?;
        scores.push_row(accuracy_hook(&model, &sequence.tasks[..k])?)?;
    }
    let stored_path = run.join(SCORES_FILE);
    let file = std::fs::File::open(&stored_path).with_context(|| format!("reading {}", stored_path.display()))?;
    let stored = ScoreMatrix::read_csv(file)?;
    let mut max_diff: f64 = 0.0;
    for k in 1..=scores.len() {
        for j in 1..=k {
            let (a, b) = (scores.get(k, j), stored.get(k, j));
            match (a, b) {
                (Some(a), Some(b)) => max_diff = max_diff.max((a - b).abs()),
                _ => bail!("{}: missing entry ({k}, {j})", stored_path.display()),
            }
        }
    }
    if max_diff > 1e-12 {
        bail!(
            "{}: checkpoints reproduce scores only to {max_diff:.3e}",
            stored_path.display()
        );
    }
    let metrics = summarize(&scores)?;
    write_metrics_csv(&metrics, create(&run.join(METRICS_FILE))?)?;
    println!("{} ({}):", manifest.run_id, manifest.method.name());
    println!("  k  AA      AIA     FM      BWT");
    for m in &metrics {
        println!(
            "  {:<2} {:.4}  {:.4}  {:<6}  {}",
            m.k,
            m.aa,
            m.aia,
            fmt_opt(m.fm),
            fmt_opt(m.bwt)
        );
    }
    Ok(())
}
