use std::path::Path;

use anyhow::{Context, Result};
use copr_core::benchgen::{generate_benchmark, write_benchmark, MANIFEST_FILE};
use copr_core::config::EXAMPLE_CONFIG;
use copr_core::RunConfig;

use crate::fsutil::{check_file, prepare_dir, resolve_out};
use crate::Preset;

pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::load(p)?,
        None => preset.config(),
    };
    config.validate()?;
    Ok(config)
}

pub fn gen_bench(
    config: Option<&Path>,
    preset: Preset,
    out: &Path,
    seed: Option<u64>,
    overwrite: bool,
) -> Result<()> {
    let mut config = load_config(config, preset)?;
    if let Some(seed) = seed {
        config.bench.seed = seed;
    }
    let out = resolve_out(out);
    let bench = generate_benchmark(&config.bench).context("generating benchmark")?;
    prepare_dir(&out, MANIFEST_FILE, overwrite)?;
    let manifest = write_benchmark(&bench, &out).with_context(|| format!("writing {}", out.display()))?;
    let examples: usize = manifest.tasks.iter().map(|t| t.train + t.test).sum();
    println!(
        "wrote {:?} benchmark to {}: {} tasks, {examples} examples",
        manifest.mode,
        out.display(),
        manifest.tasks.len()
    );
    if let Some(groups) = &bench.grouping {
        for (g, domains) in groups.iter().enumerate() {
            println!("  group {}: domains {domains:?}", g + 1);
        }
    }
    Ok(())
}

pub fn example_config(preset: Option<Preset>, out: Option<&Path>, overwrite: bool) -> Result<()> {
    let text = match preset {
        None => EXAMPLE_CONFIG.to_string(),
        Some(p) => p.config().to_toml()?,
    };
    match out {
        None => print!("{text}"),
        Some(path) => {
            let path = resolve_out(path);
            check_file(&path, overwrite)?;
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}
