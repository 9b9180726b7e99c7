//! `gen-data`: write a synthetic dataset directory (per-sample CSVs plus a
//! manifest).

use crate::config::{resolved_config_text, RunConfig};
use crate::error::CliError;
use crate::io::{prepare_out_dir, sample_file_name, write_manifest, write_sample_csv, Manifest};
use freqdiff_core::rng::{stream_rng, Stream};
use freqdiff_core::synth::{generate, GeneratorKind};
use std::path::Path;
use std::str::FromStr;

pub fn run(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let kind = GeneratorKind::from_str(&cfg.data.generator).map_err(CliError::Usage)?;
    if cfg.data.n < 2 || cfg.data.m == 0 {
        return Err(CliError::Usage(format!(
            "need series length >= 2 and at least one feature, got {}x{}",
            cfg.data.n, cfg.data.m
        )));
    }
    prepare_out_dir(out, force)?;

    let mut rng = stream_rng(cfg.data.seed, Stream::Noise);
    let samples = generate(kind, cfg.data.n, cfg.data.m, cfg.data.count, &mut rng);
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        write_sample_csv(&out.join(&name), s)?;
        files.push(name);
    }
    write_manifest(
        out,
        &Manifest {
            n: cfg.data.n,
            m: cfg.data.m,
            count: cfg.data.count,
            seed: cfg.data.seed,
            generator: Some(cfg.data.generator.clone()),
            policy: None,
            steps: None,
            files,
        },
    )?;
    std::fs::write(out.join("resolved_config.toml"), resolved_config_text(cfg, "gen-data")?)?;
    eprintln!(
        "wrote {} {} samples ({}x{}) to {}",
        cfg.data.count,
        cfg.data.generator,
        cfg.data.n,
        cfg.data.m,
        out.display()
    );
    Ok(())
}
