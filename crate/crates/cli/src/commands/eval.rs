//! `eval`: compare a candidate sample directory against a reference set with
//! sliced/marginal Wasserstein distances in both domains and a spectral
//! density comparison. Writes a JSON report, a human-readable summary with
//! ±2·stderr intervals, and an SVG of the spectral curves.

use crate::config::{resolved_config_text, RunConfig};
use crate::error::CliError;
use crate::io::{load_samples, prepare_out_dir};
use crate::svg::{line_plot, Series};
use freqdiff_core::eval::{
    bucket_hit_rates, marginal_wasserstein, sliced_wasserstein, spectral_density_compare,
    EvalReport, SampleSet,
};
use freqdiff_core::rng::{chain_rng, Stream};
use freqdiff_core::sampler::{ChainTrace, TraceRow};
use freqdiff_core::spectral::{dft_forward, phi, PhiVector, TimeSeriesSample};
use rand::Rng;
use std::path::Path;

pub struct EvalInputs<'a> {
    pub reference: &'a Path,
    pub candidate: &'a Path,
    pub trace: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

fn cap_samples(samples: Vec<TimeSeriesSample>, cap: usize, seed: u64) -> Vec<TimeSeriesSample> {
    if samples.len() <= cap {
        return samples;
    }
    let mut rng = chain_rng(seed, Stream::Eval, 2);
    let mut pool: Vec<usize> = (0..samples.len()).collect();
    for i in 0..cap {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(cap);
    pool.sort_unstable();
    pool.into_iter().map(|i| samples[i].clone()).collect()
}

fn charts_of(samples: &[TimeSeriesSample]) -> Result<Vec<PhiVector>, CliError> {
    samples.iter().map(|s| Ok(phi(&dft_forward(s)?))).collect()
}

fn parse_trace_csv(path: &Path) -> Result<ChainTrace, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != TraceRow::CSV_HEADER.split(',').count() {
            return Err(CliError::Io(format!("{} line {}: bad column count", path.display(), i + 1)));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| CliError::Io(format!("{}: {e}", path.display())));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| CliError::Io(format!("{}: {e}", path.display())));
        rows.push(TraceRow {
            step: parse_u(cols[0])? as usize,
            t: parse_f(cols[1])?,
            r: parse_f(cols[2])?,
            set_size: parse_u(cols[3])? as usize,
            n_low: parse_u(cols[4])? as usize,
            n_high: parse_u(cols[5])? as usize,
            n_probe: parse_u(cols[6])? as usize,
            hit_rate: parse_f(cols[7])?,
            probe_error_norm: parse_f(cols[8])?,
            wall_ns_full_equivalent: parse_u(cols[9])?,
            wall_ns_actual: parse_u(cols[10])?,
        });
    }
    Ok(ChainTrace { rows, wall_ns_total: 0 })
}

pub fn run(cfg: &RunConfig, inputs: &EvalInputs<'_>) -> Result<(), CliError> {
    let reference = cap_samples(load_samples(inputs.reference)?, cfg.eval.max_samples, cfg.eval.seed);
    let candidate = cap_samples(load_samples(inputs.candidate)?, cfg.eval.max_samples, cfg.eval.seed);
    if reference[0].n != candidate[0].n || reference[0].m != candidate[0].m {
        return Err(CliError::Usage(format!(
            "reference {}x{} and candidate {}x{} disagree in shape",
            reference[0].n, reference[0].m, candidate[0].n, candidate[0].m
        )));
    }

    let ref_time = SampleSet::from_times(&reference)?;
    let cand_time = SampleSet::from_times(&candidate)?;
    let ref_freq = SampleSet::from_charts(&charts_of(&reference)?)?;
    let cand_freq = SampleSet::from_charts(&charts_of(&candidate)?)?;

    let (sw_time, sw_time_stderr) =
        sliced_wasserstein(&ref_time, &cand_time, cfg.eval.n_proj, cfg.eval.p, cfg.eval.seed)?;
    let (sw_freq, sw_freq_stderr) =
        sliced_wasserstein(&ref_freq, &cand_freq, cfg.eval.n_proj, cfg.eval.p, cfg.eval.seed)?;
    let marginal_w: Result<Vec<f64>, _> = (0..ref_time.dim)
        .map(|j| marginal_wasserstein(&ref_time, &cand_time, j, cfg.eval.p, cfg.eval.seed))
        .collect();
    let marginal_w = marginal_w?;
    let spectral = spectral_density_compare(&reference, &candidate)?;

    let hit_rate_curve = match inputs.trace {
        Some(path) => bucket_hit_rates(&parse_trace_csv(path)?, 10),
        None => Vec::new(),
    };
    // Speed is measured by the bench command; 0 means "not measured here".
    let report = EvalReport {
        sw_time,
        sw_time_stderr,
        sw_freq,
        sw_freq_stderr,
        marginal_w,
        spectral_l2: spectral.l2_gap,
        speedup: 0.0,
        hit_rate_curve,
    };

    prepare_out_dir(inputs.out, inputs.force)?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    json.push('\n');
    std::fs::write(inputs.out.join("report.json"), json)?;

    let mut text = String::new();
    text.push_str(&format!("sw_time: {}\n", pm2(sw_time, sw_time_stderr)));
    text.push_str(&format!("sw_freq: {}\n", pm2(sw_freq, sw_freq_stderr)));
    text.push_str(&format!("spectral_l2: {:.6}\n", spectral.l2_gap));
    let max_marginal = report.marginal_w.iter().cloned().fold(0.0, f64::max);
    text.push_str(&format!("max_marginal_w: {max_marginal:.6}\n"));
    std::fs::write(inputs.out.join("report.txt"), &text)?;

    std::fs::write(
        inputs.out.join("spectral.svg"),
        line_plot(
            "mean spectral energy per token",
            "token",
            "energy",
            &[
                Series { label: "reference", ys: &spectral.reference_curve },
                Series { label: "candidate", ys: &spectral.candidate_curve },
            ],
        ),
    )?;
    std::fs::write(inputs.out.join("resolved_config.toml"), resolved_config_text(cfg, "eval")?)?;
    eprint!("{text}");
    Ok(())
}

/// Table formatting: mean ± 2 standard errors.
fn pm2(mean: f64, stderr: f64) -> String {
    format!("{mean:.4} \u{b1} {:.4}", 2.0 * stderr)
}
