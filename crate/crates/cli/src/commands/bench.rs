//! `bench`: paired wall-clock comparison of sampling policies, optionally
//! with a sample-quality column against a reference dataset, plus a
//! hyperparameter sweep over the low band size and probe interval.

use crate::config::{resolved_config_text, RunConfig};
use crate::error::CliError;
use crate::io::{load_samples, prepare_out_dir};
use freqdiff_core::checkpoint::{load as load_checkpoint, Checkpoint};
use freqdiff_core::eval::{benchmark, sliced_wasserstein, BenchmarkConfig, SampleSet};
use freqdiff_core::sampler::{run_sampler, Policy, SamplerConfig, ScoreSource};
use freqdiff_core::spectral::TimeSeriesSample;
use freqdiff_core::train::destandardize;
use serde::Serialize;
use std::path::Path;
use std::str::FromStr;

pub struct BenchInputs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub sweep: bool,
    pub force: bool,
}

#[derive(Debug, Serialize)]
struct ReportRow {
    policy: String,
    speedup: f64,
    median_wall_ns: u64,
    recompute_fraction: f64,
    sw_time: Option<f64>,
    sw_time_stderr: Option<f64>,
    quality_change_pct: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    k_low: usize,
    refresh_interval: usize,
    speedup: f64,
    sw_time: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    n_steps: usize,
    n_repeats: usize,
    n_tokens: usize,
    rows: Vec<ReportRow>,
    sweep: Vec<SweepRow>,
}

fn quality_samples(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    policy: Policy,
    bench_cfg: &BenchmarkConfig,
) -> Result<Vec<TimeSeriesSample>, CliError> {
    let mut run_cfg = SamplerConfig::new(ckpt.params.cfg.n, policy, bench_cfg.seed);
    run_cfg.n_steps = bench_cfg.n_steps;
    run_cfg.n_chains = cfg.bench.eval_samples;
    run_cfg.cache = bench_cfg.cache.clone();
    run_cfg.fixed_period = bench_cfg.fixed_period;
    let out = run_sampler(ScoreSource::Network(&ckpt.params), &cfg.schedule(), &run_cfg)?;
    Ok(match &ckpt.stats {
        Some(st) => destandardize(&out.times, st),
        None => out.times,
    })
}

fn sw_against(
    reference: &SampleSet,
    times: &[TimeSeriesSample],
    cfg: &RunConfig,
) -> Result<(f64, f64), CliError> {
    let set = SampleSet::from_times(times)?;
    Ok(sliced_wasserstein(reference, &set, cfg.bench.n_proj, cfg.eval.p, cfg.eval.seed)?)
}

pub fn run(cfg: &RunConfig, inputs: &BenchInputs<'_>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(inputs.checkpoint)?;
    let n = ckpt.params.cfg.n;
    let policies: Result<Vec<Policy>, _> =
        cfg.bench.policies.iter().map(|s| Policy::from_str(s)).collect();
    let policies = policies.map_err(CliError::Usage)?;
    if !policies.contains(&Policy::Baseline) {
        return Err(CliError::Usage("the policy list must include baseline".to_string()));
    }

    let reference = match inputs.data {
        Some(dir) => Some(SampleSet::from_times(&load_samples(dir)?)?),
        None => None,
    };

    let mut bench_cfg = BenchmarkConfig::new(n, cfg.bench.seed);
    bench_cfg.n_steps = cfg.bench.steps;
    bench_cfg.n_repeats = cfg.bench.repeats;
    bench_cfg.cache = cfg.cache_config(n);
    bench_cfg.fixed_period = cfg.sample.fixed_period;

    let timing = benchmark(&policies, &ckpt.params, &cfg.schedule(), &bench_cfg)?;

    let mut rows = Vec::with_capacity(timing.rows.len());
    let mut baseline_sw: Option<f64> = None;
    for b in &timing.rows {
        let (sw, se) = match &reference {
            Some(r) => {
                let times = quality_samples(&ckpt, cfg, b.policy, &bench_cfg)?;
                let (sw, se) = sw_against(r, &times, cfg)?;
                (Some(sw), Some(se))
            }
            None => (None, None),
        };
        if b.policy == Policy::Baseline {
            baseline_sw = sw;
        }
        let quality_change_pct = match (sw, baseline_sw) {
            (Some(s), Some(base)) if base > 0.0 => Some((s - base) / base * 100.0),
            _ => None,
        };
        rows.push(ReportRow {
            policy: b.policy.to_string(),
            speedup: b.speedup,
            median_wall_ns: b.median_wall_ns,
            recompute_fraction: b.recompute_fraction,
            sw_time: sw,
            sw_time_stderr: se,
            quality_change_pct,
        });
    }

    let mut sweep = Vec::new();
    if inputs.sweep {
        for &k in &cfg.bench.sweep_k {
            for &r in &cfg.bench.sweep_r {
                let mut cell_cfg = bench_cfg.clone();
                cell_cfg.cache.k_low = k;
                cell_cfg.cache.refresh_interval = r;
                let cell = benchmark(&[Policy::Baseline, Policy::E2crf], &ckpt.params, &cfg.schedule(), &cell_cfg)?;
                let e2 = cell.rows.iter().find(|row| row.policy == Policy::E2crf).expect("requested policy");
                let sw = match &reference {
                    Some(reference_set) => {
                        let mut qcfg = cfg.clone();
                        qcfg.cache.k_low = Some(k);
                        qcfg.cache.refresh_interval = r;
                        let times = quality_samples(&ckpt, &qcfg, Policy::E2crf, &cell_cfg)?;
                        Some(sw_against(reference_set, &times, cfg)?.0)
                    }
                    None => None,
                };
                sweep.push(SweepRow { k_low: k, refresh_interval: r, speedup: e2.speedup, sw_time: sw });
            }
        }
    }

    prepare_out_dir(inputs.out, inputs.force)?;
    let report = BenchReport {
        n_steps: timing.n_steps,
        n_repeats: timing.n_repeats,
        n_tokens: timing.n_tokens,
        rows,
        sweep,
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    json.push('\n');
    std::fs::write(inputs.out.join("report.json"), json)?;

    let mut csv = String::from("policy,speedup,median_wall_ns,recompute_fraction,sw_time,sw_time_stderr,quality_change_pct\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{:.4},{},{:.6},{},{},{}\n",
            r.policy,
            r.speedup,
            r.median_wall_ns,
            r.recompute_fraction,
            r.sw_time.map_or(String::new(), |v| format!("{v}")),
            r.sw_time_stderr.map_or(String::new(), |v| format!("{v}")),
            r.quality_change_pct.map_or(String::new(), |v| format!("{v:.2}")),
        ));
    }
    std::fs::write(inputs.out.join("report.csv"), csv)?;

    if inputs.sweep {
        let mut csv = String::from("k_low,refresh_interval,speedup,sw_time\n");
        for s in &report.sweep {
            csv.push_str(&format!(
                "{},{},{:.4},{}\n",
                s.k_low,
                s.refresh_interval,
                s.speedup,
                s.sw_time.map_or(String::new(), |v| format!("{v}")),
            ));
        }
        std::fs::write(inputs.out.join("sweep.csv"), csv)?;
    }
    std::fs::write(inputs.out.join("resolved_config.toml"), resolved_config_text(cfg, "bench")?)?;

    for r in &report.rows {
        eprintln!(
            "{:<20} speedup {:>6.2}x  recompute {:>5.1}%{}",
            r.policy,
            r.speedup,
            100.0 * r.recompute_fraction,
            match (r.sw_time, r.quality_change_pct) {
                (Some(sw), Some(q)) => format!("  sw {sw:.4} ({q:+.1}%)"),
                (Some(sw), None) => format!("  sw {sw:.4}"),
                _ => String::new(),
            }
        );
    }
    Ok(())
}
