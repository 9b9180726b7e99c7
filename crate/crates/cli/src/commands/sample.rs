//! `sample`: run the reverse SDE under a chosen policy and write samples in
//! both domains, the per-step trace, and diagnostic plots.

use crate::config::{resolved_config_text, RunConfig};
use crate::error::CliError;
use crate::io::{
    prepare_out_dir, read_sample_csv, sample_file_name, write_chart_csv, write_manifest,
    write_sample_csv, Manifest,
};
use crate::svg::{line_plot, Series};
use freqdiff_core::checkpoint::load as load_checkpoint;
use freqdiff_core::sampler::{run_sampler, Policy, SamplerConfig, ScoreSource, TraceRow};
use freqdiff_core::spectral::{dft_forward, phi};
use freqdiff_core::train::destandardize;
use std::path::Path;
use std::str::FromStr;

pub struct SampleInputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub analytic_template: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

pub fn run(cfg: &RunConfig, inputs: &SampleInputs<'_>) -> Result<(), CliError> {
    let policy = Policy::from_str(&cfg.sample.policy).map_err(CliError::Usage)?;

    let loaded = match (inputs.checkpoint, inputs.analytic_template) {
        (Some(ckpt), None) => Ok(load_checkpoint(ckpt)?),
        (None, Some(template)) => {
            if policy != Policy::Baseline {
                return Err(CliError::Usage(format!(
                    "the analytic point-mass score only supports the baseline policy, not {policy}"
                )));
            }
            Err(read_sample_csv(template)?)
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "pass either --checkpoint or --analytic-dirac-template, not both".to_string(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --checkpoint or --analytic-dirac-template is required".to_string(),
            ))
        }
    };

    let (n, stats, template_chart, params) = match &loaded {
        Ok(ckpt) => (ckpt.params.cfg.n, ckpt.stats.clone(), None, Some(&ckpt.params)),
        Err(template) => {
            let chart = phi(&dft_forward(template)?);
            (template.n, None, Some(chart), None)
        }
    };

    let mut run_cfg = SamplerConfig::new(n, policy, cfg.sample.seed);
    run_cfg.n_steps = cfg.sample.steps;
    run_cfg.n_chains = cfg.sample.chains;
    run_cfg.cache = cfg.cache_config(n);
    run_cfg.fixed_period = cfg.sample.fixed_period;

    let source = match (&params, &template_chart) {
        (Some(p), None) => ScoreSource::Network(p),
        (None, Some(chart)) => ScoreSource::AnalyticDirac(chart),
        _ => unreachable!("exactly one source form is loaded"),
    };
    let sched = cfg.schedule();
    let output = run_sampler(source, &sched, &run_cfg)?;

    prepare_out_dir(inputs.out, inputs.force)?;
    std::fs::create_dir_all(inputs.out.join("time"))?;
    std::fs::create_dir_all(inputs.out.join("freq"))?;
    let mut files = Vec::with_capacity(output.times.len());
    for (i, raw) in output.times.iter().enumerate() {
        // Training standardized the data; emit samples in data units.
        let time = match &stats {
            Some(st) => destandardize(std::slice::from_ref(raw), st).remove(0),
            None => raw.clone(),
        };
        let chart = phi(&dft_forward(&time)?);
        let name = sample_file_name(i);
        write_sample_csv(&inputs.out.join("time").join(&name), &time)?;
        write_chart_csv(&inputs.out.join("freq").join(&name), &chart)?;
        files.push(name);
    }

    let trace = &output.traces[0];
    let mut trace_csv = String::from(TraceRow::CSV_HEADER);
    trace_csv.push('\n');
    for row in &trace.rows {
        trace_csv.push_str(&row.to_csv());
        trace_csv.push('\n');
    }
    std::fs::write(inputs.out.join("trace.csv"), trace_csv)?;

    let hit: Vec<f64> = trace.rows.iter().map(|r| r.hit_rate).collect();
    let r_vals: Vec<f64> = trace.rows.iter().map(|r| r.r).collect();
    std::fs::write(
        inputs.out.join("hit_rate.svg"),
        line_plot("cache hit rate per step", "step", "hit rate", &[Series { label: &cfg.sample.policy, ys: &hit }]),
    )?;
    std::fs::write(
        inputs.out.join("r_trajectory.svg"),
        line_plot("event intensity per step", "step", "r", &[Series { label: &cfg.sample.policy, ys: &r_vals }]),
    )?;

    write_manifest(
        inputs.out,
        &Manifest {
            n,
            m: output.times.first().map(|s| s.m).unwrap_or(0),
            count: output.times.len(),
            seed: cfg.sample.seed,
            generator: None,
            policy: Some(cfg.sample.policy.clone()),
            steps: Some(cfg.sample.steps),
            files,
        },
    )?;
    std::fs::write(inputs.out.join("resolved_config.toml"), resolved_config_text(cfg, "sample")?)?;
    eprintln!(
        "sampled {} chains x {} steps with policy {}; wrote {}",
        cfg.sample.chains,
        cfg.sample.steps,
        cfg.sample.policy,
        inputs.out.display()
    );
    Ok(())
}
