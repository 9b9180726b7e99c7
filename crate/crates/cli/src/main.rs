//! Command-line front end: data generation, training, sampling, benchmarking,
//! and evaluation over reproducible layered configs.

mod commands;
mod config;
mod error;
mod io;
mod svg;

use clap::{Args, Parser, Subcommand};
use config::{override_opt, RunConfig};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "freqdiff",
    version,
    about = "Frequency-domain diffusion for time series with event-driven cached sampling"
)]
struct Cli {
    /// TOML config file; flags override individual values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores; bench defaults to 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the score network on a dataset directory.
    Train(TrainArgs),
    /// Sample from a checkpoint (or the analytic point-mass score).
    Sample(SampleArgs),
    /// Benchmark sampling policies with paired seeds.
    Bench(BenchArgs),
    /// Compare two sample sets.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// sine_mix | ar1 | square | dirac
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data or external CSVs).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from an existing checkpoint instead of fresh parameters.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    rff_dim: Option<usize>,
    /// Compute attention queries for cached rows too (stale keys/values only).
    #[arg(long)]
    q_for_all: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV template: sample the closed-form point-mass score around it
    /// (baseline policy only; no checkpoint needed).
    #[arg(long)]
    analytic_dirac_template: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// baseline | e2crf | naive | fixed_schedule | e2crf_no_feedback | e2crf_uniform_tau
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Low-frequency band size, or `max` to cover every token.
    #[arg(long)]
    k_low: Option<String>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    tau_safe: Option<f64>,
    #[arg(long)]
    tau_warn: Option<f64>,
    #[arg(long)]
    probe_fraction: Option<f64>,
    #[arg(long)]
    alpha_cap: Option<f64>,
    #[arg(long)]
    delta_steps: Option<usize>,
    #[arg(long)]
    fixed_period: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reference dataset for the sample-quality column.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated policy list (must include baseline).
    #[arg(long)]
    policies: Option<String>,
    /// Also run the low-band / probe-interval grid.
    #[arg(long)]
    sweep: bool,
    /// Comma-separated low band sizes for the sweep.
    #[arg(long)]
    sweep_k: Option<String>,
    /// Comma-separated probe intervals for the sweep.
    #[arg(long)]
    sweep_r: Option<String>,
    /// Low-frequency band size, or `max` to cover every token.
    #[arg(long)]
    k_low: Option<String>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    fixed_period: Option<usize>,
    #[arg(long)]
    n_proj: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference directory (dataset or samples).
    #[arg(long)]
    reference: PathBuf,
    /// Candidate directory (dataset or samples).
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional trace.csv to derive the hit-rate curve.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    n_proj: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    force: bool,
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Usage(format!("bad list entry {x:?}: {e}")))
        })
        .collect()
}

/// `max` covers every token (the band is clamped to the token count).
/// The sentinel stays within TOML's integer range so the resolved config
/// can still be echoed.
fn parse_k_low(s: &str) -> Result<usize, CliError> {
    if s == "max" {
        Ok(i64::MAX as usize)
    } else {
        s.parse::<usize>().map_err(|e| CliError::Usage(format!("bad --k-low {s:?}: {e}")))
    }
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    // Timing commands default to one worker to keep measurements stable.
    let default_threads = match &cli.cmd {
        Cmd::Bench(_) => Some(1),
        _ => None,
    };
    if let Some(k) = cli.threads.or(default_threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }

    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::GenData(a) => {
            override_opt(&mut cfg.data.generator, &a.generator);
            override_opt(&mut cfg.data.n, &a.n);
            override_opt(&mut cfg.data.m, &a.m);
            override_opt(&mut cfg.data.count, &a.count);
            override_opt(&mut cfg.data.seed, &a.seed);
            commands::gen_data::run(&cfg, &a.out, a.force)
        }
        Cmd::Train(a) => {
            override_opt(&mut cfg.train.epochs, &a.epochs);
            override_opt(&mut cfg.train.batch_size, &a.batch_size);
            override_opt(&mut cfg.train.lr_max, &a.lr_max);
            override_opt(&mut cfg.train.warmup_epochs, &a.warmup_epochs);
            override_opt(&mut cfg.train.weight_decay, &a.weight_decay);
            override_opt(&mut cfg.train.val_fraction, &a.val_fraction);
            override_opt(&mut cfg.train.t_min, &a.t_min);
            override_opt(&mut cfg.train.seed, &a.seed);
            override_opt(&mut cfg.model.n_layers, &a.n_layers);
            override_opt(&mut cfg.model.d_model, &a.d_model);
            override_opt(&mut cfg.model.n_heads, &a.n_heads);
            override_opt(&mut cfg.model.rff_dim, &a.rff_dim);
            if a.q_for_all {
                cfg.model.q_for_all = true;
            }
            commands::train::run(&cfg, &a.data, &a.out, a.init_from.as_deref(), a.force)
        }
        Cmd::Sample(a) => {
            override_opt(&mut cfg.sample.policy, &a.policy);
            override_opt(&mut cfg.sample.steps, &a.steps);
            override_opt(&mut cfg.sample.chains, &a.chains);
            override_opt(&mut cfg.sample.seed, &a.seed);
            override_opt(&mut cfg.sample.fixed_period, &a.fixed_period);
            if let Some(s) = &a.k_low {
                cfg.cache.k_low = Some(parse_k_low(s)?);
            }
            override_opt(&mut cfg.cache.tau0, &a.tau0);
            override_opt(&mut cfg.cache.refresh_interval, &a.refresh_interval);
            override_opt(&mut cfg.cache.tau_safe, &a.tau_safe);
            override_opt(&mut cfg.cache.tau_warn, &a.tau_warn);
            override_opt(&mut cfg.cache.probe_fraction, &a.probe_fraction);
            override_opt(&mut cfg.cache.alpha_cap, &a.alpha_cap);
            override_opt(&mut cfg.cache.delta_steps, &a.delta_steps);
            commands::sample::run(
                &cfg,
                &commands::sample::SampleInputs {
                    checkpoint: a.checkpoint.as_deref(),
                    analytic_template: a.analytic_dirac_template.as_deref(),
                    out: &a.out,
                    force: a.force,
                },
            )
        }
        Cmd::Bench(a) => {
            override_opt(&mut cfg.bench.steps, &a.steps);
            override_opt(&mut cfg.bench.repeats, &a.repeats);
            override_opt(&mut cfg.bench.seed, &a.seed);
            override_opt(&mut cfg.bench.n_proj, &a.n_proj);
            override_opt(&mut cfg.bench.eval_samples, &a.eval_samples);
            override_opt(&mut cfg.sample.fixed_period, &a.fixed_period);
            if let Some(s) = &a.k_low {
                cfg.cache.k_low = Some(parse_k_low(s)?);
            }
            override_opt(&mut cfg.cache.refresh_interval, &a.refresh_interval);
            if let Some(list) = &a.policies {
                cfg.bench.policies = list.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(list) = &a.sweep_k {
                cfg.bench.sweep_k = parse_usize_list(list)?;
            }
            if let Some(list) = &a.sweep_r {
                cfg.bench.sweep_r = parse_usize_list(list)?;
            }
            commands::bench::run(
                &cfg,
                &commands::bench::BenchInputs {
                    checkpoint: &a.checkpoint,
                    data: a.data.as_deref(),
                    out: &a.out,
                    sweep: a.sweep,
                    force: a.force,
                },
            )
        }
        Cmd::Eval(a) => {
            override_opt(&mut cfg.eval.n_proj, &a.n_proj);
            override_opt(&mut cfg.eval.p, &a.p);
            override_opt(&mut cfg.eval.seed, &a.seed);
            override_opt(&mut cfg.eval.max_samples, &a.max_samples);
            commands::eval::run(
                &cfg,
                &commands::eval::EvalInputs {
                    reference: &a.reference,
                    candidate: &a.candidate,
                    trace: a.trace.as_deref(),
                    out: &a.out,
                    force: a.force,
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version and 2 for usage errors.
            e.exit();
        }
    };
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
