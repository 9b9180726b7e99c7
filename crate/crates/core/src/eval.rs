//! Quality and performance metrics.
//!
//! Sample quality is measured with sliced Wasserstein distances (sorted
//! 1-D couplings averaged over random unit-sphere projections), per-coordinate
//! marginal distances, and a comparison of mean per-token spectral energy
//! curves. Performance is measured with a paired benchmark harness: every
//! repeat runs the baseline and the policy under the same seed, and the
//! reported speedup is the median of per-repeat wall-clock ratios.
//!
//! Determinism: projection `j` draws its direction from its own RNG stream
//! derived from the evaluation seed, so results do not depend on thread
//! scheduling; stream 0 is reserved for subsampling when set sizes differ.
//! Projection results are reduced in index order.

use crate::cache::E2crfConfig;
use crate::rng::{chain_rng, Stream};
use crate::sampler::{
    run_sampler, ChainTrace, Policy, SamplerConfig, SamplerError, ScoreSource,
};
use crate::scorenet::ScoreNetParams;
use crate::sde::DiffusionSchedule;
use crate::spectral::{dft_forward, spectral_energy, PhiVector, SpectralError, TimeSeriesSample};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input set")]
    EmptyInput,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("sample sets disagree in shape: {reason}")]
    ShapeMismatch { reason: String },
    #[error("coordinate index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("order p must be a finite value >= 1, got {p}")]
    BadOrder { p: f64 },
    #[error("benchmark needs a baseline row and at least one repeat")]
    BadBenchmark,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// A set of equal-length real vectors, row-major.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub data: Vec<f64>,
    pub n_rows: usize,
    pub dim: usize,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, n_rows: usize, dim: usize) -> Result<Self, EvalError> {
        if data.len() != n_rows * dim {
            return Err(EvalError::ShapeMismatch {
                reason: format!("{} values cannot form {n_rows} rows of {dim}", data.len()),
            });
        }
        Ok(Self { data, n_rows, dim })
    }

    /// Stack chart vectors as rows.
    pub fn from_charts(charts: &[PhiVector]) -> Result<Self, EvalError> {
        let first = charts.first().ok_or(EvalError::EmptyInput)?;
        let dim = first.coords.len();
        let mut data = Vec::with_capacity(charts.len() * dim);
        for c in charts {
            if c.coords.len() != dim || c.n != first.n || c.m != first.m {
                return Err(EvalError::ShapeMismatch {
                    reason: "chart vectors differ in shape".to_string(),
                });
            }
            data.extend_from_slice(&c.coords);
        }
        Ok(Self { data, n_rows: charts.len(), dim })
    }

    /// Stack flattened time-domain samples as rows.
    pub fn from_times(samples: &[TimeSeriesSample]) -> Result<Self, EvalError> {
        let first = samples.first().ok_or(EvalError::EmptyInput)?;
        let dim = first.values.len();
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            if s.n != first.n || s.m != first.m {
                return Err(EvalError::ShapeMismatch {
                    reason: "time-domain samples differ in shape".to_string(),
                });
            }
            data.extend_from_slice(&s.values);
        }
        Ok(Self { data, n_rows: samples.len(), dim })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Order-p distance between two equal-size real multisets via the sorted
/// coupling: `(mean_i |a_(i) − b_(i)|^p)^{1/p}`.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    if !(p.is_finite() && p >= 1.0) {
        return Err(EvalError::BadOrder { p });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mean: f64 = sa
        .iter()
        .zip(sb.iter())
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum::<f64>()
        / sa.len() as f64;
    Ok(mean.powf(1.0 / p))
}

/// Indices of a uniform subsample of size `target` (all indices when the set
/// is already small enough), in ascending order.
fn subsample_indices<R: Rng>(n_rows: usize, target: usize, rng: &mut R) -> Vec<usize> {
    if n_rows <= target {
        return (0..n_rows).collect();
    }
    let mut pool: Vec<usize> = (0..n_rows).collect();
    for i in 0..target {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(target);
    pool.sort_unstable();
    pool
}

/// Equalize set sizes by uniform subsampling of the larger set.
fn matched_indices(a: &SampleSet, b: &SampleSet, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let target = a.n_rows.min(b.n_rows);
    let mut rng = chain_rng(seed, Stream::Eval, 0);
    let ia = subsample_indices(a.n_rows, target, &mut rng);
    let ib = subsample_indices(b.n_rows, target, &mut rng);
    (ia, ib)
}

/// Sliced Wasserstein estimate: mean over `n_proj` uniform unit-sphere
/// directions of the 1-D distance between projected sets, plus the sample
/// standard error over projections. Unequal set sizes are equalized by
/// uniform subsampling of the larger set.
pub fn sliced_wasserstein(
    a: &SampleSet,
    b: &SampleSet,
    n_proj: usize,
    p: f64,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    if a.n_rows == 0 || b.n_rows == 0 || n_proj == 0 {
        return Err(EvalError::EmptyInput);
    }
    if a.dim != b.dim {
        return Err(EvalError::DimensionMismatch { left: a.dim, right: b.dim });
    }
    if a.dim == 0 {
        return Err(EvalError::ShapeMismatch { reason: "zero-dimensional samples".to_string() });
    }
    if !(p.is_finite() && p >= 1.0) {
        return Err(EvalError::BadOrder { p });
    }
    let (ia, ib) = matched_indices(a, b, seed);

    let project = |set: &SampleSet, idx: &[usize], u: &[f64]| -> Vec<f64> {
        idx.iter()
            .map(|&i| set.row(i).iter().zip(u.iter()).map(|(x, w)| x * w).sum())
            .collect()
    };
    let one = |j: usize| -> Result<f64, EvalError> {
        // Stream 0 is the subsampler; projection j uses stream j + 1.
        let mut rng = chain_rng(seed, Stream::Eval, j as u64 + 1);
        let mut u = vec![0.0; a.dim];
        loop {
            let mut norm_sq = 0.0;
            for w in u.iter_mut() {
                *w = rng.sample::<f64, _>(StandardNormal);
                norm_sq += *w * *w;
            }
            if norm_sq > 1e-24 {
                let inv = norm_sq.sqrt().recip();
                for w in u.iter_mut() {
                    *w *= inv;
                }
                break;
            }
        }
        wasserstein_1d(&project(a, &ia, &u), &project(b, &ib, &u), p)
    };

    let dists: Vec<f64> = if n_proj >= 64 {
        (0..n_proj).into_par_iter().map(one).collect::<Result<Vec<_>, _>>()?
    } else {
        (0..n_proj).map(one).collect::<Result<Vec<_>, _>>()?
    };
    let mean = dists.iter().sum::<f64>() / n_proj as f64;
    let stderr = if n_proj < 2 {
        0.0
    } else {
        let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n_proj - 1) as f64;
        (var / n_proj as f64).sqrt()
    };
    Ok((mean, stderr))
}

/// 1-D distance between coordinate `j` of the two sets.
pub fn marginal_wasserstein(
    a: &SampleSet,
    b: &SampleSet,
    j: usize,
    p: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    if a.n_rows == 0 || b.n_rows == 0 {
        return Err(EvalError::EmptyInput);
    }
    if a.dim != b.dim {
        return Err(EvalError::DimensionMismatch { left: a.dim, right: b.dim });
    }
    if j >= a.dim {
        return Err(EvalError::IndexOutOfRange { index: j, dim: a.dim });
    }
    let (ia, ib) = matched_indices(a, b, seed);
    let xa: Vec<f64> = ia.iter().map(|&i| a.row(i)[j]).collect();
    let xb: Vec<f64> = ib.iter().map(|&i| b.row(i)[j]).collect();
    wasserstein_1d(&xa, &xb, p)
}

/// Mean per-token spectral energy curves of two sample sets and the L2 gap
/// between them.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectralComparison {
    pub reference_curve: Vec<f64>,
    pub candidate_curve: Vec<f64>,
    pub l2_gap: f64,
}

pub fn spectral_density_compare(
    reference: &[TimeSeriesSample],
    candidate: &[TimeSeriesSample],
) -> Result<SpectralComparison, EvalError> {
    let first = reference.first().ok_or(EvalError::EmptyInput)?;
    if candidate.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (n, m) = (first.n, first.m);
    let mean_curve = |set: &[TimeSeriesSample]| -> Result<Vec<f64>, EvalError> {
        let mut acc: Option<Vec<f64>> = None;
        for s in set {
            if s.n != n || s.m != m {
                return Err(EvalError::ShapeMismatch {
                    reason: "samples disagree in length or feature count".to_string(),
                });
            }
            let e = spectral_energy(&dft_forward(s)?);
            match acc.as_mut() {
                None => acc = Some(e),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(e.iter()) {
                        *x += y;
                    }
                }
            }
        }
        let mut a = acc.expect("set checked nonempty");
        for x in a.iter_mut() {
            *x /= set.len() as f64;
        }
        Ok(a)
    };
    let reference_curve = mean_curve(reference)?;
    let candidate_curve = mean_curve(candidate)?;
    let l2_gap = reference_curve
        .iter()
        .zip(candidate_curve.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(SpectralComparison { reference_curve, candidate_curve, l2_gap })
}

/// Mean per-step hit rate over equal step buckets.
pub fn bucket_hit_rates(trace: &ChainTrace, n_buckets: usize) -> Vec<f64> {
    if trace.rows.is_empty() || n_buckets == 0 {
        return Vec::new();
    }
    let n = trace.rows.len();
    let buckets = n_buckets.min(n);
    let width = n.div_ceil(buckets);
    trace
        .rows
        .chunks(width)
        .map(|c| c.iter().map(|r| r.hit_rate).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Benchmark settings. Every repeat pairs the baseline and the candidate
/// under the same seed; chains run single-threaded for stable timing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchmarkConfig {
    pub n_steps: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub cache: E2crfConfig,
    pub fixed_period: usize,
}

impl BenchmarkConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n_steps: 1000,
            n_repeats: 5,
            seed,
            cache: E2crfConfig::defaults_for(n),
            fixed_period: 2,
        }
    }
}

/// One benchmarked policy.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PolicyBenchmark {
    pub policy: Policy,
    pub wall_ns_per_repeat: Vec<u64>,
    pub median_wall_ns: u64,
    /// Median over repeats of (baseline wall / policy wall) under paired seeds.
    pub speedup: f64,
    /// Mean |S| / n_tokens over steps.
    pub recompute_fraction: f64,
    /// Key/value projection rows skipped, summed over steps and layers.
    pub kv_rows_skipped: u64,
    /// Attention query/context rows skipped (0 when the network computes
    /// queries for all rows).
    pub attention_rows_skipped: u64,
    /// Feed-forward rows skipped.
    pub mlp_rows_skipped: u64,
    pub hit_rate_curve: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchmarkReport {
    pub n_steps: usize,
    pub n_repeats: usize,
    pub n_tokens: usize,
    pub rows: Vec<PolicyBenchmark>,
}

fn median_u64(xs: &[u64]) -> u64 {
    let mut v = xs.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn median_f64(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall-clock comparison of sampling policies. The baseline must be in the
/// list; each repeat runs one chain per policy under a shared seed and the
/// speedup is the median of per-repeat baseline/policy ratios. One warmup
/// baseline run is excluded from timing.
pub fn benchmark(
    policies: &[Policy],
    params: &ScoreNetParams,
    sched: &DiffusionSchedule,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError> {
    if cfg.n_repeats == 0 || !policies.contains(&Policy::Baseline) {
        return Err(EvalError::BadBenchmark);
    }
    let n_tok = crate::spectral::n_tokens(params.cfg.n);
    let run_cfg = |policy: Policy, seed: u64| SamplerConfig {
        n_steps: cfg.n_steps,
        n_chains: 1,
        policy,
        seed,
        cache: cfg.cache.clone(),
        fixed_period: cfg.fixed_period,
        parallel: false,
    };

    // Warmup, untimed.
    run_sampler(ScoreSource::Network(params), sched, &run_cfg(Policy::Baseline, cfg.seed))?;

    let mut baseline_ns = Vec::with_capacity(cfg.n_repeats);
    for j in 0..cfg.n_repeats {
        let start = Instant::now();
        run_sampler(ScoreSource::Network(params), sched, &run_cfg(Policy::Baseline, cfg.seed + j as u64))?;
        baseline_ns.push(start.elapsed().as_nanos() as u64);
    }

    let mut rows = Vec::with_capacity(policies.len());
    for &policy in policies {
        let (wall_ns, last_trace): (Vec<u64>, Option<ChainTrace>) = if policy == Policy::Baseline {
            (baseline_ns.clone(), {
                let out = run_sampler(ScoreSource::Network(params), sched, &run_cfg(policy, cfg.seed))?;
                out.traces.into_iter().next()
            })
        } else {
            let mut ns = Vec::with_capacity(cfg.n_repeats);
            let mut trace = None;
            for j in 0..cfg.n_repeats {
                let start = Instant::now();
                let out = run_sampler(ScoreSource::Network(params), sched, &run_cfg(policy, cfg.seed + j as u64))?;
                ns.push(start.elapsed().as_nanos() as u64);
                trace = out.traces.into_iter().next();
            }
            (ns, trace)
        };
        let trace = last_trace.expect("one chain per run");

        let ratios: Vec<f64> = baseline_ns
            .iter()
            .zip(wall_ns.iter())
            .map(|(&b, &p)| b as f64 / p.max(1) as f64)
            .collect();
        let speedup = if policy == Policy::Baseline { 1.0 } else { median_f64(&ratios) };

        let layers = params.cfg.n_layers as u64;
        let mut recomputed_total = 0u64;
        let mut skipped_total = 0u64;
        for r in &trace.rows {
            recomputed_total += r.set_size as u64;
            skipped_total += (n_tok - r.set_size) as u64;
        }
        let hidden_skipped = if params.cfg.q_for_all { 0 } else { skipped_total * layers };
        rows.push(PolicyBenchmark {
            policy,
            median_wall_ns: median_u64(&wall_ns),
            wall_ns_per_repeat: wall_ns,
            speedup,
            recompute_fraction: recomputed_total as f64 / (n_tok * cfg.n_steps) as f64,
            kv_rows_skipped: skipped_total * layers,
            attention_rows_skipped: hidden_skipped,
            mlp_rows_skipped: hidden_skipped,
            hit_rate_curve: bucket_hit_rates(&trace, 10),
        });
    }
    Ok(BenchmarkReport { n_steps: cfg.n_steps, n_repeats: cfg.n_repeats, n_tokens: n_tok, rows })
}

/// Combined evaluation summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub sw_time: f64,
    pub sw_time_stderr: f64,
    pub sw_freq: f64,
    pub sw_freq_stderr: f64,
    pub marginal_w: Vec<f64>,
    pub spectral_l2: f64,
    pub speedup: f64,
    pub hit_rate_curve: Vec<f64>,
}
