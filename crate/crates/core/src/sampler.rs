//! Reverse-SDE sampling drivers.
//!
//! One shared step loop serves every policy; the policies differ only in how
//! the score is produced:
//!
//! * `baseline` — full network recomputation every step (or the closed-form
//!   point-mass score when a template is injected instead of a network);
//! * `e2crf` — event-driven caching: drift-triggered refresh, energy-weighted
//!   thresholds, gated probes, error feedback;
//! * `naive` — the low-frequency band is recomputed every step, everything
//!   else is cached forever (no trigger, no probes, no feedback);
//! * `fixed_schedule` — full recompute every P-th step, everything cached in
//!   between;
//! * `e2crf_no_feedback` — like `e2crf` but probe results are only measured,
//!   never blended back;
//! * `e2crf_uniform_tau` — like `e2crf` with energy weighting disabled
//!   (uniform thresholds τ₀).
//!
//! The SDE update is shared verbatim across policies, and the diffusion
//! noise stream is separate from the probe-selection stream, so two policies
//! run with the same seed see bit-identical noise. This is what makes the
//! degeneracy oracles exact: `e2crf` with the low band covering all tokens,
//! and `fixed_schedule` with period 1, reproduce the baseline trajectory
//! bit for bit.
//!
//! Chains are independent: each owns its RNG streams, cache, and trace.
//! Unconditional refreshes (the naive band, fixed-schedule full steps, cold
//! start of the naive policy) are attributed to the "low frequency" trace
//! bucket; drift-triggered and probe refreshes keep their own buckets.

use crate::cache::{
    apply_error_feedback, feedback_alpha, select_recompute_set, CacheError, CacheState,
    E2crfConfig, RecomputeReason, RecomputeSet,
};
use crate::rng::{chain_rng, Stream};
use crate::scorenet::{
    forward_cached, forward_full_with_scratch, score_tokens_to_phi, ForwardScratch,
    ScoreNetError, ScoreNetParams,
};
use crate::sde::{
    analytic_dirac_score, mirrored_increment, prior_sample, reverse_step_with_increment,
    DiffusionSchedule, SdeError,
};
use crate::spectral::{
    dft_inverse, phi_inverse, spectral_energy, n_tokens, PhiVector, SpectralError,
    TimeSeriesSample,
};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

/// Errors from sampling runs.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampler configuration invalid: {reason}")]
    BadConfig { reason: String },
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("policy {0} requires network parameters, not an injected analytic score")]
    PolicyNeedsNetwork(Policy),
    #[error(transparent)]
    Net(#[from] ScoreNetError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Baseline,
    E2crf,
    Naive,
    FixedSchedule,
    E2crfNoFeedback,
    E2crfUniformTau,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Baseline,
        Policy::E2crf,
        Policy::Naive,
        Policy::FixedSchedule,
        Policy::E2crfNoFeedback,
        Policy::E2crfUniformTau,
    ];

    /// Policies that maintain a cache.
    pub fn uses_cache(self) -> bool {
        self != Policy::Baseline
    }

    /// Ablation variants (everything except the two headline policies).
    pub fn is_ablation(self) -> bool {
        matches!(
            self,
            Policy::Naive | Policy::FixedSchedule | Policy::E2crfNoFeedback | Policy::E2crfUniformTau
        )
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Policy::Baseline),
            "e2crf" => Ok(Policy::E2crf),
            "naive" => Ok(Policy::Naive),
            "fixed_schedule" => Ok(Policy::FixedSchedule),
            "e2crf_no_feedback" => Ok(Policy::E2crfNoFeedback),
            "e2crf_uniform_tau" => Ok(Policy::E2crfUniformTau),
            other => Err(format!(
                "unknown policy {other:?} (expected baseline, e2crf, naive, fixed_schedule, \
                 e2crf_no_feedback, or e2crf_uniform_tau)"
            )),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Baseline => "baseline",
            Policy::E2crf => "e2crf",
            Policy::Naive => "naive",
            Policy::FixedSchedule => "fixed_schedule",
            Policy::E2crfNoFeedback => "e2crf_no_feedback",
            Policy::E2crfUniformTau => "e2crf_uniform_tau",
        })
    }
}

/// Sampling run settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Reverse Euler steps; step `i` evaluates at `t = 1 − i/n_steps` and the
    /// final state sits at `t = 0`.
    pub n_steps: usize,
    /// Independent chains (batch size).
    pub n_chains: usize,
    pub policy: Policy,
    pub seed: u64,
    /// Cache policy settings (cached policies only).
    pub cache: E2crfConfig,
    /// Full-recompute period of the `fixed_schedule` policy.
    pub fixed_period: usize,
    /// Run chains on the thread pool. Timing-sensitive callers switch this
    /// off to avoid contention noise.
    pub parallel: bool,
}

impl SamplerConfig {
    pub fn new(n: usize, policy: Policy, seed: u64) -> Self {
        Self {
            n_steps: 1000,
            n_chains: 1,
            policy,
            seed,
            cache: E2crfConfig::defaults_for(n),
            fixed_period: 2,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_steps == 0 {
            return Err(SamplerError::BadConfig { reason: "n_steps must be at least 1".to_string() });
        }
        if self.n_chains == 0 {
            return Err(SamplerError::BadConfig { reason: "n_chains must be at least 1".to_string() });
        }
        if self.fixed_period == 0 {
            return Err(SamplerError::BadConfig { reason: "fixed_period must be at least 1".to_string() });
        }
        if self.policy.uses_cache() {
            self.cache.validate()?;
        }
        Ok(())
    }
}

/// Where scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a> {
    /// Trained (or injected) network parameters.
    Network(&'a ScoreNetParams),
    /// Closed-form score of the diffusion started at a point mass on the
    /// given chart vector. Only the baseline policy accepts this.
    AnalyticDirac(&'a PhiVector),
}

/// One per-step trace record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    /// Event intensity (0 for baseline and during cold start).
    pub r: f64,
    pub set_size: usize,
    pub n_low: usize,
    pub n_high: usize,
    pub n_probe: usize,
    /// Per-step cache hit rate `(n_tokens − |S|)/n_tokens` (0 for baseline).
    pub hit_rate: f64,
    pub probe_error_norm: f64,
    /// Running mean of the measured duration of full-recompute steps — an
    /// estimate of what this step would have cost without caching.
    pub wall_ns_full_equivalent: u64,
    pub wall_ns_actual: u64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,t,r,set_size,n_low,n_high,n_probe,hit_rate,probe_error_norm,wall_ns_full_equivalent,wall_ns_actual";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.t,
            self.r,
            self.set_size,
            self.n_low,
            self.n_high,
            self.n_probe,
            self.hit_rate,
            self.probe_error_norm,
            self.wall_ns_full_equivalent,
            self.wall_ns_actual
        )
    }
}

/// Per-chain trace: one row per step plus the chain's wall-clock total.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub rows: Vec<TraceRow>,
    pub wall_ns_total: u64,
}

/// Output of a sampling run: final states in chart coordinates and in the
/// time domain, plus one trace per chain.
#[derive(Debug)]
pub struct SamplerOutput {
    pub charts: Vec<PhiVector>,
    pub times: Vec<TimeSeriesSample>,
    pub traces: Vec<ChainTrace>,
}

/// Run the configured number of chains. Shapes come from the score source
/// (network config or template).
pub fn run_sampler(
    source: ScoreSource<'_>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<SamplerOutput, SamplerError> {
    cfg.validate()?;
    let (n, m) = match source {
        ScoreSource::Network(p) => (p.cfg.n, p.cfg.m),
        ScoreSource::AnalyticDirac(z0) => {
            if cfg.policy.uses_cache() {
                return Err(SamplerError::PolicyNeedsNetwork(cfg.policy));
            }
            (z0.n, z0.m)
        }
    };

    let chain_results: Vec<Result<ChainResult, SamplerError>> = if cfg.parallel && cfg.n_chains > 1 {
        use rayon::prelude::*;
        (0..cfg.n_chains)
            .into_par_iter()
            .map(|c| run_chain(source, sched, cfg, n, m, c))
            .collect()
    } else {
        (0..cfg.n_chains).map(|c| run_chain(source, sched, cfg, n, m, c)).collect()
    };

    let mut charts = Vec::with_capacity(cfg.n_chains);
    let mut times = Vec::with_capacity(cfg.n_chains);
    let mut traces = Vec::with_capacity(cfg.n_chains);
    for res in chain_results {
        let r = res?;
        charts.push(r.chart);
        times.push(r.time);
        traces.push(r.trace);
    }
    Ok(SamplerOutput { charts, times, traces })
}

/// Baseline sampling (no cache). The policy field of `cfg` is ignored.
pub fn sample_baseline(
    params: &ScoreNetParams,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<SamplerOutput, SamplerError> {
    let cfg = SamplerConfig { policy: Policy::Baseline, ..cfg.clone() };
    run_sampler(ScoreSource::Network(params), sched, &cfg)
}

/// Event-driven cached sampling. The policy field of `cfg` is ignored.
pub fn sample_e2crf(
    params: &ScoreNetParams,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<SamplerOutput, SamplerError> {
    let cfg = SamplerConfig { policy: Policy::E2crf, ..cfg.clone() };
    run_sampler(ScoreSource::Network(params), sched, &cfg)
}

/// Ablation sampling; `cfg.policy` must be one of the ablation policies.
pub fn sample_ablation(
    params: &ScoreNetParams,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<SamplerOutput, SamplerError> {
    if !cfg.policy.is_ablation() {
        return Err(SamplerError::BadConfig {
            reason: format!("policy {} is not an ablation policy", cfg.policy),
        });
    }
    run_sampler(ScoreSource::Network(params), sched, cfg)
}

struct ChainResult {
    chart: PhiVector,
    time: TimeSeriesSample,
    trace: ChainTrace,
}

fn low_band_set(k_low: usize, t: usize) -> RecomputeSet {
    let top = k_low.min(t.saturating_sub(1));
    RecomputeSet::from_pairs((0..=top).map(|k| (k, RecomputeReason::LowFreq)).collect())
}

fn run_chain(
    source: ScoreSource<'_>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    n: usize,
    m: usize,
    chain: usize,
) -> Result<ChainResult, SamplerError> {
    let mut noise_rng = chain_rng(cfg.seed, Stream::Noise, chain as u64);
    let mut probe_rng = chain_rng(cfg.seed, Stream::Probe, chain as u64);
    let n_tok = n_tokens(n);
    let dt = 1.0 / cfg.n_steps as f64;

    let mut z = prior_sample(n, m, &mut noise_rng);

    let (params, mut scratch) = match source {
        ScoreSource::Network(p) => {
            if p.cfg.n != n || p.cfg.m != m {
                return Err(SamplerError::BadConfig {
                    reason: "network shape disagrees with requested sample shape".to_string(),
                });
            }
            (Some(p), Some(ForwardScratch::new(&p.cfg)))
        }
        ScoreSource::AnalyticDirac(_) => (None, None),
    };
    let mut cache = if cfg.policy.uses_cache() {
        let p = params.expect("cached policies validated to carry a network");
        Some(CacheState::new(
            p.cfg.n_layers,
            n_tok,
            p.cfg.d_model,
            p.cfg.token_dim(),
            cfg.cache.delta_steps + 1,
        ))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cfg.n_steps);
    let mut full_ns_sum: u128 = 0;
    let mut full_ns_count: u64 = 0;
    let chain_start = Instant::now();

    for i in 0..cfg.n_steps {
        let t = 1.0 - i as f64 / cfg.n_steps as f64;
        let step_start = Instant::now();

        let (score, r, set_size, counts, probe_err) = match cfg.policy {
            Policy::Baseline => {
                let score = match source {
                    ScoreSource::Network(p) => {
                        let xs = phi_inverse(&z)?;
                        let out = forward_full_with_scratch(p, &xs, t, scratch.as_mut().expect("baseline network scratch"))?;
                        score_tokens_to_phi(&out.score_tokens, n, m)
                    }
                    ScoreSource::AnalyticDirac(z0) => analytic_dirac_score(z0, &z, t, sched)?,
                };
                (score, 0.0, n_tok, (n_tok, 0, 0), 0.0)
            }
            _ => {
                let p = params.expect("cached policies carry a network");
                let cache = cache.as_mut().expect("cached policies carry a cache");
                let cc = &cfg.cache;
                let xs = phi_inverse(&z)?;
                let r = cache.event_intensity(cc.delta_steps, cc.eta);
                let set = match cfg.policy {
                    Policy::E2crf | Policy::E2crfNoFeedback => {
                        let drifts = cache.token_drifts();
                        let energies = spectral_energy(&xs);
                        select_recompute_set(cc, &drifts, Some(&energies), i, r, &mut probe_rng)
                    }
                    Policy::E2crfUniformTau => {
                        let drifts = cache.token_drifts();
                        select_recompute_set(cc, &drifts, None, i, r, &mut probe_rng)
                    }
                    Policy::Naive => {
                        if cache.all_tokens_valid() {
                            low_band_set(cc.k_low, n_tok)
                        } else {
                            RecomputeSet::full(n_tok, RecomputeReason::LowFreq)
                        }
                    }
                    Policy::FixedSchedule => {
                        if i % cfg.fixed_period == 0 {
                            RecomputeSet::full(n_tok, RecomputeReason::LowFreq)
                        } else {
                            RecomputeSet::empty()
                        }
                    }
                    Policy::Baseline => unreachable!("handled above"),
                };
                let out = forward_cached(p, &xs, t, cache, &set, scratch.as_mut().expect("cached network scratch"))?;
                let probes = set.probe_indices();
                let probe_err = if probes.is_empty() {
                    0.0
                } else {
                    // No-feedback runs measure the probe error with zero gain;
                    // the cache rows stay untouched.
                    let alpha = match cfg.policy {
                        Policy::E2crfNoFeedback => 0.0,
                        _ => feedback_alpha(r, cc.alpha_cap),
                    };
                    apply_error_feedback(cache, &probes, &out.result.score_tokens, &out.result.crf_final, alpha)?
                        .probe_error_norm
                };
                let counts = set.reason_counts();
                let score = score_tokens_to_phi(&out.result.score_tokens, n, m);
                (score, r, set.len(), counts, probe_err)
            }
        };

        let incr = mirrored_increment(n, m, dt, &mut noise_rng)?;
        z = reverse_step_with_increment(&z, t, dt, &score, sched, &incr)?;
        if z.coords.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFiniteState { step: i });
        }

        let wall_ns_actual = step_start.elapsed().as_nanos() as u64;
        if set_size == n_tok {
            full_ns_sum += wall_ns_actual as u128;
            full_ns_count += 1;
        }
        let wall_ns_full_equivalent = if full_ns_count > 0 {
            (full_ns_sum / full_ns_count as u128) as u64
        } else {
            wall_ns_actual
        };
        rows.push(TraceRow {
            step: i,
            t,
            r,
            set_size,
            n_low: counts.0,
            n_high: counts.1,
            n_probe: counts.2,
            hit_rate: (n_tok - set_size) as f64 / n_tok as f64,
            probe_error_norm: probe_err,
            wall_ns_full_equivalent,
            wall_ns_actual,
        });
    }

    let time = dft_inverse(&phi_inverse(&z)?)?;
    Ok(ChainResult {
        chart: z,
        time,
        trace: ChainTrace { rows, wall_ns_total: chain_start.elapsed().as_nanos() as u64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::scorenet::ScoreNetConfig;
    use crate::spectral::{dft_forward, phi};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn test_params(n: usize, m: usize, seed: u64) -> ScoreNetParams {
        let cfg = ScoreNetConfig { n, m, n_layers: 2, d_model: 16, n_heads: 2, rff_dim: 8, q_for_all: false };
        let mut rng = stream_rng(seed, Stream::Init);
        let mut p = ScoreNetParams::init(cfg, &mut rng).unwrap();
        p.randomize_output_projection(0.05, &mut rng);
        p
    }

    fn base_cfg(n: usize, policy: Policy) -> SamplerConfig {
        let mut cfg = SamplerConfig::new(n, policy, 77);
        cfg.n_steps = 40;
        cfg.n_chains = 2;
        cfg.parallel = false;
        cfg
    }

    #[test]
    fn baseline_is_deterministic_and_real() {
        let p = test_params(16, 2, 1);
        let sched = DiffusionSchedule::default();
        let cfg = base_cfg(16, Policy::Baseline);
        let a = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        let b = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        for (x, y) in a.charts.iter().zip(b.charts.iter()) {
            assert_eq!(x.coords, y.coords);
        }
        // Real time-domain output with matching shape and finite values.
        for s in &a.times {
            assert_eq!((s.n, s.m), (16, 2));
            assert!(s.values.iter().all(|v| v.is_finite()));
        }
        assert_eq!(a.traces[0].rows.len(), cfg.n_steps);
    }

    #[test]
    fn chains_differ_and_are_order_independent() {
        let p = test_params(16, 1, 2);
        let sched = DiffusionSchedule::default();
        let mut cfg = base_cfg(16, Policy::Baseline);
        cfg.n_chains = 3;
        let seq = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        cfg.parallel = true;
        let par = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        for (x, y) in seq.charts.iter().zip(par.charts.iter()) {
            assert_eq!(x.coords, y.coords, "parallel chains must match sequential");
        }
        assert_ne!(seq.charts[0].coords, seq.charts[1].coords, "chains must differ");
    }

    #[test]
    fn full_low_band_reduces_to_baseline_bitwise() {
        let p = test_params(20, 1, 3);
        let sched = DiffusionSchedule::default();
        let base = run_sampler(ScoreSource::Network(&p), &sched, &base_cfg(20, Policy::Baseline)).unwrap();
        let mut cfg = base_cfg(20, Policy::E2crf);
        cfg.cache.k_low = n_tokens(20); // covers every token
        let cached = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        for (x, y) in base.charts.iter().zip(cached.charts.iter()) {
            assert_eq!(x.coords, y.coords, "degenerate policy must match baseline bitwise");
        }
        // Every step recomputed everything.
        for row in &cached.traces[0].rows {
            assert_eq!(row.set_size, n_tokens(20));
            assert_eq!(row.hit_rate, 0.0);
        }
    }

    #[test]
    fn fixed_schedule_period_one_reduces_to_baseline_bitwise() {
        let p = test_params(16, 2, 4);
        let sched = DiffusionSchedule::default();
        let base = run_sampler(ScoreSource::Network(&p), &sched, &base_cfg(16, Policy::Baseline)).unwrap();
        let mut cfg = base_cfg(16, Policy::FixedSchedule);
        cfg.fixed_period = 1;
        let fixed = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        for (x, y) in base.charts.iter().zip(fixed.charts.iter()) {
            assert_eq!(x.coords, y.coords);
        }
    }

    #[test]
    fn traces_conserve_tokens_and_probe_stream_keeps_noise_paired() {
        let p = test_params(40, 1, 5);
        let sched = DiffusionSchedule::default();
        let t = n_tokens(40);

        // Aggressive probing so the probe stream is consumed heavily.
        let mut cfg = base_cfg(40, Policy::E2crf);
        cfg.cache.tau_safe = 0.0;
        cfg.cache.refresh_interval = 2;
        let cached = run_sampler(ScoreSource::Network(&p), &sched, &cfg).unwrap();
        for row in &cached.traces[0].rows {
            assert_eq!(row.n_low + row.n_high + row.n_probe, row.set_size);
            assert!(row.set_size <= t);
            let recomputed = row.set_size;
            assert_eq!(recomputed + (t - recomputed), t);
            // Low band always present.
            assert!(row.n_low >= 1);
        }
        // Cold start: first two steps recompute everything.
        assert_eq!(cached.traces[0].rows[0].set_size, t);
        assert_eq!(cached.traces[0].rows[1].set_size, t);

        // A policy consuming *no* probe draws still sees the same noise:
        // naive and e2crf share diffusion RNG by construction. Their first
        // two steps are full recomputes in both policies, so the step-2
        // state diverges only through policy, not noise. Cheap proxy: the
        // prior draw (pre-step state) must match, which we check through a
        // one-step run.
        let mut one = base_cfg(40, Policy::Naive);
        one.n_steps = 1;
        one.n_chains = 1;
        let a = run_sampler(ScoreSource::Network(&p), &sched, &one).unwrap();
        let mut one_b = base_cfg(40, Policy::E2crf);
        one_b.n_steps = 1;
        one_b.n_chains = 1;
        let b = run_sampler(ScoreSource::Network(&p), &sched, &one_b).unwrap();
        // Both policies recompute everything on step 0, so one-step outputs
        // are bit-identical under the shared seed.
        assert_eq!(a.charts[0].coords, b.charts[0].coords);
    }

    #[test]
    fn analytic_dirac_concentrates_near_template() {
        // Draw a random template, run the closed-form score, and require the
        // chain average to land near the template relative to its size.
        let (n, m) = (8, 1);
        let mut rng = stream_rng(6, Stream::Init);
        let mut x0 = TimeSeriesSample::zeros(n, m);
        for v in x0.values.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let z0 = phi(&dft_forward(&x0).unwrap());
        let sched = DiffusionSchedule::default();
        let mut cfg = SamplerConfig::new(n, Policy::Baseline, 123);
        cfg.n_steps = 400;
        cfg.n_chains = 16;
        cfg.parallel = false;
        let out = run_sampler(ScoreSource::AnalyticDirac(&z0), &sched, &cfg).unwrap();
        let mut mean = vec![0.0; n * m];
        for s in &out.times {
            for (acc, v) in mean.iter_mut().zip(s.values.iter()) {
                *acc += v / out.times.len() as f64;
            }
        }
        let dist: f64 = mean
            .iter()
            .zip(x0.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = x0.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist < 0.2 * scale, "chain mean {dist} too far from template scale {scale}");
    }

    #[test]
    fn cached_policies_reject_analytic_source() {
        let z0 = PhiVector::zeros(8, 1);
        let sched = DiffusionSchedule::default();
        let cfg = base_cfg(8, Policy::E2crf);
        let err = run_sampler(ScoreSource::AnalyticDirac(&z0), &sched, &cfg);
        assert!(matches!(err, Err(SamplerError::PolicyNeedsNetwork(_))));
    }

    #[test]
    fn ablation_wrapper_validates_policy() {
        let p = test_params(16, 1, 7);
        let sched = DiffusionSchedule::default();
        let cfg = base_cfg(16, Policy::Baseline);
        assert!(sample_ablation(&p, &sched, &cfg).is_err());
        let cfg = base_cfg(16, Policy::Naive);
        assert!(sample_ablation(&p, &sched, &cfg).is_ok());
    }

    #[test]
    fn trace_csv_row_shape() {
        let row = TraceRow {
            step: 3,
            t: 0.25,
            r: 0.5,
            set_size: 7,
            n_low: 5,
            n_high: 1,
            n_probe: 1,
            hit_rate: 0.65,
            probe_error_norm: 0.01,
            wall_ns_full_equivalent: 1000,
            wall_ns_actual: 400,
        };
        let line = row.to_csv();
        assert_eq!(line.split(',').count(), TraceRow::CSV_HEADER.split(',').count());
        assert!(line.starts_with("3,0.25,0.5,7,5,1,1,"));
    }
}
