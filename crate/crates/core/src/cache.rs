//! Event-driven per-token cache with error feedback.
//!
//! During reverse-time sampling most spectral tokens evolve slowly, so their
//! network rows can be reused across steps. This module owns everything about
//! that reuse *except* the network arithmetic itself:
//!
//! * [`CacheState`] — stale K/V buffers per layer, the last served score/CRF
//!   row per token, end-of-step CRF snapshots for change detection, per-token
//!   staleness ages, and per-step hit/miss history.
//! * the recompute policy — [`event_intensity`] (global change pressure `r`),
//!   [`token_drift`] (per-token CRF change), [`energy_threshold`]
//!   (energy-weighted trigger thresholds), and [`select_recompute_set`]
//!   which combines them with probing into a [`RecomputeSet`].
//! * error feedback — [`feedback_alpha`] and [`apply_error_feedback`], which
//!   blend freshly computed probe rows into the cached rows so persistent
//!   cache error contracts by `(1 − α)` per probe visit.
//!
//! Cold start needs no special casing: a token with fewer than two CRF
//! snapshots reports infinite drift, which forces full recomputation on the
//! first two steps of every chain.

use rand::Rng;
use thiserror::Error;

/// Errors from cache bookkeeping and policy evaluation.
#[derive(Debug, Error)]
pub enum CacheError {
    #[error("partial recompute set on a cold cache (first steps must recompute all tokens)")]
    ColdPartialRecompute,
    #[error("cache built for {built} does not match request {requested}")]
    IncompatibleShape { built: String, requested: String },
    #[error("token index {index} out of range for {n_tokens} tokens")]
    IndexOutOfRange { index: usize, n_tokens: usize },
    #[error("recompute set indices must be strictly increasing")]
    UnsortedOrDuplicate,
    #[error("feedback gain {alpha} outside [0, 1]")]
    BadAlpha { alpha: f64 },
    #[error("configuration invalid: {reason}")]
    BadConfig { reason: String },
}

/// Why a token entered the recompute set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecomputeReason {
    /// Member of the always-recompute low-frequency band `{0..=k_low}`.
    LowFreq,
    /// CRF drift exceeded the token's energy-weighted threshold.
    HighChange,
    /// Randomly probed for error measurement and feedback.
    Probe,
}

/// Sorted, unique token indices to recompute this step, with the reason each
/// was chosen.
#[derive(Debug, Clone, Default)]
pub struct RecomputeSet {
    pub indices: Vec<usize>,
    reasons: Vec<RecomputeReason>,
}

impl RecomputeSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from `(index, reason)` pairs; sorts by index and keeps the first
    /// reason for any duplicate index.
    pub fn from_pairs(mut pairs: Vec<(usize, RecomputeReason)>) -> Self {
        pairs.sort_by_key(|(k, _)| *k);
        pairs.dedup_by_key(|(k, _)| *k);
        let (indices, reasons) = pairs.into_iter().unzip();
        Self { indices, reasons }
    }

    /// Every token, uniformly attributed to `reason`.
    pub fn full(n_tokens: usize, reason: RecomputeReason) -> Self {
        Self { indices: (0..n_tokens).collect(), reasons: vec![reason; n_tokens] }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Validate strict ordering, uniqueness, and index range.
    pub fn check_bounds(&self, n_tokens: usize) -> Result<(), CacheError> {
        for w in self.indices.windows(2) {
            if w[0] >= w[1] {
                return Err(CacheError::UnsortedOrDuplicate);
            }
        }
        if let Some(&last) = self.indices.last() {
            if last >= n_tokens {
                return Err(CacheError::IndexOutOfRange { index: last, n_tokens });
            }
        }
        Ok(())
    }

    /// Per-token reason lookup (`None` = not in the set).
    pub fn reason_by_token(&self, n_tokens: usize) -> Vec<Option<RecomputeReason>> {
        let mut out = vec![None; n_tokens];
        for (&k, &r) in self.indices.iter().zip(self.reasons.iter()) {
            out[k] = Some(r);
        }
        out
    }

    /// Indices chosen as probes.
    pub fn probe_indices(&self) -> Vec<usize> {
        self.indices
            .iter()
            .zip(self.reasons.iter())
            .filter(|(_, r)| **r == RecomputeReason::Probe)
            .map(|(&k, _)| k)
            .collect()
    }

    /// Counts `(n_low_freq, n_high_change, n_probe)`.
    pub fn reason_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.reasons {
            match r {
                RecomputeReason::LowFreq => c.0 += 1,
                RecomputeReason::HighChange => c.1 += 1,
                RecomputeReason::Probe => c.2 += 1,
            }
        }
        c
    }
}

/// Per-step work accounting produced by a cache-assisted forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub n_tokens: usize,
    /// Tokens recomputed this step (`|S|`).
    pub recomputed: usize,
    /// Tokens served from cache this step.
    pub cached: usize,
    /// Fresh K/V rows written, summed over layers.
    pub kv_rows_computed: usize,
    /// Stale K/V rows reused, summed over layers.
    pub kv_rows_reused: usize,
    /// Hidden-path rows executed, summed over layers.
    pub hidden_rows_computed: usize,
}

/// Policy configuration for event-driven caching.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct E2crfConfig {
    /// Always recompute tokens `0..=k_low` (low frequencies carry most
    /// energy). Clamped to the token range at use.
    pub k_low: usize,
    /// Threshold scale: token threshold is `tau0 / (energy_eps + E_κ)`.
    pub tau0: f64,
    /// Regularizer in the threshold denominator.
    pub energy_eps: f64,
    /// Regularizer in the event-intensity denominator.
    pub eta: f64,
    /// Scheduled probe period (steps) in the calm regime.
    pub refresh_interval: usize,
    /// Below this event intensity no probes run.
    pub tau_safe: f64,
    /// Above this event intensity probes run every step.
    pub tau_warn: f64,
    /// Fraction of tokens probed when probing runs (`⌈f·T⌉`, at least 1).
    pub probe_fraction: f64,
    /// Event-intensity lag: compare CRF snapshots `delta_steps` apart.
    pub delta_steps: usize,
    /// Upper bound on the feedback gain α.
    pub alpha_cap: f64,
}

impl E2crfConfig {
    /// Defaults for a signal of length `n` (`k_low = ⌊n/10⌋`).
    pub fn defaults_for(n: usize) -> Self {
        Self {
            k_low: n / 10,
            tau0: 0.01,
            energy_eps: 1e-6,
            eta: 1e-6,
            refresh_interval: 50,
            tau_safe: 0.1,
            tau_warn: 0.5,
            probe_fraction: 0.05,
            delta_steps: 1,
            alpha_cap: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |reason: &str| Err(CacheError::BadConfig { reason: reason.to_string() });
        if !(self.tau0 > 0.0) {
            return bad("tau0 must be positive");
        }
        if !(self.energy_eps > 0.0) || !(self.eta > 0.0) {
            return bad("energy_eps and eta must be positive");
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be at least 1");
        }
        if !(self.tau_safe >= 0.0 && self.tau_warn >= self.tau_safe) {
            return bad("need 0 <= tau_safe <= tau_warn");
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction <= 1.0) {
            return bad("probe_fraction must lie in (0, 1]");
        }
        if self.delta_steps == 0 {
            return bad("delta_steps must be at least 1");
        }
        if !(self.alpha_cap >= 0.0 && self.alpha_cap <= 1.0) {
            return bad("alpha_cap must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Result of one error-feedback application.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackReport {
    pub n_probes: usize,
    /// L2 norm of the measured CRF error over all probed tokens.
    pub probe_error_norm: f64,
    pub alpha: f64,
}

/// Per-step hit/miss record.
#[derive(Debug, Clone, Copy)]
pub struct StepCounts {
    pub recomputed: usize,
    pub cached: usize,
}

/// Mutable per-chain cache: stale K/V, served output rows, CRF history, ages.
#[derive(Debug, Clone)]
pub struct CacheState {
    n_layers: usize,
    n_tokens: usize,
    d_model: usize,
    token_dim: usize,
    /// Per-layer key rows, `(n_layers × n_tokens × d_model)`.
    kv_k: Vec<f64>,
    /// Per-layer value rows, same shape.
    kv_v: Vec<f64>,
    /// Served score rows `(n_tokens × token_dim)`.
    score: Vec<f64>,
    /// Served CRF rows `(n_tokens × d_model)`.
    crf: Vec<f64>,
    /// End-of-step CRF snapshots (merged step outputs), newest first.
    snaps: Vec<Vec<f64>>,
    /// Number of valid entries in `snaps`.
    n_snaps: usize,
    /// Token has been computed at least once (slot content meaningful).
    valid: Vec<bool>,
    /// Steps since the served score/CRF row was written fresh. Probe blending
    /// does NOT reset this: a blended row still carries residual error.
    age_out: Vec<usize>,
    /// Steps since the token's K/V rows were written fresh. Probes DO reset
    /// this (they push fresh K/V).
    age_kv: Vec<usize>,
    /// Committed steps.
    step: usize,
    history: Vec<StepCounts>,
}

impl CacheState {
    /// Empty (cold) cache for the given network geometry. `snap_depth` CRF
    /// snapshots are retained; the drift lag `delta_steps` requires at least
    /// `delta_steps + 1`.
    pub fn new(n_layers: usize, n_tokens: usize, d_model: usize, token_dim: usize, snap_depth: usize) -> Self {
        let depth = snap_depth.max(2);
        Self {
            n_layers,
            n_tokens,
            d_model,
            token_dim,
            kv_k: vec![0.0; n_layers * n_tokens * d_model],
            kv_v: vec![0.0; n_layers * n_tokens * d_model],
            score: vec![0.0; n_tokens * token_dim],
            crf: vec![0.0; n_tokens * d_model],
            snaps: vec![vec![0.0; n_tokens * d_model]; depth],
            n_snaps: 0,
            valid: vec![false; n_tokens],
            age_out: vec![0; n_tokens],
            age_kv: vec![0; n_tokens],
            step: 0,
            history: Vec::new(),
        }
    }

    /// Geometry check against the network about to use this cache.
    pub fn check_compatible(
        &self,
        n_layers: usize,
        n_tokens: usize,
        d_model: usize,
        token_dim: usize,
    ) -> Result<(), CacheError> {
        if (self.n_layers, self.n_tokens, self.d_model, self.token_dim)
            != (n_layers, n_tokens, d_model, token_dim)
        {
            return Err(CacheError::IncompatibleShape {
                built: format!(
                    "layers={} tokens={} d={} token_dim={}",
                    self.n_layers, self.n_tokens, self.d_model, self.token_dim
                ),
                requested: format!(
                    "layers={n_layers} tokens={n_tokens} d={d_model} token_dim={token_dim}"
                ),
            });
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// At least one step committed.
    pub fn is_warm(&self) -> bool {
        self.step > 0
    }

    /// Every token holds a served row (true after any full recompute).
    pub fn all_tokens_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    pub fn kv_k_mut(&mut self) -> &mut Vec<f64> {
        &mut self.kv_k
    }

    pub fn kv_v_mut(&mut self) -> &mut Vec<f64> {
        &mut self.kv_v
    }

    pub fn score_row(&self, k: usize) -> &[f64] {
        &self.score[k * self.token_dim..(k + 1) * self.token_dim]
    }

    pub fn crf_row(&self, k: usize) -> &[f64] {
        &self.crf[k * self.d_model..(k + 1) * self.d_model]
    }

    pub fn age_out(&self) -> &[usize] {
        &self.age_out
    }

    pub fn age_kv(&self) -> &[usize] {
        &self.age_kv
    }

    pub fn steps_committed(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepCounts] {
        &self.history
    }

    /// Record one completed step: rotate CRF snapshots, update served rows,
    /// ages and validity per reason, and append hit/miss counts.
    ///
    /// Rows refreshed as `LowFreq`/`HighChange` overwrite their served slots
    /// and reset both ages. `Probe` rows reset only the K/V age; their served
    /// slots are adjusted later by [`apply_error_feedback`]. Untouched rows
    /// age by one. With `q_for_all` every served row is overwritten (the
    /// whole hidden path ran), and only the K/V age distinguishes tokens.
    pub fn commit_step(
        &mut self,
        in_set: &[bool],
        reasons: &[Option<RecomputeReason>],
        score_tokens: &[f64],
        crf_final: &[f64],
        q_for_all: bool,
    ) {
        debug_assert_eq!(in_set.len(), self.n_tokens);
        debug_assert_eq!(reasons.len(), self.n_tokens);
        debug_assert_eq!(score_tokens.len(), self.score.len());
        debug_assert_eq!(crf_final.len(), self.crf.len());

        // Rotate snapshots: newest at index 0.
        let depth = self.snaps.len();
        self.snaps.rotate_right(1);
        self.snaps[0].copy_from_slice(crf_final);
        self.n_snaps = (self.n_snaps + 1).min(depth);

        let (td, d) = (self.token_dim, self.d_model);
        let mut recomputed = 0usize;
        for k in 0..self.n_tokens {
            let fresh_out = q_for_all
                || matches!(reasons[k], Some(RecomputeReason::LowFreq) | Some(RecomputeReason::HighChange));
            if fresh_out {
                self.score[k * td..(k + 1) * td].copy_from_slice(&score_tokens[k * td..(k + 1) * td]);
                self.crf[k * d..(k + 1) * d].copy_from_slice(&crf_final[k * d..(k + 1) * d]);
                self.valid[k] = true;
                self.age_out[k] = 0;
            } else {
                self.age_out[k] += 1;
            }
            if in_set[k] {
                self.age_kv[k] = 0;
                recomputed += 1;
            } else {
                self.age_kv[k] += 1;
            }
        }
        self.step += 1;
        self.history.push(StepCounts { recomputed, cached: self.n_tokens - recomputed });
    }

    /// Global event intensity from the CRF snapshots `lag` steps apart
    /// (newest vs. newest−lag). Returns 0.0 while history is too short —
    /// during those steps the drift sentinel forces full recomputation
    /// anyway, and a zero intensity keeps the feedback gain at zero.
    pub fn event_intensity(&self, lag: usize, eta: f64) -> f64 {
        if self.n_snaps < lag + 1 {
            return 0.0;
        }
        event_intensity(&self.snaps[0], &self.snaps[lag], eta)
    }

    /// Per-token CRF drift between the two newest snapshots; `+∞` while
    /// fewer than two snapshots exist (forces recomputation).
    pub fn token_drifts(&self) -> Vec<f64> {
        let d = self.d_model;
        let mut out = vec![f64::INFINITY; self.n_tokens];
        if self.n_snaps < 2 {
            return out;
        }
        for k in 0..self.n_tokens {
            out[k] = token_drift(
                &self.snaps[0][k * d..(k + 1) * d],
                &self.snaps[1][k * d..(k + 1) * d],
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Policy primitives
// ---------------------------------------------------------------------------

/// Relative squared change `‖z_now − z_prev‖² / (‖z_prev‖² + eta)`.
pub fn event_intensity(z_now: &[f64], z_prev: &[f64], eta: f64) -> f64 {
    debug_assert_eq!(z_now.len(), z_prev.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in z_now.iter().zip(z_prev.iter()) {
        let dd = a - b;
        num += dd * dd;
        den += b * b;
    }
    num / (den + eta)
}

/// Absolute per-token CRF change `‖curr − prev‖₂`.
pub fn token_drift(curr: &[f64], prev: &[f64]) -> f64 {
    debug_assert_eq!(curr.len(), prev.len());
    let mut acc = 0.0;
    for (a, b) in curr.iter().zip(prev.iter()) {
        let d = a - b;
        acc += d * d;
    }
    acc.sqrt()
}

/// Energy-weighted trigger threshold `tau0 / (eps + energy)`: high-energy
/// tokens get tight thresholds, near-empty tokens are nearly never triggered.
pub fn energy_threshold(tau0: f64, eps: f64, energy: f64) -> f64 {
    tau0 / (eps + energy)
}

/// Feedback gain `α = min(cap, r/2)`.
pub fn feedback_alpha(r: f64, cap: f64) -> f64 {
    (r / 2.0).min(cap)
}

/// Number of probes for `n_tokens` at the configured fraction (`⌈f·T⌉`, at
/// least 1).
pub fn probe_count(probe_fraction: f64, n_tokens: usize) -> usize {
    ((probe_fraction * n_tokens as f64).ceil() as usize).max(1)
}

/// Whether probes run this step, given the event intensity.
///
/// Monotone in `r`: below `tau_safe` never, between `tau_safe` and `tau_warn`
/// only on scheduled steps (`step % refresh_interval == 0`), above `tau_warn`
/// every step.
pub fn probes_allowed(cfg: &E2crfConfig, step_index: usize, r: f64) -> bool {
    if r > cfg.tau_warn {
        true
    } else if r >= cfg.tau_safe {
        step_index % cfg.refresh_interval == 0
    } else {
        false
    }
}

/// Assemble the recompute set for one step:
///
/// 1. the low-frequency band `{0..=k_low}` (clamped to range), always;
/// 2. every higher token whose drift strictly exceeds its threshold
///    `tau0 / (energy_eps + E_κ)` — with `energies = None` the threshold is
///    uniform `tau0` (energy weighting disabled);
/// 3. when [`probes_allowed`], `⌈probe_fraction·T⌉` (≥ 1) tokens drawn
///    uniformly without replacement from the complement of 1 ∪ 2.
///
/// Infinite drift (cold tokens) always exceeds the threshold, so the first
/// two steps of a chain recompute everything with no special casing.
pub fn select_recompute_set<R: Rng>(
    cfg: &E2crfConfig,
    drifts: &[f64],
    energies: Option<&[f64]>,
    step_index: usize,
    r: f64,
    rng: &mut R,
) -> RecomputeSet {
    let n_tokens = drifts.len();
    let mut pairs = Vec::new();
    let k_top = cfg.k_low.min(n_tokens.saturating_sub(1));
    for k in 0..=k_top {
        pairs.push((k, RecomputeReason::LowFreq));
    }
    for k in (k_top + 1)..n_tokens {
        let tau = match energies {
            Some(e) => energy_threshold(cfg.tau0, cfg.energy_eps, e[k]),
            None => cfg.tau0,
        };
        if drifts[k] > tau {
            pairs.push((k, RecomputeReason::HighChange));
        }
    }
    if probes_allowed(cfg, step_index, r) {
        let mut chosen = vec![false; n_tokens];
        for (k, _) in &pairs {
            chosen[*k] = true;
        }
        let mut complement: Vec<usize> = (0..n_tokens).filter(|k| !chosen[*k]).collect();
        let want = probe_count(cfg.probe_fraction, n_tokens).min(complement.len());
        // Partial Fisher–Yates: uniform sample without replacement.
        for i in 0..want {
            let j = rng.gen_range(i..complement.len());
            complement.swap(i, j);
            pairs.push((complement[i], RecomputeReason::Probe));
        }
    }
    RecomputeSet::from_pairs(pairs)
}

/// Blend freshly computed probe rows into the served cache rows:
/// `cached += α·(fresh − cached)` on both the CRF and score slots, leaving a
/// `(1 − α)` fraction of the measured error in place. `fresh_score` and
/// `fresh_crf` are full step outputs (`n_tokens × token_dim` / `× d_model`);
/// only `probes` rows are read. Returns the pre-blend CRF error norm.
pub fn apply_error_feedback(
    cache: &mut CacheState,
    probes: &[usize],
    fresh_score: &[f64],
    fresh_crf: &[f64],
    alpha: f64,
) -> Result<FeedbackReport, CacheError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(CacheError::BadAlpha { alpha });
    }
    let (td, d, n_tokens) = (cache.token_dim, cache.d_model, cache.n_tokens);
    let mut err_sq = 0.0;
    for &k in probes {
        if k >= n_tokens {
            return Err(CacheError::IndexOutOfRange { index: k, n_tokens });
        }
        for i in k * d..(k + 1) * d {
            let eps = fresh_crf[i] - cache.crf[i];
            err_sq += eps * eps;
            cache.crf[i] += alpha * eps;
        }
        for i in k * td..(k + 1) * td {
            let eps = fresh_score[i] - cache.score[i];
            cache.score[i] += alpha * eps;
        }
    }
    Ok(FeedbackReport { n_probes: probes.len(), probe_error_norm: err_sq.sqrt(), alpha })
}

/// Fraction of token-steps served from cache over a history window.
/// Empty history reports 0.0.
pub fn hit_rate(history: &[StepCounts]) -> f64 {
    let mut cached = 0usize;
    let mut total = 0usize;
    for c in history {
        cached += c.cached;
        total += c.recomputed + c.cached;
    }
    if total == 0 {
        0.0
    } else {
        cached as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn small_cache() -> CacheState {
        // 1 layer, 3 tokens, d_model 2, token_dim 2.
        CacheState::new(1, 3, 2, 2, 2)
    }

    #[test]
    fn event_intensity_formula() {
        // Identical states: zero intensity.
        assert_eq!(event_intensity(&[1.0, 2.0], &[1.0, 2.0], 1e-6), 0.0);
        // ‖Δ‖² = 1, ‖prev‖² = 0 → 1/η.
        let r = event_intensity(&[1.0, 0.0], &[0.0, 0.0], 1e-6);
        assert!((r - 1e6).abs() < 1.0);
        // Generic: Δ = (1, −1), prev = (1, 1) → 2 / (2 + η).
        let r = event_intensity(&[2.0, 0.0], &[1.0, 1.0], 1e-6);
        assert!((r - 2.0 / (2.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn token_drift_is_euclidean() {
        assert_eq!(token_drift(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        assert_eq!(token_drift(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn energy_threshold_examples() {
        // Zero-energy token: τ = τ0/ε = 0.01/1e−6 = 1e4 (effectively never
        // triggered by finite drift of reasonable size).
        assert!((energy_threshold(0.01, 1e-6, 0.0) - 1e4).abs() < 1e-9);
        // Unit-energy token: τ ≈ τ0.
        let t1 = energy_threshold(0.01, 1e-6, 1.0);
        assert!((t1 - 0.01).abs() < 1e-7);
        // Monotone decreasing in energy.
        assert!(energy_threshold(0.01, 1e-6, 10.0) < t1);
    }

    #[test]
    fn feedback_alpha_capped() {
        assert_eq!(feedback_alpha(0.05, 0.1), 0.025);
        assert_eq!(feedback_alpha(1.0, 0.1), 0.1);
        assert_eq!(feedback_alpha(0.0, 0.1), 0.0);
    }

    #[test]
    fn probe_count_ceils_with_floor_one() {
        assert_eq!(probe_count(0.05, 21), 2); // ⌈1.05⌉
        assert_eq!(probe_count(0.05, 20), 1);
        assert_eq!(probe_count(0.05, 1), 1);
        assert_eq!(probe_count(1.0, 7), 7);
    }

    #[test]
    fn probe_gate_is_monotone_in_r() {
        let mut cfg = E2crfConfig::defaults_for(40);
        cfg.refresh_interval = 10;
        // Calm: never.
        assert!(!probes_allowed(&cfg, 0, 0.05));
        assert!(!probes_allowed(&cfg, 10, 0.05));
        // Intermediate: scheduled steps only.
        assert!(probes_allowed(&cfg, 0, 0.3));
        assert!(probes_allowed(&cfg, 10, 0.3));
        assert!(!probes_allowed(&cfg, 3, 0.3));
        // Hot: every step.
        assert!(probes_allowed(&cfg, 3, 0.9));
    }

    #[test]
    fn selection_low_band_plus_probes() {
        // N = 40 → 21 tokens, k_low = 4. Calm drifts, no probes → S = {0..4}.
        let cfg = E2crfConfig::defaults_for(40);
        let drifts = vec![0.0; 21];
        let energies = vec![1.0; 21];
        let mut rng = stream_rng(1, Stream::Probe);
        let set = select_recompute_set(&cfg, &drifts, Some(&energies), 3, 0.01, &mut rng);
        assert_eq!(set.indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(set.reason_counts(), (5, 0, 0));
        // Per-step hit rate (21 − 5)/21 = 16/21.
        assert!((16.0 / 21.0 - (21 - set.len()) as f64 / 21.0).abs() < 1e-15);

        // Hot regime adds ⌈0.05·21⌉ = 2 probes from the complement.
        let set = select_recompute_set(&cfg, &drifts, Some(&energies), 3, 0.9, &mut rng);
        let (low, high, probe) = set.reason_counts();
        assert_eq!((low, high, probe), (5, 0, 2));
        for p in set.probe_indices() {
            assert!(p > 4);
        }
        set.check_bounds(21).unwrap();
    }

    #[test]
    fn selection_trigger_is_strict_and_energy_weighted() {
        let mut cfg = E2crfConfig::defaults_for(40);
        cfg.tau_safe = 1.0; // suppress probes
        cfg.tau_warn = 2.0;
        let mut drifts = vec![0.0; 21];
        let mut energies = vec![0.0; 21];
        // Token 10: drift exactly at threshold (τ = 0.01/(1e−6+1) ≈ 0.01) — NOT selected.
        energies[10] = 1.0;
        drifts[10] = energy_threshold(cfg.tau0, cfg.energy_eps, 1.0);
        // Token 11: just above → selected.
        energies[11] = 1.0;
        drifts[11] = energy_threshold(cfg.tau0, cfg.energy_eps, 1.0) * (1.0 + 1e-9);
        // Token 12: big drift but zero energy → τ = 1e4 → not selected.
        drifts[12] = 100.0;
        let mut rng = stream_rng(2, Stream::Probe);
        let set = select_recompute_set(&cfg, &drifts, Some(&energies), 5, 0.0, &mut rng);
        assert_eq!(set.indices, vec![0, 1, 2, 3, 4, 11]);

        // Without energy weighting the same drifts trigger on plain τ0: the
        // zero-energy token 12 (drift 100) now fires, while tokens 10 and 11
        // (drift ≈ τ0/(1+ε) < τ0) do not.
        let set_u = select_recompute_set(&cfg, &drifts, None, 5, 0.0, &mut rng);
        assert!(set_u.indices.contains(&12));
        assert!(!set_u.indices.contains(&11));
        assert!(!set_u.indices.contains(&10));
    }

    #[test]
    fn cold_cache_has_infinite_drift_then_finite() {
        let mut cache = small_cache();
        assert!(cache.token_drifts().iter().all(|d| d.is_infinite()));
        assert_eq!(cache.event_intensity(1, 1e-6), 0.0);

        let in_set = [true, true, true];
        let reasons = [Some(RecomputeReason::LowFreq); 3];
        let out_score = [1.0; 6];
        let crf1 = [1.0; 6];
        cache.commit_step(&in_set, &reasons, &out_score, &crf1, false);
        assert!(cache.token_drifts().iter().all(|d| d.is_infinite()));

        let crf2 = [1.5; 6];
        cache.commit_step(&in_set, &reasons, &out_score, &crf2, false);
        let drifts = cache.token_drifts();
        // Per token: ‖(0.5, 0.5)‖ = 0.5·√2.
        for d in &drifts {
            assert!((d - 0.5 * std::f64::consts::SQRT_2).abs() < 1e-12);
        }
        // r = ‖Δ‖²/(‖prev‖²+η) = (6·0.25)/(6·1+η).
        let r = cache.event_intensity(1, 1e-6);
        assert!((r - 1.5 / (6.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn commit_updates_slots_and_ages_per_reason() {
        let mut cache = small_cache();
        // Warm up: full recompute.
        let all = [true; 3];
        let lf = [Some(RecomputeReason::LowFreq); 3];
        cache.commit_step(&all, &lf, &[1.0; 6], &[1.0; 6], false);
        assert!(cache.all_tokens_valid());
        assert_eq!(cache.age_out(), &[0, 0, 0]);

        // Step 2: token 0 refreshed, token 1 untouched, token 2 probed.
        let in_set = [true, false, true];
        let reasons = [Some(RecomputeReason::LowFreq), None, Some(RecomputeReason::Probe)];
        let fresh_score = [9.0; 6];
        let fresh_crf = [9.0; 6];
        cache.commit_step(&in_set, &reasons, &fresh_score, &fresh_crf, false);
        // Refreshed slot overwritten; untouched and probed slots keep old data.
        assert_eq!(cache.score_row(0), &[9.0, 9.0]);
        assert_eq!(cache.score_row(1), &[1.0, 1.0]);
        assert_eq!(cache.score_row(2), &[1.0, 1.0]);
        assert_eq!(cache.crf_row(2), &[1.0, 1.0]);
        // Output age: probe does not reset; K/V age: probe resets.
        assert_eq!(cache.age_out(), &[0, 1, 1]);
        assert_eq!(cache.age_kv(), &[0, 1, 0]);
        let h = cache.history();
        assert_eq!(h[1].recomputed, 2);
        assert_eq!(h[1].cached, 1);
        assert!((hit_rate(h) - (0.0 + 1.0) / 6.0).abs() < 1e-15);
    }

    #[test]
    fn q_for_all_commit_refreshes_every_output_row() {
        let mut cache = small_cache();
        let all = [true; 3];
        let lf = [Some(RecomputeReason::LowFreq); 3];
        cache.commit_step(&all, &lf, &[1.0; 6], &[1.0; 6], true);
        let in_set = [false, true, false];
        let reasons = [None, Some(RecomputeReason::LowFreq), None];
        cache.commit_step(&in_set, &reasons, &[7.0; 6], &[7.0; 6], true);
        for k in 0..3 {
            assert_eq!(cache.score_row(k), &[7.0, 7.0]);
        }
        assert_eq!(cache.age_out(), &[0, 0, 0]);
        assert_eq!(cache.age_kv(), &[1, 0, 1]);
    }

    #[test]
    fn feedback_blends_and_leaves_contracted_residual() {
        let mut cache = small_cache();
        let all = [true; 3];
        let lf = [Some(RecomputeReason::LowFreq); 3];
        cache.commit_step(&all, &lf, &[1.0; 6], &[2.0; 6], false);

        let fresh_score = [4.0; 6];
        let fresh_crf = [5.0; 6];
        let alpha = 0.1;
        let rep = apply_error_feedback(&mut cache, &[1], &fresh_score, &fresh_crf, alpha).unwrap();
        assert_eq!(rep.n_probes, 1);
        // CRF error per slot = 3, two slots → norm = 3√2.
        assert!((rep.probe_error_norm - 3.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        // Blended values.
        for v in cache.crf_row(1) {
            assert!((v - 2.3).abs() < 1e-12);
        }
        for v in cache.score_row(1) {
            assert!((v - 1.3).abs() < 1e-12);
        }
        // Residual error is exactly (1−α) of the original.
        for v in cache.crf_row(1) {
            assert!(((5.0 - v) - (1.0 - alpha) * 3.0).abs() < 1e-10);
        }
        // Untouched rows unchanged.
        assert_eq!(cache.crf_row(0), &[2.0, 2.0]);

        // Invalid gains rejected.
        assert!(apply_error_feedback(&mut cache, &[1], &fresh_score, &fresh_crf, 1.5).is_err());
        assert!(apply_error_feedback(&mut cache, &[1], &fresh_score, &fresh_crf, -0.1).is_err());
        assert!(apply_error_feedback(&mut cache, &[9], &fresh_score, &fresh_crf, 0.1).is_err());
    }

    #[test]
    fn hit_rate_examples() {
        assert_eq!(hit_rate(&[]), 0.0);
        let h = [StepCounts { recomputed: 5, cached: 16 }];
        assert!((hit_rate(&h) - 16.0 / 21.0).abs() < 1e-15);
        let h2 = [
            StepCounts { recomputed: 21, cached: 0 },
            StepCounts { recomputed: 5, cached: 16 },
        ];
        assert!((hit_rate(&h2) - 16.0 / 42.0).abs() < 1e-15);
    }

    #[test]
    fn recompute_set_validation() {
        let set = RecomputeSet::from_pairs(vec![
            (3, RecomputeReason::Probe),
            (1, RecomputeReason::LowFreq),
            (3, RecomputeReason::HighChange),
        ]);
        assert_eq!(set.indices, vec![1, 3]);
        set.check_bounds(4).unwrap();
        assert!(set.check_bounds(3).is_err());
        let full = RecomputeSet::full(4, RecomputeReason::LowFreq);
        assert_eq!(full.len(), 4);
        assert_eq!(full.reason_counts(), (4, 0, 0));
    }

    #[test]
    fn config_validation() {
        let cfg = E2crfConfig::defaults_for(128);
        assert_eq!(cfg.k_low, 12);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.tau_warn = 0.05; // below tau_safe
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.probe_fraction = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.refresh_interval = 0;
        assert!(bad.validate().is_err());
    }
}
