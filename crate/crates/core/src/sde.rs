//! Variance-preserving diffusion in φ-coordinates.
//!
//! The forward SDE `dx = −½β(t)x dt + √β(t) dW` acts on the real chart of the
//! half-spectrum. Because the linear drift commutes with the DFT, the chart
//! dynamics are again VP with *mirrored* noise: the DFT image of real white
//! noise, whose φ-coordinate covariance is the diagonal `Λ²·dt` (variance
//! `dt` for DC/Nyquist coordinates, `dt/2` for interior ones).
//!
//! Closed forms for the linear schedule: `B(t) = ∫₀ᵗ β`, perturbation-kernel
//! mean coefficient `exp(−½B(t))` and per-coordinate variance
//! `(1 − exp(−B(t)))·λ_c²`. Time is normalized to `t ∈ [0, 1]`.

use crate::spectral::{dft_forward, lambda_diag, phi, PhiVector, TimeSeriesSample};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors from schedule evaluation and SDE stepping.
#[derive(Debug, Error)]
pub enum SdeError {
    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },
    #[error("perturbation kernel undefined at t = 0 (zero variance)")]
    ZeroVariance,
    #[error("step size {dt} invalid for time {t}")]
    BadStep { t: f64, dt: f64 },
    #[error("non-finite score at coordinate {index}; sampler must abort")]
    NonFiniteScore { index: usize },
    #[error("shape mismatch between state ({state_n}×{state_m}) and score ({score_n}×{score_m})")]
    ShapeMismatch { state_n: usize, state_m: usize, score_n: usize, score_m: usize },
}

/// Linear VP noise schedule on normalized time `t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Uniform discretization steps of the unit interval used by samplers.
    pub n_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, n_steps: 1000 }
    }
}

impl DiffusionSchedule {
    fn check_time(&self, t: f64) -> Result<(), SdeError> {
        // Allow a hair of floating-point slack at the endpoints.
        if !(t.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&t)) {
            return Err(SdeError::TimeOutOfRange { t });
        }
        Ok(())
    }

    /// β(t), linear between `beta_min` at t=0 and `beta_max` at t=1.
    pub fn beta(&self, t: f64) -> Result<f64, SdeError> {
        self.check_time(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// B(t) = ∫₀ᵗ β(s) ds in closed form.
    pub fn beta_integral(&self, t: f64) -> Result<f64, SdeError> {
        self.check_time(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    /// Perturbation-kernel coefficients at time `t`: the mean shrink factor
    /// `exp(−½B(t))` and the unit-λ variance `1 − exp(−B(t))`.
    pub fn kernel_coeffs(&self, t: f64) -> Result<(f64, f64), SdeError> {
        let b = self.beta_integral(t)?;
        Ok(((-0.5 * b).exp(), 1.0 - (-b).exp()))
    }
}

/// A mirrored Brownian increment in φ-coordinates.
#[derive(Debug, Clone)]
pub struct MirroredIncrement {
    pub delta: PhiVector,
    pub dt: f64,
}

/// Sample a mirrored increment: real white noise `N(0, dt·I)` in the time
/// domain, pushed through the forward DFT and the φ chart. Conjugate
/// symmetry — and hence the diagonal `Λ²·dt` chart covariance — holds by
/// construction.
pub fn mirrored_increment<R: Rng>(
    n: usize,
    m: usize,
    dt: f64,
    rng: &mut R,
) -> Result<MirroredIncrement, SdeError> {
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(SdeError::BadStep { t: f64::NAN, dt });
    }
    let sd = dt.sqrt();
    let mut w = TimeSeriesSample::zeros(n, m);
    for v in w.values.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = sd * g;
    }
    let xs = dft_forward(&w).expect("finite white noise");
    Ok(MirroredIncrement { delta: phi(&xs), dt })
}

/// Draw from the stationary prior `N(0, Λ²)` in φ-coordinates (the VP limit
/// distribution under mirrored noise). Per coordinate this is `λ_c·ξ`, which
/// equals the DFT image of time-domain white noise in law.
pub fn prior_sample<R: Rng>(n: usize, m: usize, rng: &mut R) -> PhiVector {
    let w = lambda_diag(n).phi_weights();
    let mut z = PhiVector::zeros(n, m);
    for f in 0..m {
        let coords = z.feature_mut(f);
        for (c, coord) in coords.iter_mut().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            *coord = w[c] * g;
        }
    }
    z
}

/// Diffuse clean data `x0` to time `t` and return the perturbed state along
/// with the conditional-score regression target
/// `−(x_t − mean)/(σ²(t)·λ_c²)` per coordinate.
pub fn forward_perturb<R: Rng>(
    x0: &PhiVector,
    t: f64,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(PhiVector, PhiVector), SdeError> {
    if t <= 0.0 {
        return Err(SdeError::ZeroVariance);
    }
    let (mean_c, var1) = sched.kernel_coeffs(t)?;
    if var1 <= 0.0 {
        return Err(SdeError::ZeroVariance);
    }
    let w = lambda_diag(x0.n).phi_weights();
    let mut xt = PhiVector::zeros(x0.n, x0.m);
    let mut target = PhiVector::zeros(x0.n, x0.m);
    for f in 0..x0.m {
        let x0f = x0.feature(f);
        let base = f * x0.n;
        for c in 0..x0.n {
            let var = var1 * w[c] * w[c];
            let mean = mean_c * x0f[c];
            let g: f64 = rng.sample(StandardNormal);
            let x = mean + var.sqrt() * g;
            xt.coords[base + c] = x;
            target.coords[base + c] = -(x - mean) / var;
        }
    }
    Ok((xt, target))
}

/// Analytic score of the point-mass kernel `p_t = N(m(t)·x0, σ²(t)·Λ²)`,
/// used as an exact stand-in for the network in sampler tests.
pub fn analytic_dirac_score(
    x0: &PhiVector,
    xt: &PhiVector,
    t: f64,
    sched: &DiffusionSchedule,
) -> Result<PhiVector, SdeError> {
    if t <= 0.0 {
        return Err(SdeError::ZeroVariance);
    }
    if x0.n != xt.n || x0.m != xt.m {
        return Err(SdeError::ShapeMismatch {
            state_n: xt.n,
            state_m: xt.m,
            score_n: x0.n,
            score_m: x0.m,
        });
    }
    let (mean_c, var1) = sched.kernel_coeffs(t)?;
    let w = lambda_diag(x0.n).phi_weights();
    let mut s = PhiVector::zeros(x0.n, x0.m);
    for f in 0..x0.m {
        let base = f * x0.n;
        for c in 0..x0.n {
            let var = var1 * w[c] * w[c];
            s.coords[base + c] = -(xt.coords[base + c] - mean_c * x0.coords[base + c]) / var;
        }
    }
    Ok(s)
}

/// One reverse Euler–Maruyama step from `t` to `t − dt` with an explicit
/// noise increment (the deterministic core; see [`reverse_step`]).
///
/// Update: `x ← x + [−½β(t)x − β(t)·λ_c²·score]·(−dt) + √β(t)·ξ_c`.
pub fn reverse_step_with_increment(
    xt: &PhiVector,
    t: f64,
    dt: f64,
    score: &PhiVector,
    sched: &DiffusionSchedule,
    incr: &MirroredIncrement,
) -> Result<PhiVector, SdeError> {
    if xt.n != score.n || xt.m != score.m {
        return Err(SdeError::ShapeMismatch {
            state_n: xt.n,
            state_m: xt.m,
            score_n: score.n,
            score_m: score.m,
        });
    }
    if !(dt > 0.0) || t - dt < -1e-12 {
        return Err(SdeError::BadStep { t, dt });
    }
    if incr.dt != dt || incr.delta.n != xt.n || incr.delta.m != xt.m {
        return Err(SdeError::BadStep { t, dt });
    }
    if let Some(index) = score.coords.iter().position(|v| !v.is_finite()) {
        return Err(SdeError::NonFiniteScore { index });
    }
    let beta = sched.beta(t)?;
    let sqrt_beta = beta.sqrt();
    let w = lambda_diag(xt.n).phi_weights();
    let mut out = PhiVector::zeros(xt.n, xt.m);
    for f in 0..xt.m {
        let base = f * xt.n;
        for c in 0..xt.n {
            let x = xt.coords[base + c];
            let s = score.coords[base + c];
            let drift = -0.5 * beta * x - beta * (w[c] * w[c]) * s;
            out.coords[base + c] = x + drift * (-dt) + sqrt_beta * incr.delta.coords[base + c];
        }
    }
    Ok(out)
}

/// One reverse Euler–Maruyama step, drawing a fresh mirrored increment of
/// size `dt` from `rng`.
pub fn reverse_step<R: Rng>(
    xt: &PhiVector,
    t: f64,
    dt: f64,
    score: &PhiVector,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<PhiVector, SdeError> {
    let incr = mirrored_increment(xt.n, xt.m, dt, rng)?;
    reverse_step_with_increment(xt, t, dt, score, sched, &incr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = DiffusionSchedule::default();
        assert!((s.beta(0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.beta(1.0).unwrap() - 20.0).abs() < 1e-15);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(s.beta(1.5).is_err());
        assert!(s.beta(-0.1).is_err());
    }

    #[test]
    fn beta_integral_closed_form_matches_quadrature() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.beta_integral(0.0).unwrap(), 0.0);
        assert!((s.beta_integral(1.0).unwrap() - 10.05).abs() < 1e-12);
        assert!(s.beta_integral(0.3).unwrap() < s.beta_integral(0.7).unwrap());

        // Simpson quadrature oracle for ∫₀ᵗ β.
        for &t in &[0.13, 0.5, 0.77, 1.0] {
            let k = 10_000usize;
            let h = t / k as f64;
            let mut acc = s.beta(0.0).unwrap() + s.beta(t).unwrap();
            for i in 1..k {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * s.beta(i as f64 * h).unwrap();
            }
            let quad = acc * h / 3.0;
            assert!(
                (quad - s.beta_integral(t).unwrap()).abs() < 1e-8,
                "quadrature mismatch at t={t}"
            );
        }
    }

    #[test]
    fn mean_coefficient_matches_euler_simulation() {
        let s = DiffusionSchedule::default();
        let (mean_c, _) = s.kernel_coeffs(1.0).unwrap();
        assert!((mean_c - (-5.025f64).exp()).abs() < 1e-15);
        assert!((mean_c - 6.55e-3).abs() < 2e-4, "≈ 6.55e-3, got {mean_c}");

        // Deterministic mean ODE dm/dt = −½β(t)m simulated with 10⁴ steps.
        let k = 10_000usize;
        let dt = 1.0 / k as f64;
        let mut m = 1.0f64;
        for i in 0..k {
            let t = i as f64 * dt;
            m -= 0.5 * s.beta(t).unwrap() * m * dt;
        }
        assert!(
            ((m - mean_c) / mean_c).abs() < 0.01,
            "Euler mean {m} vs closed form {mean_c}"
        );
    }

    #[test]
    fn zero_dt_increment_is_zero() {
        let mut rng = stream_rng(0, Stream::Noise);
        let incr = mirrored_increment(8, 2, 0.0, &mut rng).unwrap();
        assert!(incr.delta.coords.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_perturb_rejects_t_zero_and_limits_to_x0() {
        let sched = DiffusionSchedule::default();
        let x0 = PhiVector { coords: vec![1.0, -2.0, 0.5, 3.0], n: 4, m: 1 };
        let mut rng = stream_rng(1, Stream::Noise);
        assert!(matches!(forward_perturb(&x0, 0.0, &sched, &mut rng), Err(SdeError::ZeroVariance)));

        let t = 1e-6;
        let (xt, target) = forward_perturb(&x0, t, &sched, &mut rng).unwrap();
        let (_, var1) = sched.kernel_coeffs(t).unwrap();
        for c in 0..4 {
            assert!((xt.coords[c] - x0.coords[c]).abs() < 50.0 * var1.sqrt());
            assert!(target.coords[c].is_finite());
        }
    }

    #[test]
    fn reverse_step_pure_drift_and_affinity_in_score() {
        let sched = DiffusionSchedule::default();
        let n = 6;
        let xt = PhiVector { coords: vec![1.0, -1.0, 2.0, 0.5, -0.25, 3.0], n, m: 1 };
        let zero_score = PhiVector::zeros(n, 1);
        let zero_incr = MirroredIncrement { delta: PhiVector::zeros(n, 1), dt: 0.01 };
        let t = 0.5;
        let dt = 0.01;
        let out = reverse_step_with_increment(&xt, t, dt, &zero_score, &sched, &zero_incr).unwrap();
        let beta = sched.beta(t).unwrap();
        for c in 0..n {
            let expect = xt.coords[c] * (1.0 + 0.5 * beta * dt);
            assert!((out.coords[c] - expect).abs() < 1e-14, "pure drift at {c}");
        }

        // Affine in the score for a fixed increment: step(a·s) − step(0) = a·(step(s) − step(0)).
        let s1 = PhiVector { coords: vec![0.3, -0.7, 1.1, 0.0, 2.0, -0.4], n, m: 1 };
        let mut s2 = s1.clone();
        for v in s2.coords.iter_mut() {
            *v *= 2.5;
        }
        let base = reverse_step_with_increment(&xt, t, dt, &zero_score, &sched, &zero_incr).unwrap();
        let o1 = reverse_step_with_increment(&xt, t, dt, &s1, &sched, &zero_incr).unwrap();
        let o2 = reverse_step_with_increment(&xt, t, dt, &s2, &sched, &zero_incr).unwrap();
        for c in 0..n {
            let lin = base.coords[c] + 2.5 * (o1.coords[c] - base.coords[c]);
            assert!((o2.coords[c] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_rejects_non_finite_score() {
        let sched = DiffusionSchedule::default();
        let xt = PhiVector::zeros(4, 1);
        let mut score = PhiVector::zeros(4, 1);
        score.coords[2] = f64::INFINITY;
        let mut rng = stream_rng(2, Stream::Noise);
        assert!(matches!(
            reverse_step(&xt, 0.5, 0.01, &score, &sched, &mut rng),
            Err(SdeError::NonFiniteScore { index: 2 })
        ));
    }
}
