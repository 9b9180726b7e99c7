//! Unitary DFT machinery over real multivariate time series.
//!
//! A real signal of length `N` is fully described by the non-redundant
//! half-spectrum `κ = 0..⌊N/2⌋`; the remaining coefficients follow from the
//! mirror (conjugate) symmetry `x̃_κ = conj(x̃_{N−κ})`. All transforms use the
//! unitary `N^{−1/2}` normalization and are applied feature-wise.
//!
//! [`PhiVector`] is the real chart of the constrained complex half-spectrum:
//! per feature, the real parts of all tokens followed by the imaginary parts
//! of the interior tokens (DC and — for even `N` — Nyquist have none). Its
//! length is exactly `N` per feature, so the chart is a bijection.
//!
//! [`LambdaDiag`] carries the per-token weights {1 for DC/Nyquist, 1/√2
//! otherwise} that arise when splitting complex coordinates into real pairs;
//! white time-domain noise has diagonal covariance `Λ²` in φ-coordinates.

use rustfft::{num_complex::Complex, FftPlanner};
use std::cell::RefCell;
use thiserror::Error;

/// Errors from spectral operations.
#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("signal length must be >= 2 and feature count >= 1 (got n={n}, m={m})")]
    BadShape { n: usize, m: usize },
    #[error("symmetry violation: token {token} must have zero imaginary part (got {imag:e})")]
    SymmetryViolation { token: usize, imag: f64 },
    #[error("inverse transform left imaginary residual {max_abs:e} above tolerance {tol:e}")]
    ImaginaryResidual { max_abs: f64, tol: f64 },
    #[error("low-frequency cutoff {k} out of range (max {max})")]
    CutoffOutOfRange { k: usize, max: usize },
}

/// Number of non-redundant spectral tokens for a length-`n` real signal.
pub fn n_tokens(n: usize) -> usize {
    n / 2 + 1
}

/// Number of interior tokens (those with a free imaginary part).
pub fn n_interior(n: usize) -> usize {
    n - n_tokens(n)
}

/// A real multivariate time series: `n` time steps × `m` features,
/// row-major (`values[t * m + f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl TimeSeriesSample {
    pub fn new(values: Vec<f64>, n: usize, m: usize) -> Result<Self, SpectralError> {
        if n < 2 || m < 1 {
            return Err(SpectralError::BadShape { n, m });
        }
        if values.len() != n * m {
            return Err(SpectralError::DimensionMismatch {
                expected: n * m,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite { index });
        }
        Ok(Self { values, n, m })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self { values: vec![0.0; n * m], n, m }
    }

    /// Value at time step `t`, feature `f`.
    #[inline]
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.m + f]
    }

    /// Squared Frobenius norm over all entries.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// The non-redundant half-spectrum of a real signal: `⌊n/2⌋+1` complex
/// tokens per feature, token-major (`tokens[κ * m + f]`).
///
/// Invariants: the DC token (κ=0) and, for even `n`, the Nyquist token
/// (κ=n/2) have exactly zero imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpectrum {
    pub tokens: Vec<Complex<f64>>,
    /// Length `n` of the originating time-domain signal.
    pub n_original: usize,
    pub m: usize,
}

impl HalfSpectrum {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            tokens: vec![Complex::new(0.0, 0.0); n_tokens(n) * m],
            n_original: n,
            m,
        }
    }

    pub fn n_tokens(&self) -> usize {
        n_tokens(self.n_original)
    }

    /// True when `n_original` is even, i.e. a Nyquist token exists.
    pub fn has_nyquist(&self) -> bool {
        self.n_original % 2 == 0
    }

    #[inline]
    pub fn at(&self, token: usize, f: usize) -> Complex<f64> {
        self.tokens[token * self.m + f]
    }

    /// Check the structural zero-imaginary constraints on DC/Nyquist.
    pub fn validate_symmetry(&self) -> Result<(), SpectralError> {
        for f in 0..self.m {
            let dc = self.at(0, f);
            if dc.im != 0.0 {
                return Err(SpectralError::SymmetryViolation { token: 0, imag: dc.im });
            }
            if self.has_nyquist() {
                let ny = self.at(self.n_tokens() - 1, f);
                if ny.im != 0.0 {
                    return Err(SpectralError::SymmetryViolation {
                        token: self.n_tokens() - 1,
                        imag: ny.im,
                    });
                }
            }
        }
        Ok(())
    }

    /// Expand to the full length-`n` spectrum of feature `f` via mirror
    /// symmetry (`x̃_{n−κ} = conj(x̃_κ)`).
    pub fn mirror_expand(&self, f: usize) -> Vec<Complex<f64>> {
        let n = self.n_original;
        let mut full = vec![Complex::new(0.0, 0.0); n];
        full[0] = self.at(0, f);
        for k in 1..self.n_tokens() {
            full[k] = self.at(k, f);
            full[n - k] = self.at(k, f).conj();
        }
        full
    }
}

/// Real chart of a constrained half-spectrum. Feature-major
/// (`coords[f * n + c]`); per feature the layout is
/// `[Re x̃_0, …, Re x̃_{⌊n/2⌋}, Im x̃_1, …, Im x̃_{interior}]`, which has
/// length exactly `n` for both parities.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiVector {
    pub coords: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl PhiVector {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { coords: vec![0.0; n * m], n, m }
    }

    /// The `n` chart coordinates of feature `f`.
    #[inline]
    pub fn feature(&self, f: usize) -> &[f64] {
        &self.coords[f * self.n..(f + 1) * self.n]
    }

    #[inline]
    pub fn feature_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.coords[f * self.n..(f + 1) * self.n]
    }
}

/// Per-token scaling weights: 1 for DC and (even `n`) Nyquist, 1/√2 for
/// interior tokens. Broadcast across features.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaDiag {
    pub entries: Vec<f64>,
    pub n_original: usize,
}

impl LambdaDiag {
    /// Weight of the token owning φ chart coordinate `c` (per feature).
    /// Coordinates `c < ⌊n/2⌋+1` are real parts of token `c`; the rest are
    /// imaginary parts of token `c − ⌊n/2⌋` (interior tokens start at κ=1).
    pub fn phi_weights(&self) -> Vec<f64> {
        let n = self.n_original;
        let mut w = Vec::with_capacity(n);
        w.extend_from_slice(&self.entries);
        for k in 1..=n_interior(n) {
            w.push(self.entries[k]);
        }
        debug_assert_eq!(w.len(), n);
        w
    }
}

/// Build the Λ weights for signal length `n`.
pub fn lambda_diag(n: usize) -> LambdaDiag {
    let t = n_tokens(n);
    let inv_sqrt2 = 0.5f64.sqrt();
    let mut entries = vec![inv_sqrt2; t];
    entries[0] = 1.0;
    if n % 2 == 0 {
        entries[t - 1] = 1.0;
    }
    LambdaDiag { entries, n_original: n }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex<f64>], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        fft.process(buf);
    });
}

/// Forward unitary DFT, keeping only the non-redundant half-spectrum.
///
/// The DC (and, for even `n`, Nyquist) imaginary parts are forced to exactly
/// zero; for real input they are pure round-off to begin with.
pub fn dft_forward(x: &TimeSeriesSample) -> Result<HalfSpectrum, SpectralError> {
    if let Some(index) = x.values.iter().position(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite { index });
    }
    if x.n < 2 || x.m < 1 {
        return Err(SpectralError::BadShape { n: x.n, m: x.m });
    }
    let n = x.n;
    let t = n_tokens(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = HalfSpectrum::zeros(n, x.m);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..x.m {
        for tau in 0..n {
            buf[tau] = Complex::new(x.at(tau, f), 0.0);
        }
        fft_in_place(&mut buf, false);
        for k in 0..t {
            out.tokens[k * x.m + f] = buf[k] * scale;
        }
        out.tokens[f].im = 0.0;
        if n % 2 == 0 {
            out.tokens[(t - 1) * x.m + f].im = 0.0;
        }
    }
    Ok(out)
}

/// Inverse unitary DFT from a half-spectrum back to a real signal.
///
/// The full spectrum is reconstituted by mirror symmetry, so the result is
/// real by construction; any imaginary residual is round-off and is checked
/// against a magnitude-scaled tolerance before being discarded.
pub fn dft_inverse(xs: &HalfSpectrum) -> Result<TimeSeriesSample, SpectralError> {
    xs.validate_symmetry()?;
    let n = xs.n_original;
    if n < 2 || xs.m < 1 {
        return Err(SpectralError::BadShape { n, m: xs.m });
    }
    let expected = n_tokens(n) * xs.m;
    if xs.tokens.len() != expected {
        return Err(SpectralError::DimensionMismatch { expected, got: xs.tokens.len() });
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = TimeSeriesSample::zeros(n, xs.m);
    for f in 0..xs.m {
        let mut buf = xs.mirror_expand(f);
        fft_in_place(&mut buf, true);
        let max_abs = buf.iter().map(|c| c.re.abs().max(c.im.abs())).fold(0.0, f64::max);
        let max_im = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max) * scale;
        let tol = 1e-9 * (1.0f64).max(max_abs * scale);
        if max_im > tol {
            return Err(SpectralError::ImaginaryResidual { max_abs: max_im, tol });
        }
        for tau in 0..n {
            out.values[tau * xs.m + f] = buf[tau].re * scale;
        }
    }
    Ok(out)
}

/// Extract the unconstrained real coordinates of a half-spectrum.
pub fn phi(xs: &HalfSpectrum) -> PhiVector {
    let n = xs.n_original;
    let t = xs.n_tokens();
    let mut z = PhiVector::zeros(n, xs.m);
    for f in 0..xs.m {
        let coords = z.feature_mut(f);
        for k in 0..t {
            coords[k] = xs.at(k, f).re;
        }
        for k in 1..=n_interior(n) {
            coords[t - 1 + k] = xs.at(k, f).im;
        }
    }
    z
}

/// Rebuild the complex half-spectrum from its real chart coordinates.
/// DC/Nyquist imaginary parts are exactly zero by construction.
pub fn phi_inverse(z: &PhiVector) -> Result<HalfSpectrum, SpectralError> {
    let n = z.n;
    if n < 2 || z.m < 1 {
        return Err(SpectralError::BadShape { n, m: z.m });
    }
    if z.coords.len() != n * z.m {
        return Err(SpectralError::DimensionMismatch { expected: n * z.m, got: z.coords.len() });
    }
    let t = n_tokens(n);
    let mut xs = HalfSpectrum::zeros(n, z.m);
    for f in 0..z.m {
        let coords = z.feature(f);
        for k in 0..t {
            xs.tokens[k * z.m + f].re = coords[k];
        }
        for k in 1..=n_interior(n) {
            xs.tokens[k * z.m + f].im = coords[t - 1 + k];
        }
    }
    Ok(xs)
}

/// Per-token energy `E_κ = Σ_f |x̃_{κ,f}|²`.
pub fn spectral_energy(xs: &HalfSpectrum) -> Vec<f64> {
    let t = xs.n_tokens();
    let mut e = vec![0.0; t];
    for k in 0..t {
        for f in 0..xs.m {
            e[k] += xs.at(k, f).norm_sqr();
        }
    }
    e
}

/// Fraction of half-spectrum energy held by tokens `0..=k`. Returns 1.0 for
/// an all-zero spectrum (degenerate-input convention).
pub fn low_frequency_energy_fraction(xs: &HalfSpectrum, k: usize) -> Result<f64, SpectralError> {
    let t = xs.n_tokens();
    if k >= t {
        return Err(SpectralError::CutoffOutOfRange { k, max: t - 1 });
    }
    let e = spectral_energy(xs);
    let total: f64 = e.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let low: f64 = e[..=k].iter().sum();
    Ok(low / total)
}
