//! Transformer score network over half-spectrum tokens.
//!
//! Architecture (pre-norm): token κ is the 2M-vector `[Re x̃_κ | Im x̃_κ]`.
//! `h⁰ = W_in·token + b_in + pos_embed[κ] + time_embed(t)` (time embedding
//! broadcast over tokens), then per layer `h += Attn(LN₁(h))` and
//! `h += MLP(LN₂(h))` with exact-erf GELU and hidden ratio 4. The cumulative
//! residual feature (CRF) of a token is its final hidden row — the embedding
//! plus every residual branch output. The score is `W_out·LN_f(h) + b_out`
//! per token, with the imaginary slots of DC (and Nyquist for even N) masked
//! to zero so the output always maps to a valid real chart.
//!
//! Two forward paths share one row-computation routine:
//! [`forward_full`] recomputes every row, and [`forward_cached`] recomputes
//! only a chosen row subset while serving the remaining rows' K/V (and their
//! score/CRF output) from a [`CacheState`]. With the full row set the two
//! paths execute identical arithmetic and agree bit-for-bit.

use crate::cache::{CacheError, CacheState, RecomputeSet, StepStats};
use crate::spectral::{n_interior, n_tokens, HalfSpectrum, PhiVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::ops::Range;
use thiserror::Error;

/// Errors from network construction and evaluation.
#[derive(Debug, Error)]
pub enum ScoreNetError {
    #[error("d_model {d_model} not divisible by n_heads {n_heads}")]
    BadHeads { d_model: usize, n_heads: usize },
    #[error("configuration field {field} must be positive")]
    ZeroField { field: &'static str },
    #[error("input shape ({n}×{m}) does not match configured ({cfg_n}×{cfg_m})")]
    ShapeMismatch { n: usize, m: usize, cfg_n: usize, cfg_m: usize },
    #[error("cache error: {0}")]
    Cache(#[from] CacheError),
}

/// Network hyperparameters. The token grid is fixed by the signal shape
/// (`n_tokens = ⌊n/2⌋+1` tokens of dimension `2m`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreNetConfig {
    /// Time-domain signal length.
    pub n: usize,
    /// Feature count.
    pub m: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Random Fourier feature count for the diffusion-time embedding.
    pub rff_dim: usize,
    /// Cached-token semantics switch. `false` (default): cached rows skip
    /// Q/attention/MLP entirely and are served from cache. `true`: every row
    /// recomputes its full hidden path each step and only the K/V projections
    /// of non-recomputed tokens are served stale from cache.
    #[serde(default)]
    pub q_for_all: bool,
}

impl ScoreNetConfig {
    /// Small configuration suitable for tests and desk-scale runs.
    pub fn desk(n: usize, m: usize) -> Self {
        Self { n, m, n_layers: 4, d_model: 32, n_heads: 4, rff_dim: 16, q_for_all: false }
    }

    pub fn n_tokens(&self) -> usize {
        n_tokens(self.n)
    }

    pub fn token_dim(&self) -> usize {
        2 * self.m
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ScoreNetError> {
        for (field, v) in [
            ("n", self.n),
            ("m", self.m),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("rff_dim", self.rff_dim),
        ] {
            if v == 0 {
                return Err(ScoreNetError::ZeroField { field });
            }
        }
        if self.n < 2 {
            return Err(ScoreNetError::ZeroField { field: "n (must be >= 2)" });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ScoreNetError::BadHeads { d_model: self.d_model, n_heads: self.n_heads });
        }
        Ok(())
    }
}

/// Ranges of one transformer layer's tensors inside the flat buffer.
#[derive(Debug, Clone)]
pub struct LayerRanges {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every trainable tensor inside the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub pos: Range<usize>,
    pub time_w: Range<usize>,
    pub time_b: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ScoreNetConfig) -> Self {
        let d = cfg.d_model;
        let td = cfg.token_dim();
        let t = cfg.n_tokens();
        let mut off = 0usize;
        let mut take = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let w_in = take(d * td);
        let b_in = take(d);
        let pos = take(t * d);
        let time_w = take(d * 2 * cfg.rff_dim);
        let time_b = take(d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerRanges {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(4 * d * d),
                b1: take(4 * d),
                w2: take(d * 4 * d),
                b2: take(d),
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(td * d);
        let b_out = take(td);
        Self { w_in, b_in, pos, time_w, time_b, layers, lnf_g, lnf_b, w_out, b_out, total: off }
    }
}

/// All network parameters: a flat trainable buffer plus the fixed random
/// Fourier frequencies of the time embedding (not trained).
#[derive(Debug, Clone)]
pub struct ScoreNetParams {
    pub cfg: ScoreNetConfig,
    pub layout: ParamLayout,
    /// Trainable tensors, flattened in layout order.
    pub data: Vec<f64>,
    /// Fixed time-embedding frequencies, length `rff_dim`.
    pub rff_freqs: Vec<f64>,
}

/// Scale of the fixed random time-embedding frequencies. Diffusion time spans
/// a single unit interval, so ~one period across it conditions smoothly; much
/// larger scales make every hidden row oscillate with `t` between adjacent
/// solver steps, which drowns the state-driven signal the cache policy keys on.
const RFF_FREQ_SCALE: f64 = 1.0;
/// Positional-embedding init scale.
const POS_INIT_STD: f64 = 0.02;
/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

impl ScoreNetParams {
    /// Initialize parameters: 1/√fan_in Gaussians for projections, 0.02
    /// Gaussians for positional embeddings, unit/zero LayerNorm affine, and
    /// an all-zero output projection (fresh networks emit a zero score).
    pub fn init<R: Rng>(cfg: ScoreNetConfig, rng: &mut R) -> Result<Self, ScoreNetError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut data = vec![0.0; layout.total];
        let d = cfg.d_model;

        let fill = |range: &Range<usize>, std: f64, data: &mut Vec<f64>, rng: &mut R| {
            for v in &mut data[range.clone()] {
                let g: f64 = rng.sample(StandardNormal);
                *v = std * g;
            }
        };
        let fan = |k: usize| 1.0 / (k as f64).sqrt();

        fill(&layout.w_in, fan(cfg.token_dim()), &mut data, rng);
        fill(&layout.pos, POS_INIT_STD, &mut data, rng);
        fill(&layout.time_w, fan(2 * cfg.rff_dim), &mut data, rng);
        for l in 0..cfg.n_layers {
            let lr = layout.layers[l].clone();
            data[lr.ln1_g.clone()].fill(1.0);
            data[lr.ln2_g.clone()].fill(1.0);
            fill(&lr.wq, fan(d), &mut data, rng);
            fill(&lr.wk, fan(d), &mut data, rng);
            fill(&lr.wv, fan(d), &mut data, rng);
            fill(&lr.wo, fan(d), &mut data, rng);
            fill(&lr.w1, fan(d), &mut data, rng);
            fill(&lr.w2, fan(4 * d), &mut data, rng);
        }
        data[layout.lnf_g.clone()].fill(1.0);
        // Output projection stays zero.

        let mut rff_freqs = Vec::with_capacity(cfg.rff_dim);
        for _ in 0..cfg.rff_dim {
            let g: f64 = rng.sample(StandardNormal);
            rff_freqs.push(RFF_FREQ_SCALE * g);
        }
        Ok(Self { cfg, layout, data, rff_freqs })
    }

    #[inline]
    pub fn t(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Number of trainable parameters.
    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Replace the zero-initialized output projection with small Gaussians.
    /// Useful for tests that need a non-degenerate untrained score.
    pub fn randomize_output_projection<R: Rng>(&mut self, std: f64, rng: &mut R) {
        let r = self.layout.w_out.clone();
        for v in &mut self.data[r] {
            let g: f64 = rng.sample(StandardNormal);
            *v = std * g;
        }
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Per-token score rows, token-major `(n_tokens × 2m)`, masked so DC and
    /// Nyquist imaginary slots are exactly zero.
    pub score_tokens: Vec<f64>,
    /// Per-token final hidden rows `(n_tokens × d_model)` — the CRF.
    pub crf_final: Vec<f64>,
}

/// Per-branch residual outputs captured by the instrumented forward pass
/// (testing aid for the CRF identity).
#[derive(Debug, Clone)]
pub struct ResidualTrace {
    /// `h⁰` rows `(n_tokens × d_model)`.
    pub h0: Vec<f64>,
    /// For each layer the attention branch output, then the MLP branch
    /// output, each `(n_tokens × d_model)`, in residual-stream order.
    pub branches: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Shared numeric primitives. Accumulation order is fixed (plain sequential
// loops) so that any two paths composing them produce identical bits.
// ---------------------------------------------------------------------------

/// `out = W·x (+ bias)` with row-major `W (rows × cols)`.
#[inline]
pub(crate) fn matvec(
    w: &[f64],
    x: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = match bias {
            Some(b) => b[r],
            None => 0.0,
        };
        for c in 0..cols {
            acc += wr[c] * x[c];
        }
        out[r] = acc;
    }
}

/// LayerNorm over one row; returns (mean, reciprocal std) for backprop.
#[inline]
pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let d = x.len();
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= d as f64;
    let mut var = 0.0;
    for v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d as f64;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

/// Exact GELU `0.5·x·(1 + erf(x/√2))`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of the exact GELU.
#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax in place.
#[inline]
pub(crate) fn softmax_inplace(x: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for v in x.iter() {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Attention for a single query row over the full key/value set, all heads.
/// `probs_out`, when given, receives the `(n_heads × n_tokens)` softmax rows.
#[inline]
pub(crate) fn attention_row(
    q_row: &[f64],
    keys: &[f64],
    vals: &[f64],
    n_tok: usize,
    n_heads: usize,
    head_dim: usize,
    score_scratch: &mut [f64],
    ctx_out: &mut [f64],
    mut probs_out: Option<&mut [f64]>,
) {
    let d = n_heads * head_dim;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for h in 0..n_heads {
        let qh = &q_row[h * head_dim..(h + 1) * head_dim];
        let scores = &mut score_scratch[..n_tok];
        for j in 0..n_tok {
            let kh = &keys[j * d + h * head_dim..j * d + (h + 1) * head_dim];
            let mut acc = 0.0;
            for e in 0..head_dim {
                acc += qh[e] * kh[e];
            }
            scores[j] = acc * inv_sqrt;
        }
        softmax_inplace(scores);
        if let Some(p) = probs_out.as_deref_mut() {
            p[h * n_tok..(h + 1) * n_tok].copy_from_slice(scores);
        }
        let ch = &mut ctx_out[h * head_dim..(h + 1) * head_dim];
        ch.fill(0.0);
        for j in 0..n_tok {
            let vh = &vals[j * d + h * head_dim..j * d + (h + 1) * head_dim];
            let pj = scores[j];
            for e in 0..head_dim {
                ch[e] += pj * vh[e];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenization and embeddings
// ---------------------------------------------------------------------------

/// Token matrix `(n_tokens × 2m)`: token κ is `[Re x̃_κ (m) | Im x̃_κ (m)]`.
pub fn tokenize(xs: &HalfSpectrum) -> Vec<f64> {
    let t = xs.n_tokens();
    let m = xs.m;
    let mut out = vec![0.0; t * 2 * m];
    for k in 0..t {
        for f in 0..m {
            let c = xs.at(k, f);
            out[k * 2 * m + f] = c.re;
            out[k * 2 * m + m + f] = c.im;
        }
    }
    out
}

/// Random-Fourier time features `[cos(2π f_r t) | sin(2π f_r t)]`.
pub(crate) fn time_features(rff: &[f64], t: f64) -> Vec<f64> {
    let r = rff.len();
    let mut feat = vec![0.0; 2 * r];
    for (i, f) in rff.iter().enumerate() {
        let a = 2.0 * std::f64::consts::PI * f * t;
        feat[i] = a.cos();
        feat[r + i] = a.sin();
    }
    feat
}

/// Diffusion-time embedding: learnable dense map over fixed random Fourier
/// features of `t`.
pub fn time_embed(params: &ScoreNetParams, t: f64) -> Vec<f64> {
    let cfg = &params.cfg;
    let feat = time_features(&params.rff_freqs, t);
    let mut out = vec![0.0; cfg.d_model];
    matvec(
        params.t(&params.layout.time_w),
        &feat,
        Some(params.t(&params.layout.time_b)),
        &mut out,
        cfg.d_model,
        2 * cfg.rff_dim,
    );
    out
}

/// Map per-token score rows to the real chart: chart coordinate `c < n_tokens`
/// of feature `f` is the real slot of token `c`; the remaining coordinates
/// are the interior imaginary slots.
pub fn score_tokens_to_phi(score_tokens: &[f64], n: usize, m: usize) -> PhiVector {
    let t = n_tokens(n);
    let mut z = PhiVector::zeros(n, m);
    for f in 0..m {
        let coords = z.feature_mut(f);
        for k in 0..t {
            coords[k] = score_tokens[k * 2 * m + f];
        }
        for k in 1..=n_interior(n) {
            coords[t - 1 + k] = score_tokens[k * 2 * m + m + f];
        }
    }
    z
}

/// Zero the structurally-constrained score slots: the imaginary halves of
/// the DC token and (even `n`) the Nyquist token.
pub(crate) fn mask_constrained_slots(score_tokens: &mut [f64], n: usize, m: usize) {
    let t = n_tokens(n);
    for f in 0..m {
        score_tokens[m + f] = 0.0;
        if n % 2 == 0 {
            score_tokens[(t - 1) * 2 * m + m + f] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Scratch buffers reused across steps by one chain
// ---------------------------------------------------------------------------

/// Preallocated working memory for inference forward passes.
#[derive(Debug, Clone)]
pub struct ForwardScratch {
    h: Vec<f64>,
    u: Vec<f64>,
    q: Vec<f64>,
    scores: Vec<f64>,
    ctx: Vec<f64>,
    attn: Vec<f64>,
    mlp_hidden: Vec<f64>,
    row_out: Vec<f64>,
    full_k: Vec<f64>,
    full_v: Vec<f64>,
}

impl ForwardScratch {
    pub fn new(cfg: &ScoreNetConfig) -> Self {
        let t = cfg.n_tokens();
        let d = cfg.d_model;
        Self {
            h: vec![0.0; t * d],
            u: vec![0.0; t * d],
            q: vec![0.0; t * d],
            scores: vec![0.0; t],
            ctx: vec![0.0; d],
            attn: vec![0.0; d],
            mlp_hidden: vec![0.0; 4 * d],
            row_out: vec![0.0; d],
            full_k: vec![0.0; cfg.n_layers * t * d],
            full_v: vec![0.0; cfg.n_layers * t * d],
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn check_shape(cfg: &ScoreNetConfig, xs: &HalfSpectrum) -> Result<(), ScoreNetError> {
    if xs.n_original != cfg.n || xs.m != cfg.m {
        return Err(ScoreNetError::ShapeMismatch {
            n: xs.n_original,
            m: xs.m,
            cfg_n: cfg.n,
            cfg_m: cfg.m,
        });
    }
    Ok(())
}

/// Row-level forward pass. `hidden_rows[k]` selects tokens whose hidden path
/// (embedding, LN, Q, attention, MLP) is computed; `kv_rows[k]` selects
/// tokens whose fresh K/V overwrite the layer buffers (`kv_rows ⊆
/// hidden_rows`). Rows outside `kv_rows` keep whatever K/V the buffers
/// already hold, which is how stale cache content enters the attention of
/// recomputed rows. Results land in `scratch.h`.
fn forward_rows(
    params: &ScoreNetParams,
    tokens: &[f64],
    t: f64,
    hidden_rows: &[bool],
    kv_rows: &[bool],
    kv_k: &mut [f64],
    kv_v: &mut [f64],
    scratch: &mut ForwardScratch,
    mut trace: Option<&mut ResidualTrace>,
) {
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let lay = &params.layout;
    let temb = time_embed(params, t);

    // Embed the computed rows.
    for k in 0..n_tok {
        if !hidden_rows[k] {
            continue;
        }
        let h = &mut scratch.h[k * d..(k + 1) * d];
        matvec(params.t(&lay.w_in), &tokens[k * td..(k + 1) * td], Some(params.t(&lay.b_in)), h, d, td);
        let pos = &params.t(&lay.pos)[k * d..(k + 1) * d];
        for i in 0..d {
            h[i] += pos[i] + temb[i];
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.h0 = scratch.h.clone();
        tr.branches.clear();
    }

    for l in 0..cfg.n_layers {
        let lr = &lay.layers[l];
        let k_layer = &mut kv_k[l * n_tok * d..(l + 1) * n_tok * d];
        let v_layer = &mut kv_v[l * n_tok * d..(l + 1) * n_tok * d];

        // Phase A: normalized input and fresh Q for computed rows; fresh K/V
        // only for `kv_rows`.
        for k in 0..n_tok {
            if !hidden_rows[k] {
                continue;
            }
            let h = &scratch.h[k * d..(k + 1) * d];
            let u = &mut scratch.u[k * d..(k + 1) * d];
            layer_norm_row(h, params.t(&lr.ln1_g), params.t(&lr.ln1_b), u);
            matvec(params.t(&lr.wq), u, Some(params.t(&lr.bq)), &mut scratch.q[k * d..(k + 1) * d], d, d);
            if kv_rows[k] {
                matvec(params.t(&lr.wk), u, Some(params.t(&lr.bk)), &mut k_layer[k * d..(k + 1) * d], d, d);
                matvec(params.t(&lr.wv), u, Some(params.t(&lr.bv)), &mut v_layer[k * d..(k + 1) * d], d, d);
            }
        }

        // Phase B: attention rows + output projection + residual add.
        let mut attn_branch = if trace.is_some() { Some(vec![0.0; n_tok * d]) } else { None };
        for k in 0..n_tok {
            if !hidden_rows[k] {
                continue;
            }
            attention_row(
                &scratch.q[k * d..(k + 1) * d],
                k_layer,
                v_layer,
                n_tok,
                heads,
                hd,
                &mut scratch.scores,
                &mut scratch.ctx,
                None,
            );
            matvec(params.t(&lr.wo), &scratch.ctx, Some(params.t(&lr.bo)), &mut scratch.attn, d, d);
            let h = &mut scratch.h[k * d..(k + 1) * d];
            for i in 0..d {
                h[i] += scratch.attn[i];
            }
            if let Some(b) = attn_branch.as_deref_mut() {
                b[k * d..(k + 1) * d].copy_from_slice(&scratch.attn);
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.branches.push(attn_branch.take().unwrap());
        }

        // Phase C: MLP + residual add.
        let mut mlp_branch = if trace.is_some() { Some(vec![0.0; n_tok * d]) } else { None };
        for k in 0..n_tok {
            if !hidden_rows[k] {
                continue;
            }
            let h = &mut scratch.h[k * d..(k + 1) * d];
            layer_norm_row(h, params.t(&lr.ln2_g), params.t(&lr.ln2_b), &mut scratch.row_out);
            matvec(params.t(&lr.w1), &scratch.row_out, Some(params.t(&lr.b1)), &mut scratch.mlp_hidden, 4 * d, d);
            for v in scratch.mlp_hidden.iter_mut() {
                *v = gelu(*v);
            }
            matvec(params.t(&lr.w2), &scratch.mlp_hidden, Some(params.t(&lr.b2)), &mut scratch.attn, d, 4 * d);
            for i in 0..d {
                h[i] += scratch.attn[i];
            }
            if let Some(b) = mlp_branch.as_deref_mut() {
                b[k * d..(k + 1) * d].copy_from_slice(&scratch.attn);
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.branches.push(mlp_branch.take().unwrap());
        }
    }
}

/// Project final hidden rows of the selected tokens to masked score rows.
fn project_rows(
    params: &ScoreNetParams,
    rows: &[bool],
    scratch: &mut ForwardScratch,
    score_tokens: &mut [f64],
) {
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    let lay = &params.layout;
    for k in 0..n_tok {
        if !rows[k] {
            continue;
        }
        let h = &scratch.h[k * d..(k + 1) * d];
        layer_norm_row(h, params.t(&lay.lnf_g), params.t(&lay.lnf_b), &mut scratch.row_out);
        matvec(
            params.t(&lay.w_out),
            &scratch.row_out,
            Some(params.t(&lay.b_out)),
            &mut score_tokens[k * td..(k + 1) * td],
            td,
            d,
        );
    }
    mask_constrained_slots(score_tokens, cfg.n, cfg.m);
}

/// Full recomputation of every token row.
pub fn forward_full(
    params: &ScoreNetParams,
    xs: &HalfSpectrum,
    t: f64,
) -> Result<ForwardResult, ScoreNetError> {
    let mut scratch = ForwardScratch::new(&params.cfg);
    forward_full_with_scratch(params, xs, t, &mut scratch)
}

/// [`forward_full`] with caller-provided scratch (hot loops).
pub fn forward_full_with_scratch(
    params: &ScoreNetParams,
    xs: &HalfSpectrum,
    t: f64,
    scratch: &mut ForwardScratch,
) -> Result<ForwardResult, ScoreNetError> {
    check_shape(&params.cfg, xs)?;
    let cfg = &params.cfg;
    let (n_tok, td) = (cfg.n_tokens(), cfg.token_dim());
    let tokens = tokenize(xs);
    let rows = vec![true; n_tok];
    let mut full_k = std::mem::take(&mut scratch.full_k);
    let mut full_v = std::mem::take(&mut scratch.full_v);
    forward_rows(params, &tokens, t, &rows, &rows, &mut full_k, &mut full_v, scratch, None);
    scratch.full_k = full_k;
    scratch.full_v = full_v;
    let mut score_tokens = vec![0.0; n_tok * td];
    project_rows(params, &rows, scratch, &mut score_tokens);
    Ok(ForwardResult { score_tokens, crf_final: scratch.h.clone() })
}

/// Instrumented full forward returning per-branch residual outputs, used to
/// assert the CRF identity (final hidden state = embedding + Σ branches).
pub fn forward_full_instrumented(
    params: &ScoreNetParams,
    xs: &HalfSpectrum,
    t: f64,
) -> Result<(ForwardResult, ResidualTrace), ScoreNetError> {
    check_shape(&params.cfg, xs)?;
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    let tokens = tokenize(xs);
    let rows = vec![true; n_tok];
    let mut scratch = ForwardScratch::new(cfg);
    let mut kv_k = vec![0.0; cfg.n_layers * n_tok * d];
    let mut kv_v = vec![0.0; cfg.n_layers * n_tok * d];
    let mut trace = ResidualTrace { h0: Vec::new(), branches: Vec::new() };
    forward_rows(params, &tokens, t, &rows, &rows, &mut kv_k, &mut kv_v, &mut scratch, Some(&mut trace));
    let mut score_tokens = vec![0.0; n_tok * td];
    project_rows(params, &rows, &mut scratch, &mut score_tokens);
    Ok((ForwardResult { score_tokens, crf_final: scratch.h.clone() }, trace))
}

/// Output of a cache-assisted forward pass.
#[derive(Debug, Clone)]
pub struct CachedForward {
    pub result: ForwardResult,
    pub stats: StepStats,
}

/// Cache-assisted forward pass.
///
/// Tokens in `set` recompute their full hidden path; their fresh K/V
/// overwrite the cache in-loop, so recomputed rows attend over a mixture of
/// fresh and stale K/V. Tokens outside `set` are served from cache: their
/// K/V stay stale and their score/CRF rows come from the stored output. With
/// `q_for_all` every hidden path is recomputed and only K/V reuse remains.
///
/// Cache slot handling: rows refreshed for `LowFreq`/`HighChange` reasons
/// overwrite their score/CRF slots and reset both ages; `Probe` rows leave
/// the score/CRF slots to the error-feedback pass (only K/V and the K/V age
/// reset here). The returned result carries fresh rows for every token in
/// `set` and cached rows for the rest.
pub fn forward_cached(
    params: &ScoreNetParams,
    xs: &HalfSpectrum,
    t: f64,
    cache: &mut CacheState,
    set: &RecomputeSet,
    scratch: &mut ForwardScratch,
) -> Result<CachedForward, ScoreNetError> {
    check_shape(&params.cfg, xs)?;
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    cache.check_compatible(cfg.n_layers, n_tok, d, td)?;
    set.check_bounds(n_tok)?;
    if !cache.all_tokens_valid() && set.indices.len() != n_tok {
        return Err(ScoreNetError::Cache(CacheError::ColdPartialRecompute));
    }

    let tokens = tokenize(xs);
    let mut in_set = vec![false; n_tok];
    for &k in &set.indices {
        in_set[k] = true;
    }
    let hidden_rows = if cfg.q_for_all { vec![true; n_tok] } else { in_set.clone() };

    let mut kv_k = std::mem::take(cache.kv_k_mut());
    let mut kv_v = std::mem::take(cache.kv_v_mut());
    forward_rows(params, &tokens, t, &hidden_rows, &in_set, &mut kv_k, &mut kv_v, scratch, None);
    *cache.kv_k_mut() = kv_k;
    *cache.kv_v_mut() = kv_v;

    let mut score_tokens = vec![0.0; n_tok * td];
    project_rows(params, &hidden_rows, scratch, &mut score_tokens);

    // Merge cached rows into the output (row-skipping mode only; with
    // q_for_all every row was just computed).
    let mut crf_final = vec![0.0; n_tok * d];
    for k in 0..n_tok {
        if hidden_rows[k] {
            crf_final[k * d..(k + 1) * d].copy_from_slice(&scratch.h[k * d..(k + 1) * d]);
        } else {
            score_tokens[k * td..(k + 1) * td].copy_from_slice(cache.score_row(k));
            crf_final[k * d..(k + 1) * d].copy_from_slice(cache.crf_row(k));
        }
    }
    let reasons = set.reason_by_token(n_tok);
    cache.commit_step(&in_set, &reasons, &score_tokens, &crf_final, cfg.q_for_all);

    let fresh = set.indices.len();
    let stats = StepStats {
        n_tokens: n_tok,
        recomputed: fresh,
        cached: n_tok - fresh,
        kv_rows_computed: fresh * cfg.n_layers,
        kv_rows_reused: (n_tok - fresh) * cfg.n_layers,
        hidden_rows_computed: hidden_rows.iter().filter(|r| **r).count() * cfg.n_layers,
    };
    Ok(CachedForward { result: ForwardResult { score_tokens, crf_final }, stats })
}
