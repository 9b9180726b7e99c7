//! Denoising score matching in chart coordinates.
//!
//! The objective is plain: draw `t ~ U[t_min, 1]` per batch element, perturb
//! the clean chart vector through the closed-form kernel, and regress the
//! network score onto the conditional score `−(x_t − m·x₀)/(σ²λ²)`. Gradients
//! are computed by a hand-rolled reverse pass over the exact forward
//! computation (taped activations, no autodiff), verified against central
//! finite differences. Optimization is AdamW with linear warmup followed by
//! cosine decay, checkpoint selection by lowest validation loss on a frozen
//! set of validation draws.
//!
//! [`paired_loss_values`] evaluates the same regression residual two ways —
//! entirely in chart coordinates with λ² weights, and entirely in the time
//! domain through inverse transforms — which agree to floating-point
//! accuracy; this is the testable form of the domain-equivalence claim.

use crate::scorenet::{
    attention_row, gelu, gelu_grad, layer_norm_row, mask_constrained_slots, matvec,
    time_features, ScoreNetError, ScoreNetParams,
};
use crate::sde::{DiffusionSchedule, SdeError};
use crate::spectral::{
    dft_forward, dft_inverse, lambda_diag, phi, phi_inverse, PhiVector, SpectralError,
    TimeSeriesSample,
};
use rand::Rng;
use std::ops::Range;
use thiserror::Error;

/// Errors from training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset shapes disagree: sample {index} is {n}×{m}, expected {expected_n}×{expected_m}")]
    ShapeMismatch { index: usize, n: usize, m: usize, expected_n: usize, expected_m: usize },
    #[error("training configuration invalid: {reason}")]
    BadConfig { reason: String },
    #[error("non-finite {what} encountered")]
    NonFinite { what: &'static str },
    #[error(transparent)]
    Net(#[from] ScoreNetError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Optimizer/schedule settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup.
    pub lr_max: f64,
    /// Linear warmup length in epochs.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    /// Lower bound of the diffusion-time draw (variance-zero guard).
    pub t_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr_max: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.01,
            seed: 0,
            val_fraction: 0.1,
            t_min: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: &str| Err(TrainError::BadConfig { reason: reason.to_string() });
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_max > 0.0) {
            return bad("lr_max must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad("t_min must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate at epoch `e`: linear warmup to `lr_max` over
/// `warmup_epochs`, then cosine decay toward zero over the remainder.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr_max * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let span = (cfg.epochs - cfg.warmup_epochs).max(1);
    let progress = (epoch - cfg.warmup_epochs) as f64 / span as f64;
    cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-feature z-score statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose raw standard deviation fell below the floor (constant
    /// features); their `std` entry was clamped to the floor.
    pub floored: Vec<usize>,
}

/// Smallest allowed per-feature standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature mean/std over all samples and time steps.
pub fn standardization_stats(samples: &[TimeSeriesSample]) -> Result<StandardizationStats, TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    let m = first.m;
    let mut mean = vec![0.0; m];
    let mut count = 0usize;
    for s in samples {
        for t in 0..s.n {
            for f in 0..m {
                mean[f] += s.at(t, f);
            }
        }
        count += s.n;
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut var = vec![0.0; m];
    for s in samples {
        for t in 0..s.n {
            for f in 0..m {
                let c = s.at(t, f) - mean[f];
                var[f] += c * c;
            }
        }
    }
    let mut std = vec![0.0; m];
    let mut floored = Vec::new();
    for f in 0..m {
        let raw = (var[f] / count as f64).sqrt();
        if raw < STD_FLOOR {
            std[f] = STD_FLOOR;
            floored.push(f);
        } else {
            std[f] = raw;
        }
    }
    Ok(StandardizationStats { mean, std, floored })
}

/// Apply `x ↦ (x − mean)/std` per feature.
pub fn standardize(samples: &[TimeSeriesSample], stats: &StandardizationStats) -> Vec<TimeSeriesSample> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for t in 0..s.n {
                for f in 0..s.m {
                    out.values[t * s.m + f] = (s.at(t, f) - stats.mean[f]) / stats.std[f];
                }
            }
            out
        })
        .collect()
}

/// Invert [`standardize`] exactly: `x ↦ x·std + mean`.
pub fn destandardize(samples: &[TimeSeriesSample], stats: &StandardizationStats) -> Vec<TimeSeriesSample> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for t in 0..s.n {
                for f in 0..s.m {
                    out.values[t * s.m + f] = s.at(t, f) * stats.std[f] + stats.mean[f];
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

/// One drawn training batch in token layout: for each element the perturbed
/// input rows, the regression-target rows (constrained slots zero), and the
/// diffusion time.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub xt_tokens: Vec<Vec<f64>>,
    pub tgt_tokens: Vec<Vec<f64>>,
    pub ts: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

/// Chart layout → token rows (`n_tokens × 2m`): coordinate `k < n_tokens` of
/// feature `f` fills the real slot of token `k`; interior coordinates fill
/// the imaginary slots; DC/Nyquist imaginary slots stay zero.
pub fn phi_to_token_rows(z: &PhiVector) -> Vec<f64> {
    let (n, m) = (z.n, z.m);
    let t = crate::spectral::n_tokens(n);
    let interior = crate::spectral::n_interior(n);
    let mut out = vec![0.0; t * 2 * m];
    for f in 0..m {
        let coords = z.feature(f);
        for k in 0..t {
            out[k * 2 * m + f] = coords[k];
        }
        for k in 1..=interior {
            out[k * 2 * m + m + f] = coords[t - 1 + k];
        }
    }
    out
}

/// Draw times and kernel perturbations for a batch of clean chart vectors.
pub fn draw_batch<R: Rng>(
    batch_phi: &[PhiVector],
    sched: &DiffusionSchedule,
    t_min: f64,
    rng: &mut R,
) -> Result<DsmBatch, TrainError> {
    let first = batch_phi.first().ok_or(TrainError::EmptyDataset)?;
    let (n, m) = (first.n, first.m);
    let mut xt_tokens = Vec::with_capacity(batch_phi.len());
    let mut tgt_tokens = Vec::with_capacity(batch_phi.len());
    let mut ts = Vec::with_capacity(batch_phi.len());
    for z0 in batch_phi {
        let t = rng.gen_range(t_min..=1.0);
        let (xt, tgt) = crate::sde::forward_perturb(z0, t, sched, rng)?;
        xt_tokens.push(phi_to_token_rows(&xt));
        tgt_tokens.push(phi_to_token_rows(&tgt));
        ts.push(t);
    }
    Ok(DsmBatch { xt_tokens, tgt_tokens, ts, n, m })
}

// ---------------------------------------------------------------------------
// Taped forward and reverse-mode backward
// ---------------------------------------------------------------------------

struct LayerTape {
    /// Residual stream entering the attention block, `T×d`.
    h_in: Vec<f64>,
    ln1_stats: Vec<(f64, f64)>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax rows, layout `[row k][head h][key j]`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    /// Residual stream entering the MLP block, `T×d`.
    h_mid: Vec<f64>,
    ln2_stats: Vec<(f64, f64)>,
    /// Pre-GELU hidden, `T×4d`.
    mlp_pre: Vec<f64>,
    /// Post-GELU hidden, `T×4d`.
    g: Vec<f64>,
}

struct SampleTape {
    feat: Vec<f64>,
    layers: Vec<LayerTape>,
    /// Final residual stream, `T×d`.
    h_final: Vec<f64>,
    lnf_stats: Vec<(f64, f64)>,
    score: Vec<f64>,
}

/// Forward pass over token rows recording every activation needed by the
/// reverse pass. Same primitives and accumulation order as inference.
fn forward_taped(params: &ScoreNetParams, tokens: &[f64], t: f64) -> SampleTape {
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let lay = &params.layout;

    let feat = time_features(&params.rff_freqs, t);
    let mut temb = vec![0.0; d];
    matvec(params.t(&lay.time_w), &feat, Some(params.t(&lay.time_b)), &mut temb, d, 2 * cfg.rff_dim);

    let mut h = vec![0.0; n_tok * d];
    for k in 0..n_tok {
        let row = &mut h[k * d..(k + 1) * d];
        matvec(params.t(&lay.w_in), &tokens[k * td..(k + 1) * td], Some(params.t(&lay.b_in)), row, d, td);
        let pos = &params.t(&lay.pos)[k * d..(k + 1) * d];
        for i in 0..d {
            row[i] += pos[i] + temb[i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut u_row = vec![0.0; d];
    let mut score_scratch = vec![0.0; n_tok];
    for l in 0..cfg.n_layers {
        let lr = &lay.layers[l];
        let h_in = h.clone();
        let mut ln1_stats = vec![(0.0, 0.0); n_tok];
        let mut q = vec![0.0; n_tok * d];
        let mut kk = vec![0.0; n_tok * d];
        let mut v = vec![0.0; n_tok * d];
        for k in 0..n_tok {
            ln1_stats[k] = layer_norm_row(&h_in[k * d..(k + 1) * d], params.t(&lr.ln1_g), params.t(&lr.ln1_b), &mut u_row);
            matvec(params.t(&lr.wq), &u_row, Some(params.t(&lr.bq)), &mut q[k * d..(k + 1) * d], d, d);
            matvec(params.t(&lr.wk), &u_row, Some(params.t(&lr.bk)), &mut kk[k * d..(k + 1) * d], d, d);
            matvec(params.t(&lr.wv), &u_row, Some(params.t(&lr.bv)), &mut v[k * d..(k + 1) * d], d, d);
        }
        let mut probs = vec![0.0; n_tok * heads * n_tok];
        let mut ctx = vec![0.0; n_tok * d];
        let mut attn_out = vec![0.0; d];
        for k in 0..n_tok {
            attention_row(
                &q[k * d..(k + 1) * d],
                &kk,
                &v,
                n_tok,
                heads,
                hd,
                &mut score_scratch,
                &mut ctx[k * d..(k + 1) * d],
                Some(&mut probs[k * heads * n_tok..(k + 1) * heads * n_tok]),
            );
            matvec(params.t(&lr.wo), &ctx[k * d..(k + 1) * d], Some(params.t(&lr.bo)), &mut attn_out, d, d);
            for i in 0..d {
                h[k * d + i] += attn_out[i];
            }
        }
        let h_mid = h.clone();
        let mut ln2_stats = vec![(0.0, 0.0); n_tok];
        let mut mlp_pre = vec![0.0; n_tok * 4 * d];
        let mut g = vec![0.0; n_tok * 4 * d];
        for k in 0..n_tok {
            ln2_stats[k] = layer_norm_row(&h_mid[k * d..(k + 1) * d], params.t(&lr.ln2_g), params.t(&lr.ln2_b), &mut u_row);
            let pre = &mut mlp_pre[k * 4 * d..(k + 1) * 4 * d];
            matvec(params.t(&lr.w1), &u_row, Some(params.t(&lr.b1)), pre, 4 * d, d);
            let gk = &mut g[k * 4 * d..(k + 1) * 4 * d];
            for i in 0..4 * d {
                gk[i] = gelu(pre[i]);
            }
            matvec(params.t(&lr.w2), gk, Some(params.t(&lr.b2)), &mut attn_out, d, 4 * d);
            for i in 0..d {
                h[k * d + i] += attn_out[i];
            }
        }
        layers.push(LayerTape { h_in, ln1_stats, q, k: kk, v, probs, ctx, h_mid, ln2_stats, mlp_pre, g });
    }

    let h_final = h;
    let mut lnf_stats = vec![(0.0, 0.0); n_tok];
    let mut score = vec![0.0; n_tok * td];
    for k in 0..n_tok {
        lnf_stats[k] = layer_norm_row(&h_final[k * d..(k + 1) * d], params.t(&lay.lnf_g), params.t(&lay.lnf_b), &mut u_row);
        matvec(params.t(&lay.w_out), &u_row, Some(params.t(&lay.b_out)), &mut score[k * td..(k + 1) * td], td, d);
    }
    mask_constrained_slots(&mut score, cfg.n, cfg.m);
    SampleTape { feat, layers, h_final, lnf_stats, score }
}

/// Accumulate `grad[w_range] += dy ⊗ x`, `grad[b_range] += dy`, and
/// optionally `dx += Wᵀ·dy`. Ranges index the flat gradient buffer.
fn matvec_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    w_range: &Range<usize>,
    b_range: &Range<usize>,
    dx: Option<&mut [f64]>,
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let dyr = dy[r];
        grad[b_range.start + r] += dyr;
        let base = w_range.start + r * cols;
        for c in 0..cols {
            grad[base + c] += dyr * x[c];
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = dy[r];
            let wr = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dx[c] += wr[c] * dyr;
            }
        }
    }
}

/// LayerNorm reverse for one row. `x` is the pre-norm input, `(mean, rstd)`
/// its saved statistics, `dy` the gradient at the affine output. Adds the
/// input gradient into `dx` and the affine-parameter gradients into
/// `grad[g_range]`/`grad[b_range]`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    x: &[f64],
    mean: f64,
    rstd: f64,
    gamma: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    grad: &mut [f64],
    g_range: &Range<usize>,
    b_range: &Range<usize>,
) {
    let d = x.len();
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..d {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma[i];
        grad[g_range.start + i] += dy[i] * xhat;
        grad[b_range.start + i] += dy[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let inv_d = 1.0 / d as f64;
    for i in 0..d {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma[i];
        dx[i] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
}

/// Reverse pass for one sample: takes `dscore` (gradient at the masked score
/// rows) and accumulates parameter gradients into `grad`.
fn backward_taped(
    params: &ScoreNetParams,
    tokens: &[f64],
    tape: &SampleTape,
    dscore: &[f64],
    grad: &mut [f64],
) {
    let cfg = &params.cfg;
    let (n_tok, d, td) = (cfg.n_tokens(), cfg.d_model, cfg.token_dim());
    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let lay = &params.layout;

    let mut dh = vec![0.0; n_tok * d];
    let mut u_row = vec![0.0; d];
    let mut du_row = vec![0.0; d];
    let mut dy_row = vec![0.0; d];

    // Output projection + final LayerNorm.
    for k in 0..n_tok {
        let x = &tape.h_final[k * d..(k + 1) * d];
        let (mean, rstd) = tape.lnf_stats[k];
        // Recompute the normalized row (input to the output projection).
        layer_norm_row(x, params.t(&lay.lnf_g), params.t(&lay.lnf_b), &mut u_row);
        du_row.fill(0.0);
        matvec_backward(
            params.t(&lay.w_out),
            &u_row,
            &dscore[k * td..(k + 1) * td],
            grad,
            &lay.w_out,
            &lay.b_out,
            Some(&mut du_row),
            td,
            d,
        );
        layer_norm_backward(
            x,
            mean,
            rstd,
            params.t(&lay.lnf_g),
            &du_row,
            &mut dh[k * d..(k + 1) * d],
            grad,
            &lay.lnf_g,
            &lay.lnf_b,
        );
    }

    // Layers in reverse.
    let mut dmlp_pre = vec![0.0; 4 * d];
    let mut dgrow = vec![0.0; 4 * d];
    let mut dctx = vec![0.0; d];
    let mut dq = vec![0.0; n_tok * d];
    let mut dk = vec![0.0; n_tok * d];
    let mut dv = vec![0.0; n_tok * d];
    let mut dp = vec![0.0; n_tok];
    let mut dscore_row = vec![0.0; n_tok];
    for l in (0..cfg.n_layers).rev() {
        let lr = &lay.layers[l];
        let tp = &tape.layers[l];

        // MLP block backward: h_out = h_mid + W2·gelu(W1·LN2(h_mid)).
        // dh holds dL/dh_out; the identity path keeps it in place and the
        // branch adds the LN2-input gradient.
        for k in 0..n_tok {
            let x = &tp.h_mid[k * d..(k + 1) * d];
            let (mean, rstd) = tp.ln2_stats[k];
            layer_norm_row(x, params.t(&lr.ln2_g), params.t(&lr.ln2_b), &mut u_row);
            dy_row.copy_from_slice(&dh[k * d..(k + 1) * d]);
            dgrow.fill(0.0);
            matvec_backward(
                params.t(&lr.w2),
                &tp.g[k * 4 * d..(k + 1) * 4 * d],
                &dy_row,
                grad,
                &lr.w2,
                &lr.b2,
                Some(&mut dgrow),
                d,
                4 * d,
            );
            let pre = &tp.mlp_pre[k * 4 * d..(k + 1) * 4 * d];
            for i in 0..4 * d {
                dmlp_pre[i] = dgrow[i] * gelu_grad(pre[i]);
            }
            du_row.fill(0.0);
            matvec_backward(params.t(&lr.w1), &u_row, &dmlp_pre, grad, &lr.w1, &lr.b1, Some(&mut du_row), 4 * d, d);
            layer_norm_backward(
                x,
                mean,
                rstd,
                params.t(&lr.ln2_g),
                &du_row,
                &mut dh[k * d..(k + 1) * d],
                grad,
                &lr.ln2_g,
                &lr.ln2_b,
            );
        }

        // Attention block backward: h_mid = h_in + Wo·ctx(LN1(h_in)).
        dq.fill(0.0);
        dk.fill(0.0);
        dv.fill(0.0);
        for k in 0..n_tok {
            dctx.fill(0.0);
            dy_row.copy_from_slice(&dh[k * d..(k + 1) * d]);
            matvec_backward(
                params.t(&lr.wo),
                &tp.ctx[k * d..(k + 1) * d],
                &dy_row,
                grad,
                &lr.wo,
                &lr.bo,
                Some(&mut dctx),
                d,
                d,
            );
            // Attention backward per head: softmax rows were saved.
            for h in 0..heads {
                let probs = &tp.probs[k * heads * n_tok + h * n_tok..k * heads * n_tok + (h + 1) * n_tok];
                let dctx_h = &dctx[h * hd..(h + 1) * hd];
                let mut dot = 0.0;
                for j in 0..n_tok {
                    let vj = &tp.v[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut acc = 0.0;
                    for e in 0..hd {
                        acc += dctx_h[e] * vj[e];
                    }
                    dp[j] = acc;
                    dot += probs[j] * acc;
                    let dvj = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                    for e in 0..hd {
                        dvj[e] += probs[j] * dctx_h[e];
                    }
                }
                for j in 0..n_tok {
                    dscore_row[j] = probs[j] * (dp[j] - dot);
                }
                let qk = &tp.q[k * d + h * hd..k * d + (h + 1) * hd];
                let dqk = &mut dq[k * d + h * hd..k * d + (h + 1) * hd];
                for j in 0..n_tok {
                    let ds = dscore_row[j] * inv_sqrt;
                    let kj = &tp.k[j * d + h * hd..j * d + (h + 1) * hd];
                    for e in 0..hd {
                        dqk[e] += ds * kj[e];
                    }
                    let dkj = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                    for e in 0..hd {
                        dkj[e] += ds * qk[e];
                    }
                }
            }
        }
        // Project q/k/v gradients through their linear maps and LN1.
        for k in 0..n_tok {
            let x = &tp.h_in[k * d..(k + 1) * d];
            let (mean, rstd) = tp.ln1_stats[k];
            layer_norm_row(x, params.t(&lr.ln1_g), params.t(&lr.ln1_b), &mut u_row);
            du_row.fill(0.0);
            matvec_backward(params.t(&lr.wq), &u_row, &dq[k * d..(k + 1) * d], grad, &lr.wq, &lr.bq, Some(&mut du_row), d, d);
            matvec_backward(params.t(&lr.wk), &u_row, &dk[k * d..(k + 1) * d], grad, &lr.wk, &lr.bk, Some(&mut du_row), d, d);
            matvec_backward(params.t(&lr.wv), &u_row, &dv[k * d..(k + 1) * d], grad, &lr.wv, &lr.bv, Some(&mut du_row), d, d);
            layer_norm_backward(
                x,
                mean,
                rstd,
                params.t(&lr.ln1_g),
                &du_row,
                &mut dh[k * d..(k + 1) * d],
                grad,
                &lr.ln1_g,
                &lr.ln1_b,
            );
        }
    }

    // Embedding backward: h0 = W_in·x + b_in + pos_k + temb.
    let mut dtemb = vec![0.0; d];
    for k in 0..n_tok {
        dy_row.copy_from_slice(&dh[k * d..(k + 1) * d]);
        matvec_backward(
            params.t(&lay.w_in),
            &tokens[k * td..(k + 1) * td],
            &dy_row,
            grad,
            &lay.w_in,
            &lay.b_in,
            None,
            d,
            td,
        );
        for i in 0..d {
            grad[lay.pos.start + k * d + i] += dy_row[i];
            dtemb[i] += dy_row[i];
        }
    }
    matvec_backward(
        params.t(&lay.time_w),
        &tape.feat,
        &dtemb,
        grad,
        &lay.time_w,
        &lay.time_b,
        None,
        d,
        2 * cfg.rff_dim,
    );
}

/// Loss and parameter gradient on a fixed, pre-drawn batch:
/// `L = (1/B) Σ_b ‖s_θ(x_t, t) − target‖²` summed over token slots (the
/// constrained slots are zero on both sides).
pub fn dsm_loss_on(params: &ScoreNetParams, batch: &DsmBatch) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.xt_tokens.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = &params.cfg;
    if batch.n != cfg.n || batch.m != cfg.m {
        return Err(TrainError::ShapeMismatch {
            index: 0,
            n: batch.n,
            m: batch.m,
            expected_n: cfg.n,
            expected_m: cfg.m,
        });
    }
    let b = batch.xt_tokens.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.layout.total];
    let mut dscore = vec![0.0; cfg.n_tokens() * cfg.token_dim()];
    for (i, tokens) in batch.xt_tokens.iter().enumerate() {
        let tape = forward_taped(params, tokens, batch.ts[i]);
        let tgt = &batch.tgt_tokens[i];
        for (j, slot) in dscore.iter_mut().enumerate() {
            let diff = tape.score[j] - tgt[j];
            loss += diff * diff / b;
            *slot = 2.0 * diff / b;
        }
        // The constrained slots are structurally zero in the forward pass, so
        // no gradient flows through them.
        mask_constrained_slots(&mut dscore, cfg.n, cfg.m);
        backward_taped(params, tokens, &tape, &dscore, &mut grad);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { what: "loss" });
    }
    Ok((loss, grad))
}

/// Draw a batch and evaluate [`dsm_loss_on`].
pub fn dsm_loss<R: Rng>(
    params: &ScoreNetParams,
    batch_phi: &[PhiVector],
    sched: &DiffusionSchedule,
    t_min: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), TrainError> {
    let batch = draw_batch(batch_phi, sched, t_min, rng)?;
    dsm_loss_on(params, &batch)
}

/// Score evaluation on raw token rows (no tape kept). Returns masked rows.
pub fn score_rows(params: &ScoreNetParams, tokens: &[f64], t: f64) -> Vec<f64> {
    forward_taped(params, tokens, t).score
}

// ---------------------------------------------------------------------------
// Domain-equivalence diagnostic
// ---------------------------------------------------------------------------

/// Evaluate one regression residual two ways on a fixed batch of *clean
/// time-domain* samples with pre-drawn times and perturbations:
///
/// * chart side: `Σ_c λ_c²·(s̃_c − target_c)²` with no transforms at all;
/// * time side: map the network score to its induced time-domain score
///   `s = F⁻¹[Λ²·s̃]`, build the time-domain target `−(x_t − m·x₀)/σ²`, and
///   sum squares over time points.
///
/// The two values agree to floating-point accuracy; the mean over the batch
/// of each is returned as `(chart_value, time_value)`.
pub fn paired_loss_values(
    params: &ScoreNetParams,
    x0_time: &[TimeSeriesSample],
    ts: &[f64],
    xt_charts: &[PhiVector],
    sched: &DiffusionSchedule,
) -> Result<(f64, f64), TrainError> {
    if x0_time.is_empty() || x0_time.len() != ts.len() || ts.len() != xt_charts.len() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = &params.cfg;
    let weights = lambda_diag(cfg.n).phi_weights();
    let b = x0_time.len() as f64;
    let mut chart_total = 0.0;
    let mut time_total = 0.0;
    for i in 0..x0_time.len() {
        let t = ts[i];
        let (mcoef, var1) = sched.kernel_coeffs(t)?;
        let z0 = phi(&dft_forward(&x0_time[i])?);
        let zt = &xt_charts[i];

        let tokens = phi_to_token_rows(zt);
        let s_tokens = score_rows(params, &tokens, t);
        let s_chart = crate::scorenet::score_tokens_to_phi(&s_tokens, cfg.n, cfg.m);

        // Chart side: λ²-weighted residual, no transforms.
        for f in 0..cfg.m {
            let sc = s_chart.feature(f);
            let z0f = z0.feature(f);
            let ztf = zt.feature(f);
            for c in 0..cfg.n {
                let w2 = weights[c] * weights[c];
                let tgt = -(ztf[c] - mcoef * z0f[c]) / (var1 * w2);
                let diff = sc[c] - tgt;
                chart_total += w2 * diff * diff / b;
            }
        }

        // Time side: induced score and plain time-domain target.
        let mut scaled = s_chart.clone();
        for f in 0..cfg.m {
            let row = scaled.feature_mut(f);
            for c in 0..cfg.n {
                row[c] *= weights[c] * weights[c];
            }
        }
        let s_time = dft_inverse(&phi_inverse(&scaled)?)?;
        let xt_time = dft_inverse(&phi_inverse(zt)?)?;
        for idx in 0..cfg.n * cfg.m {
            let tgt = -(xt_time.values[idx] - mcoef * x0_time[i].values[idx]) / var1;
            let diff = s_time.values[idx] - tgt;
            time_total += diff * diff / b;
        }
    }
    Ok((chart_total, time_total))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub params: ScoreNetParams,
    pub stats: StandardizationStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Set when a non-finite loss aborted the run; `params` then holds the
    /// last good (best-so-far) state.
    pub aborted: Option<String>,
}

/// Full training run: split, standardize on the training split, convert to
/// chart coordinates, optimize with AdamW under warmup+cosine, track the
/// best-validation parameters on a frozen set of validation draws.
///
/// Deterministic given `cfg.seed`. `init` provides the starting parameters
/// (pass a fresh [`ScoreNetParams::init`] for from-scratch training).
pub fn train_loop(
    cfg: &TrainConfig,
    init: ScoreNetParams,
    dataset: &[TimeSeriesSample],
    sched: &DiffusionSchedule,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let net_cfg = init.cfg.clone();
    let first = dataset.first().ok_or(TrainError::EmptyDataset)?;
    if first.n != net_cfg.n || first.m != net_cfg.m {
        return Err(TrainError::ShapeMismatch {
            index: 0,
            n: first.n,
            m: first.m,
            expected_n: net_cfg.n,
            expected_m: net_cfg.m,
        });
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.n != first.n || s.m != first.m {
            return Err(TrainError::ShapeMismatch {
                index: i,
                n: s.n,
                m: s.m,
                expected_n: first.n,
                expected_m: first.m,
            });
        }
    }

    // Split: shuffled indices, validation tail. A one-sample dataset uses
    // that sample on both sides (degenerate but well-defined).
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut split_rng = crate::rng::chain_rng(cfg.seed, crate::rng::Stream::Init, 1);
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (train_idx, val_idx) = if dataset.len() == 1 {
        (vec![0], vec![0])
    } else {
        let n_val = ((dataset.len() as f64 * cfg.val_fraction).ceil() as usize)
            .clamp(1, dataset.len() - 1);
        let split = dataset.len() - n_val;
        (order[..split].to_vec(), order[split..].to_vec())
    };

    let train_raw: Vec<TimeSeriesSample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val_raw: Vec<TimeSeriesSample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let stats = standardization_stats(&train_raw)?;
    let to_phi = |xs: &[TimeSeriesSample]| -> Result<Vec<PhiVector>, TrainError> {
        standardize(xs, &stats)
            .iter()
            .map(|s| Ok(phi(&dft_forward(s)?)))
            .collect()
    };
    let train_phi = to_phi(&train_raw)?;
    let val_phi = to_phi(&val_raw)?;

    // Frozen validation draws: the same times and perturbations every epoch,
    // so the selection criterion tracks the model, not draw noise.
    let mut val_rng = crate::rng::stream_rng(cfg.seed, crate::rng::Stream::Eval);
    let val_batch = draw_batch(&val_phi, sched, cfg.t_min, &mut val_rng)?;

    let mut params = init;
    let mut opt = AdamW::new(params.layout.total, cfg.weight_decay);
    let mut train_rng = crate::rng::stream_rng(cfg.seed, crate::rng::Stream::Noise);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ScoreNetParams)> = None;

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut idx: Vec<usize> = (0..train_phi.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = train_rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<PhiVector> = chunk.iter().map(|&i| train_phi[i].clone()).collect();
            let drawn = draw_batch(&batch, sched, cfg.t_min, &mut train_rng)?;
            let (loss, grad) = match dsm_loss_on(&params, &drawn) {
                Ok(v) => v,
                Err(TrainError::NonFinite { .. }) => {
                    return Ok(abort_outcome(params, stats, history, best, epoch));
                }
                Err(e) => return Err(e),
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Ok(abort_outcome(params, stats, history, best, epoch));
            }
            opt.step(&mut params.data, &grad, lr);
            epoch_loss += loss;
            n_batches += 1;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        let val_loss = match dsm_loss_on(&params, &val_batch) {
            Ok((l, _)) => l,
            Err(TrainError::NonFinite { .. }) => {
                return Ok(abort_outcome(params, stats, history, best, epoch));
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord { epoch, lr, train_loss, val_loss });
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_loss < *b,
        };
        if better {
            best = Some((epoch, val_loss, params.clone()));
        }
    }

    let (best_epoch, best_val_loss, best_params) = match best {
        Some((e, v, p)) => (Some(e), v, p),
        None => (None, f64::INFINITY, params),
    };
    Ok(TrainOutcome { params: best_params, stats, history, best_epoch, best_val_loss, aborted: None })
}

fn abort_outcome(
    params: ScoreNetParams,
    stats: StandardizationStats,
    history: Vec<EpochRecord>,
    best: Option<(usize, f64, ScoreNetParams)>,
    epoch: usize,
) -> TrainOutcome {
    let (best_epoch, best_val_loss, best_params) = match best {
        Some((e, v, p)) => (Some(e), v, p),
        None => (None, f64::INFINITY, params),
    };
    TrainOutcome {
        params: best_params,
        stats,
        history,
        best_epoch,
        best_val_loss,
        aborted: Some(format!("non-finite loss at epoch {epoch}; returning last good parameters")),
    }
}
