//! Forward-pass caching behavior: exact agreement on full recompute sets,
//! drift bookkeeping on frozen inputs, staleness growth under a naive
//! policy, and the feedback contraction property.

use freqdiff_core::cache::{
    apply_error_feedback, CacheState, RecomputeReason, RecomputeSet,
};
use freqdiff_core::rng::{stream_rng, Stream};
use freqdiff_core::scorenet::{
    forward_cached, forward_full, ForwardScratch, ScoreNetConfig, ScoreNetParams,
};
use freqdiff_core::spectral::{dft_forward, n_tokens, TimeSeriesSample};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_params(n: usize, m: usize, seed: u64) -> ScoreNetParams {
    let cfg = ScoreNetConfig { n, m, n_layers: 3, d_model: 16, n_heads: 2, rff_dim: 8, q_for_all: false };
    let mut rng = stream_rng(seed, Stream::Init);
    let mut p = ScoreNetParams::init(cfg, &mut rng).unwrap();
    p.randomize_output_projection(0.05, &mut rng);
    p
}

fn random_input(n: usize, m: usize, seed: u64) -> TimeSeriesSample {
    let mut rng = stream_rng(seed, Stream::Noise);
    let mut x = TimeSeriesSample::zeros(n, m);
    for v in x.values.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    x
}

fn fresh_cache(p: &ScoreNetParams, depth: usize) -> CacheState {
    CacheState::new(p.cfg.n_layers, p.cfg.n_tokens(), p.cfg.d_model, p.cfg.token_dim(), depth)
}

/// Full recompute through the cached path is bit-identical to the plain
/// forward pass — for the default row-skipping network and for the
/// all-queries variant.
#[test]
fn cached_full_set_is_bitwise_identical_to_full_forward() {
    for q_for_all in [false, true] {
        let mut p = random_params(20, 2, 7);
        p.cfg.q_for_all = q_for_all;
        let t_tok = p.cfg.n_tokens();
        let mut cache = fresh_cache(&p, 2);
        let mut scratch = ForwardScratch::new(&p.cfg);
        for (step, t) in [1.0, 0.9, 0.8].iter().enumerate() {
            let xs = dft_forward(&random_input(20, 2, step as u64)).unwrap();
            let full = forward_full(&p, &xs, *t).unwrap();
            let set = RecomputeSet::full(t_tok, RecomputeReason::LowFreq);
            let cached = forward_cached(&p, &xs, *t, &mut cache, &set, &mut scratch).unwrap();
            assert_eq!(full.score_tokens, cached.result.score_tokens, "q_for_all={q_for_all}");
            assert_eq!(full.crf_final, cached.result.crf_final);
            assert_eq!(cached.stats.recomputed, t_tok);
            assert_eq!(cached.stats.cached, 0);
        }
    }
}

/// A frozen input at a frozen time produces identical snapshots, so drift and
/// event intensity are exactly zero after the cold start.
#[test]
fn frozen_input_has_zero_drift_and_intensity() {
    let p = random_params(16, 1, 8);
    let t_tok = p.cfg.n_tokens();
    let mut cache = fresh_cache(&p, 2);
    let mut scratch = ForwardScratch::new(&p.cfg);
    let xs = dft_forward(&random_input(16, 1, 99)).unwrap();
    for _ in 0..3 {
        let set = RecomputeSet::full(t_tok, RecomputeReason::LowFreq);
        forward_cached(&p, &xs, 0.5, &mut cache, &set, &mut scratch).unwrap();
    }
    assert_eq!(cache.event_intensity(1, 1e-6), 0.0);
    for d in cache.token_drifts() {
        assert_eq!(d, 0.0);
    }
    // With zero drift nothing beyond the low band triggers.
    let cfg = freqdiff_core::cache::E2crfConfig::defaults_for(16);
    let mut rng = stream_rng(1, Stream::Probe);
    let set = freqdiff_core::cache::select_recompute_set(
        &cfg,
        &cache.token_drifts(),
        None,
        10,
        cache.event_intensity(1, 1e-6),
        &mut rng,
    );
    assert!(set.indices.iter().all(|&k| k <= cfg.k_low));
}

/// Under a naive low-band-only policy on a drifting input, the cached score
/// of stale tokens departs further from the fresh score as their age grows.
/// The evaluation time is held fixed so only input drift matters, the walk
/// is slow enough to stay in the linear-response regime, and the error is
/// averaged over several walks.
#[test]
fn stale_token_error_grows_with_age() {
    let (n, m) = (32, 1);
    let p = random_params(n, m, 9);
    let t_tok = n_tokens(n);
    let td = p.cfg.token_dim();
    let t_eval = 0.5;
    let low = RecomputeSet::from_pairs((0..=3).map(|k| (k, RecomputeReason::LowFreq)).collect());

    let mut err_by_age: Vec<(usize, f64)> = Vec::new();
    for walk in 0..8u64 {
        let mut cache = fresh_cache(&p, 2);
        let mut scratch = ForwardScratch::new(&p.cfg);
        let mut rng = stream_rng(100 + walk, Stream::Noise);
        let mut x = random_input(n, m, 11 + walk);
        for step in 0..9 {
            if step > 0 {
                for v in x.values.iter_mut() {
                    *v += 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let xs = dft_forward(&x).unwrap();
            let set = if step == 0 {
                RecomputeSet::full(t_tok, RecomputeReason::LowFreq)
            } else {
                low.clone()
            };
            let fresh = forward_full(&p, &xs, t_eval).unwrap();
            let cached = forward_cached(&p, &xs, t_eval, &mut cache, &set, &mut scratch).unwrap();
            if step > 0 {
                let ages = cache.age_out().to_vec();
                for k in 4..t_tok {
                    let a = &fresh.score_tokens[k * td..(k + 1) * td];
                    let b = &cached.result.score_tokens[k * td..(k + 1) * td];
                    let err: f64 =
                        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    err_by_age.push((ages[k], err));
                }
            }
        }
    }
    let mean_at = |age: usize| {
        let v: Vec<f64> =
            err_by_age.iter().filter(|(a, _)| *a == age).map(|(_, e)| *e).collect();
        assert!(!v.is_empty(), "no observations at age {age}");
        v.iter().sum::<f64>() / v.len() as f64
    };
    let young = mean_at(1);
    let old = mean_at(8);
    assert!(
        old > 1.5 * young,
        "stale error should grow with age: age 1 → {young}, age 8 → {old}"
    );
}

/// Probe feedback contracts the cached-row error by exactly (1 − α) in every
/// blended coordinate.
#[test]
fn feedback_contracts_by_exactly_one_minus_alpha() {
    let p = random_params(16, 1, 12);
    let t_tok = p.cfg.n_tokens();
    let td = p.cfg.token_dim();
    let d = p.cfg.d_model;
    let mut cache = fresh_cache(&p, 2);
    let mut scratch = ForwardScratch::new(&p.cfg);

    // Warm the cache on one input, then move the input so cached rows carry error.
    let xs0 = dft_forward(&random_input(16, 1, 13)).unwrap();
    let set_full = RecomputeSet::full(t_tok, RecomputeReason::LowFreq);
    forward_cached(&p, &xs0, 0.9, &mut cache, &set_full, &mut scratch).unwrap();
    let xs1 = dft_forward(&random_input(16, 1, 14)).unwrap();
    let set = RecomputeSet::from_pairs(vec![
        (0, RecomputeReason::LowFreq),
        (4, RecomputeReason::Probe),
        (7, RecomputeReason::Probe),
    ]);
    let out = forward_cached(&p, &xs1, 0.8, &mut cache, &set, &mut scratch).unwrap();

    let probes = [4usize, 7];
    let before: Vec<f64> = probes
        .iter()
        .flat_map(|&k| cache.score_row(k).to_vec())
        .chain(probes.iter().flat_map(|&k| cache.crf_row(k).to_vec()))
        .collect();
    let alpha = 0.07;
    apply_error_feedback(&mut cache, &probes, &out.result.score_tokens, &out.result.crf_final, alpha)
        .unwrap();
    for (pi, &k) in probes.iter().enumerate() {
        let fresh_s = &out.result.score_tokens[k * td..(k + 1) * td];
        let fresh_c = &out.result.crf_final[k * d..(k + 1) * d];
        for (j, f) in fresh_s.iter().enumerate() {
            let old = before[pi * td + j];
            let got = cache.score_row(k)[j];
            let residual = got - f;
            let want = (1.0 - alpha) * (old - f);
            assert!((residual - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        for (j, f) in fresh_c.iter().enumerate() {
            let old = before[probes.len() * td + pi * d + j];
            let got = cache.crf_row(k)[j];
            let residual = got - f;
            let want = (1.0 - alpha) * (old - f);
            assert!((residual - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
