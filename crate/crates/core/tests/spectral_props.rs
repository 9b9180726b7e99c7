//! Property tests for the spectral transforms, anchored by a direct O(N²)
//! discrete-Fourier oracle that shares no code with the production path.

use freqdiff_core::spectral::{
    dft_forward, dft_inverse, lambda_diag, n_tokens, phi, phi_inverse, spectral_energy,
};
use freqdiff_core::TimeSeriesSample;
use proptest::prelude::*;
use rustfft::num_complex::Complex;

/// Direct evaluation of the unitary transform: X_κ = N^{-1/2} Σ_τ x_τ e^{-2πiκτ/N}.
fn direct_half_spectrum(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    let scale = 1.0 / (n as f64).sqrt();
    (0..=n / 2)
        .map(|k| {
            let mut acc = Complex::new(0.0, 0.0);
            for (tau, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * tau) as f64 / n as f64;
                acc += Complex::new(v * ang.cos(), v * ang.sin());
            }
            acc * scale
        })
        .collect()
}

fn sample_strategy() -> impl Strategy<Value = TimeSeriesSample> {
    (2usize..=96, 1usize..=3).prop_flat_map(|(n, m)| {
        proptest::collection::vec(-100.0f64..100.0, n * m)
            .prop_map(move |values| TimeSeriesSample { values, n, m })
    })
}

proptest! {
    #[test]
    fn forward_matches_direct_oracle(x in sample_strategy()) {
        let xs = dft_forward(&x).unwrap();
        for f in 0..x.m {
            let col: Vec<f64> = (0..x.n).map(|t| x.at(t, f)).collect();
            let oracle = direct_half_spectrum(&col);
            let scale: f64 = col.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (k, want) in oracle.iter().enumerate() {
                let got = xs.at(k, f);
                prop_assert!(
                    (got - want).norm() <= 1e-10 * scale * (x.n as f64),
                    "token {k} feature {f}: got {got}, oracle {want}"
                );
            }
        }
    }

    #[test]
    fn round_trip_and_parseval(x in sample_strategy()) {
        let xs = dft_forward(&x).unwrap();
        let back = dft_inverse(&xs).unwrap();
        let scale: f64 = x.values.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (a, b) in x.values.iter().zip(back.values.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
        // Parseval over the mirror-expanded spectrum, per feature.
        for f in 0..x.m {
            let full = xs.mirror_expand(f);
            let time_energy: f64 = (0..x.n).map(|t| x.at(t, f) * x.at(t, f)).sum();
            let freq_energy: f64 = full.iter().map(|c| c.norm_sqr()).sum();
            prop_assert!(
                (time_energy - freq_energy).abs() <= 1e-9 * time_energy.max(1e-12),
                "Parseval violated: {time_energy} vs {freq_energy}"
            );
        }
    }

    #[test]
    fn mirror_symmetry_is_exact(x in sample_strategy()) {
        let xs = dft_forward(&x).unwrap();
        xs.validate_symmetry().unwrap();
        for f in 0..x.m {
            let full = xs.mirror_expand(f);
            for k in 1..x.n {
                let want = full[x.n - k].conj();
                prop_assert_eq!(full[k], want, "mirror pair {} broken", k);
            }
        }
    }

    #[test]
    fn chart_round_trips_are_tight(x in sample_strategy()) {
        let xs = dft_forward(&x).unwrap();
        let v = phi(&xs);
        prop_assert_eq!(v.coords.len(), x.n * x.m);
        let back = phi_inverse(&v).unwrap();
        for k in 0..xs.n_tokens() {
            for f in 0..x.m {
                prop_assert!((back.at(k, f) - xs.at(k, f)).norm() <= 1e-12);
            }
        }
        let v2 = phi(&back);
        for (a, b) in v.coords.iter().zip(v2.coords.iter()) {
            prop_assert_eq!(a, b, "chart must round trip bit-exactly");
        }
    }

    #[test]
    fn energy_matches_direct_sum(x in sample_strategy()) {
        let xs = dft_forward(&x).unwrap();
        let e = spectral_energy(&xs);
        prop_assert_eq!(e.len(), n_tokens(x.n));
        let direct: f64 = (0..xs.n_tokens())
            .flat_map(|k| (0..x.m).map(move |f| (k, f)))
            .map(|(k, f)| xs.at(k, f).norm_sqr())
            .sum();
        let total: f64 = e.iter().sum();
        prop_assert!((total - direct).abs() <= 1e-9 * direct.max(1e-12));
    }
}

/// The transform matrix is unitary: rows of U form an orthonormal set. Built
/// column by column from unit impulses, so it exercises the production
/// forward path.
#[test]
fn transform_matrix_is_unitary_up_to_64() {
    for n in [2usize, 3, 4, 5, 8, 13, 16, 31, 32, 64] {
        let cols: Vec<Vec<Complex<f64>>> = (0..n)
            .map(|t| {
                let mut x = TimeSeriesSample::zeros(n, 1);
                x.values[t] = 1.0;
                let xs = dft_forward(&x).unwrap();
                xs.mirror_expand(0)
            })
            .collect();
        // (U U*)_{ij} = Σ_k U_{ik} conj(U_{jk}) where U_{kt} = cols[t][k].
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for t in 0..n {
                    acc += cols[t][i] * cols[t][j].conj();
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (acc - Complex::new(want, 0.0)).norm() < 1e-10,
                    "n={n}: inner product of rows {i},{j} = {acc}"
                );
            }
        }
    }
}

/// Prior weights: 1 at the self-conjugate tokens, 1/√2 at interior tokens,
/// and the chart-weight expansion agrees with the diagonal.
#[test]
fn lambda_diagonal_shape() {
    for n in [2usize, 5, 8, 9, 16] {
        let lam = lambda_diag(n);
        assert_eq!(lam.entries.len(), n_tokens(n));
        assert_eq!(lam.entries[0], 1.0);
        if n % 2 == 0 {
            assert_eq!(*lam.entries.last().unwrap(), 1.0);
        }
        for k in 1..n_tokens(n).saturating_sub(if n % 2 == 0 { 1 } else { 0 }) {
            if k < n_tokens(n) - usize::from(n % 2 == 0) {
                assert!((lam.entries[k] - 0.5f64.sqrt()).abs() < 1e-15);
            }
        }
        let w = lam.phi_weights();
        assert_eq!(w.len(), n);
        assert_eq!(w[0], 1.0);
    }
}
