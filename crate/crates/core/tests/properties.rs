//! Property tests over randomly generated inputs.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tppca::lattice::WrapQuadratic;
use tppca::model_selection::{kaiser_guttman, u_statistic};
use tppca::simulation::{gen_dataset, SimScenario};
use tppca::wrapped_normal::{cem_fit, circular_init, wrap_angle, WnParams};
use tppca::{
    ppca_closed_form, ppca_em, AngleMatrix, CemOptions, EmOptions, LatticeSpec, PpcaModel,
    WrappedNormal,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(dim, dim).prop_map(move |a| &a * a.transpose() + DMatrix::identity(dim, dim) * 0.2)
}

fn orthogonal(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(dim, dim).prop_map(move |a| (a + DMatrix::identity(dim, dim) * 3.0).qr().q())
}

fn sample(
    seed: u64,
    n: usize,
    big_d: usize,
    d: usize,
    sigma: f64,
) -> tppca::simulation::SimDataset {
    let mut scn = SimScenario::new(n, big_d, d, sigma);
    scn.seed = seed;
    gen_dataset(&scn, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn closed_form_is_rotation_equivariant(seed in any::<u64>(), q in orthogonal(4)) {
        let x = sample(seed, 60, 4, 2, 0.5).x_true;
        let base = ppca_closed_form(&x, 2).unwrap().covariance();
        let rotated = ppca_closed_form(&(&x * q.transpose()), 2).unwrap().covariance();
        let expected = &q * base * q.transpose();
        prop_assert!((rotated - expected).norm() < 1e-9);
    }

    #[test]
    fn u_is_nonnegative(s in spd(4), sigma0 in spd(4), n in 5usize..1000) {
        prop_assert!(u_statistic(&s, &sigma0, n).unwrap() >= -1e-9);
    }

    #[test]
    fn u_is_congruence_invariant(s in spd(3), sigma0 in spd(3), a in matrix(3, 3)) {
        let a = a + DMatrix::identity(3, 3) * 3.0;
        let u = u_statistic(&s, &sigma0, 50).unwrap();
        let moved = u_statistic(&(&a * &s * a.transpose()), &(&a * &sigma0 * a.transpose()), 50).unwrap();
        prop_assert!((u - moved).abs() < 1e-7 * u.max(1.0));
    }

    #[test]
    fn kaiser_guttman_ignores_column_scale(seed in any::<u64>(), scales in prop::collection::vec(0.1f64..10.0, 5)) {
        let x = sample(seed, 80, 5, 2, 0.7).x_true;
        let scaled = DMatrix::from_fn(80, 5, |r, c| x[(r, c)] * scales[c]);
        let a = kaiser_guttman(&x).unwrap();
        let b = kaiser_guttman(&scaled).unwrap();
        prop_assert_eq!(a.chosen_d, b.chosen_d);
        for (u, v) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn em_trace_never_decreases(seed in any::<u64>(), d in 1usize..4, w0 in matrix(5, 3)) {
        let x = sample(seed, 100, 5, 2, 0.8).x_true;
        let init = PpcaModel::new(DVector::zeros(5), w0.columns(0, d).into_owned(), 1.5).unwrap();
        let fit = ppca_em(&x, d, &init, &EmOptions { tol: 1e-10, max_iter: 300 }).unwrap();
        for pair in fit.trace.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn lattice_argmin_matches_enumeration(a in spd(3), b in prop::collection::vec(-10.0f64..10.0, 3)) {
        let quad = WrapQuadratic::new(&a).unwrap();
        let got = quad.argmin(&b, 2);
        let mut best = (f64::INFINITY, vec![0i32; 3]);
        for k0 in -2..=2 {
            for k1 in -2..=2 {
                for k2 in -2..=2 {
                    let k = vec![k0, k1, k2];
                    let r = DVector::from_fn(3, |i, _| b[i] + TAU * k[i] as f64);
                    let q = (r.transpose() * &a * &r)[(0, 0)];
                    if q < best.0 - 1e-9 {
                        best = (q, k);
                    }
                }
            }
        }
        prop_assert!((got.value - best.0).abs() < 1e-8 * best.0.max(1.0));
        prop_assert_eq!(got.k, best.1);
    }

    #[test]
    fn wrap_lands_in_range(x in -1e6f64..1e6) {
        let w = wrap_angle(x);
        prop_assert!((0.0..TAU).contains(&w));
        let turns = (x - w) / TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-6);
    }

    #[test]
    fn truncation_is_stable_when_concentrated(seed in any::<u64>(), y in prop::collection::vec(0.0f64..TAU, 3)) {
        let data = sample(seed, 10, 3, 1, 0.3);
        let cov = &data.w_true * data.w_true.transpose() * 0.1 + DMatrix::identity(3, 3) * 0.09;
        let params = WnParams::new(data.mu_true, cov).unwrap();
        let a = WrappedNormal::new(params.clone(), LatticeSpec::new(2)).unwrap().log_density(&y);
        let b = WrappedNormal::new(params, LatticeSpec::new(3)).unwrap().log_density(&y);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn estep_weights_sum_to_one(s in spd(2), mu in prop::collection::vec(0.0f64..TAU, 2), y in prop::collection::vec(0.0f64..TAU, 2)) {
        let wn = WrappedNormal::new(WnParams::new(DVector::from_vec(mu), s).unwrap(), LatticeSpec::new(3)).unwrap();
        let total: f64 = wn.estep_weights(&y).iter().map(|(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cem_trace_never_decreases(seed in any::<u64>(), sigma in 0.2f64..2.0) {
        let y = sample(seed, 40, 3, 1, sigma).y;
        let fit = cem_fit(&y, &circular_init(&y), &CemOptions::default()).unwrap();
        for pair in fit.trace.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn cem_is_shift_equivariant(seed in any::<u64>(), shifts in prop::collection::vec(-3i32..=3, 60)) {
        let y = sample(seed, 20, 3, 1, 0.4).y;
        let moved = AngleMatrix::from_unwrapped(&DMatrix::from_fn(20, 3, |r, c| {
            y.data()[(r, c)] + TAU * shifts[r * 3 + c] as f64
        }))
        .unwrap();
        let a = cem_fit(&y, &circular_init(&y), &CemOptions::default()).unwrap();
        let b = cem_fit(&moved, &circular_init(&moved), &CemOptions::default()).unwrap();
        for i in 0..3 {
            let gap = wrap_angle(a.params.mu[i] - b.params.mu[i] + 1.0) - 1.0;
            prop_assert!(gap.abs() < 1e-9);
        }
        prop_assert!((&a.params.sigma - &b.params.sigma).norm() < 1e-9);
    }
}
