mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use semivary_core::covariance::{repair, truncate_surface};
use semivary_core::simulate::{simulate_dataset, SimConfig};
use semivary_core::smoothers::{unit_grid, VcSmoother};
use semivary_core::{validate, SmootherOptions, SplineBasis};

use common::*;

#[test]
fn partition_of_unity_holds() {
    assert!(partition_of_unity(10_001) < 1e-12);
}

#[test]
fn affine_targets_are_reproduced() {
    for seed in 0..4 {
        assert!(affine_reproduction(seed) < 1e-8);
    }
}

#[test]
fn covariance_surface_is_exactly_symmetric() {
    for seed in 0..4 {
        assert_eq!(covariance_symmetry(seed), 0.0);
    }
}

#[test]
fn estimating_equations_vanish() {
    for seed in 0..4 {
        assert!(estimating_equation_residual(seed, false) < 1e-6);
        assert!(estimating_equation_residual(seed, true) < 1e-6);
    }
}

#[test]
fn block_solver_matches_dense_oracle() {
    for seed in 0..3 {
        assert!(dense_oracle(seed, 1, 1, 4, false) < 1e-8);
        assert!(dense_oracle(seed, 2, 2, 6, true) < 1e-8);
        assert!(dense_oracle(seed, 3, 3, 9, true) < 1e-8);
    }
}

#[test]
fn sigma_hats_respect_the_floor() {
    for seed in 0..2 {
        assert!(sigma_hat_floor_margin(60, 0.4, seed) >= -1e-12);
        assert!(sigma_hat_floor_margin(60, 0.8, seed) >= -1e-12);
    }
}

#[test]
fn simulated_designs_validate() {
    for (n, rho) in [(20, 0.0), (50, 0.4), (50, 0.8)] {
        let (ds, _) = simulate_dataset(&SimConfig::standard(n, rho, 3)).unwrap();
        assert!(validate(&ds).is_empty());
    }
}

#[test]
fn property_suite_reports_every_check() {
    let suite = property_suite();
    assert_eq!(suite.len(), 8);
    for (name, worst, tol) in suite {
        assert!(worst <= tol, "{name}: {worst:e} > {tol:e}");
    }
}

fn symmetric(g: usize, entries: Vec<f64>) -> DMatrix<f64> {
    let a = DMatrix::from_vec(g, g, entries);
    (&a + a.transpose()) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_is_nonnegative_partition(dim in 4usize..14, degree in 1usize..4, t in 0.0f64..=1.0) {
        prop_assume!(dim > degree);
        let b = SplineBasis::new(dim, degree).unwrap().eval(t).unwrap();
        prop_assert!(b.iter().all(|v| *v >= -1e-15));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().filter(|v| **v != 0.0).count() <= degree + 1);
    }

    #[test]
    fn gee_scale_invariance(seed in 0u64..1000, c in 0.01f64..100.0) {
        prop_assert!(weight_scale_invariance(seed, c) < 1e-10);
    }

    #[test]
    fn truncation_is_idempotent_and_psd(
        entries in prop::collection::vec(-1.0f64..1.0, 15 * 15),
        lambda in 0.0f64..0.1,
    ) {
        let grid = unit_grid(15);
        let s = symmetric(15, entries);
        let (once, _) = truncate_surface(&s, &grid, lambda);
        let (twice, _) = truncate_surface(&once, &grid, lambda);
        prop_assert!((&once - &twice).amax() < 1e-9);
        prop_assert!((&once - once.transpose()).amax() < 1e-10);
        prop_assert!(once.symmetric_eigen().eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn repair_enforces_the_floor(entries in prop::collection::vec(-2.0f64..2.0, 6 * 6), floor in 1e-8f64..1e-1) {
        let mut s = symmetric(6, entries);
        repair(&mut s, floor);
        prop_assert!(s.symmetric_eigen().eigenvalues.min() >= floor - 1e-12);
    }

    #[test]
    fn smoother_is_linear_in_responses(seed in 0u64..500, c in -5.0f64..5.0, t in 0.2f64..0.8) {
        let ds = random_dataset(30, 5, 1, 2, seed);
        let obs = ds.observations();
        let y: Vec<f64> = (0..obs.len()).map(|k| (obs.t[k] * 7.0).sin() + obs.z_row(k)[1]).collect();
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let sm = VcSmoother::new(&ds, SmootherOptions::default());
        let (a, fa) = sm.at(t, 0.35, &y).unwrap();
        let (b, fb) = sm.at(t, 0.35, &cy).unwrap();
        prop_assert_eq!(fa, fb);
        for l in 0..2 {
            prop_assert!((b[l] - c * a[l]).abs() <= 1e-9 * (1.0 + a[l].abs() * c.abs()));
        }
    }

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), n in 2usize..20) {
        let cfg = SimConfig::standard(n, 0.4, seed);
        let (a, _) = simulate_dataset(&cfg).unwrap();
        let (b, _) = simulate_dataset(&cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
