use std::sync::Arc;

use fbdsde::analytics::error_n_stat;
use fbdsde::condexp::{fit_predict, BasisSpec};
use fbdsde::paths::{discrete_backward_integral, sample_bundle, SeedSpec};
use fbdsde::problem::{make_uniform_grid, probe_assumptions, CoefficientSet, FbdsdeProblem, FieldMap, ProbeCloud};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem_with_h_slope(slope: f64, claimed_alpha: f64) -> FbdsdeProblem<f64> {
    let zero: FieldMap<f64> = Arc::new(|_, _, _, _, o| o.fill(0.0));
    let coeffs = CoefficientSet::new(
        Arc::new(|_, o| o.fill(0.0)),
        Arc::new(|_, o| o.fill(1.0)),
        zero,
        Arc::new(move |_, _, _, z, o| o[0] = slope * z[0].sin()),
        Arc::new(|x, o| o[0] = x[0]),
        1.0,
        claimed_alpha,
    )
    .unwrap();
    FbdsdeProblem::new(1, 1, 1, 1.0, vec![0.0], coeffs).unwrap()
}

fn cloud(m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| (1.5 * v).sin() + v * v * 0.3 + rng.random::<f64>() - 0.5)
        .collect();
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_nodes_are_within_four_ulp(horizon in 0.01f64..50.0, steps in 1usize..2000) {
        let g = make_uniform_grid(horizon, steps).unwrap();
        let ulp = f64::EPSILON * horizon;
        prop_assert_eq!(g.nodes().len(), steps + 1);
        prop_assert_eq!(g.nodes()[0], 0.0);
        for (n, &t) in g.nodes().iter().enumerate() {
            prop_assert!((t - n as f64 * horizon / steps as f64).abs() <= 4.0 * ulp);
        }
        prop_assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn probe_failures_survive_larger_clouds(
        slope in 0.0f64..1.5,
        points in 5usize..60,
        extra in 1usize..60,
        seed in 0u64..1000,
    ) {
        let p = problem_with_h_slope(slope, 0.6);
        let small = probe_assumptions(&p, ProbeCloud { points, radius: 2.0 }, seed).unwrap();
        let large = probe_assumptions(&p, ProbeCloud { points: points + extra, radius: 2.0 }, seed).unwrap();
        for check in &small.checks {
            let bigger = large.check(check.coefficient, check.argument).unwrap();
            prop_assert!(bigger.max_quotient >= check.max_quotient);
            prop_assert!(!check.exceeded || bigger.exceeded);
        }
        prop_assert!(small.passed() || !large.passed());
    }

    #[test]
    fn projection_never_increases_second_moment(seed in 0u64..10_000, degree in 0usize..5) {
        let (x, y) = cloud(300, seed);
        let (_, pred) = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(degree)).unwrap();
        let moment = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        prop_assert!(moment(&pred) <= moment(&y) * (1.0 + 1e-9));
    }

    #[test]
    fn refining_the_basis_never_increases_residual(seed in 0u64..10_000, degree in 0usize..5) {
        let (x, y) = cloud(300, seed);
        let coarse = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(degree)).unwrap().0;
        let fine = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(degree + 1)).unwrap().0;
        let slack = 1e-6 * (1.0 + coarse.diagnostics.residual_norm);
        prop_assert!(fine.diagnostics.residual_norm <= coarse.diagnostics.residual_norm + slack);
    }

    #[test]
    fn partition_refinement_never_increases_residual(seed in 0u64..10_000, cells in 1usize..12) {
        let (x, y) = cloud(400, seed);
        let bounds = vec![(-2.0, 2.0)];
        let coarse = fit_predict(&x, 1, &y, 1, &BasisSpec::partition(cells).with_bounds(bounds.clone())).unwrap().0;
        let fine = fit_predict(&x, 1, &y, 1, &BasisSpec::partition(2 * cells).with_bounds(bounds)).unwrap().0;
        prop_assert!(fine.diagnostics.residual_norm <= coarse.diagnostics.residual_norm * (1.0 + 1e-9));
    }

    #[test]
    fn error_functional_is_nonnegative(
        seed in 0u64..10_000,
        steps in 1usize..6,
        factor in 1usize..4,
        samples in 1usize..5,
    ) {
        let coarse = make_uniform_grid(1.0, steps).unwrap();
        let fine = coarse.refine(factor).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
        let y_ref = draw(samples * (steps + 1));
        let z_ref = draw(samples * (steps * factor + 1));
        let y = draw(samples * (steps + 1));
        let z = draw(samples * (steps + 1));
        let e = error_n_stat(&y_ref, &z_ref, &y, &z, 1, 1, &fine, &coarse).unwrap();
        prop_assert!(e.value >= 0.0 && e.stderr >= 0.0);
    }

    #[test]
    fn backward_integral_is_linear_in_the_integrand(seed in 0u64..10_000, steps in 1usize..12, c in -3.0f64..3.0) {
        let b = sample_bundle(SeedSpec::new(seed, 0), &make_uniform_grid(1.0, steps).unwrap(), 1, 1, 1).unwrap();
        let a: Vec<f64> = (0..steps).map(|n| (n as f64).cos()).collect();
        let scaled: Vec<f64> = a.iter().map(|v| c * v).collect();
        let base = discrete_backward_integral(&a, &b.db, steps, 1, 1).unwrap();
        let out = discrete_backward_integral(&scaled, &b.db, steps, 1, 1).unwrap();
        prop_assert!((out[0] - c * base[0]).abs() <= 1e-12 * (1.0 + base[0].abs()));
    }
}
