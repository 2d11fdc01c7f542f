use std::sync::Arc;

use bsvi_core::convex::INCLUSION_TOL;
use bsvi_core::{
    enumerate_tree, oracle_solve, project_to_convex, sample_increments, simulate_forward, solve_bsvi, ConvexFunction,
    ConvexSet, EstimatorKind, IncrementLaw, Partition, ProblemSpec, RegressionBasis, SchemeParams,
};
use proptest::prelude::*;

fn catalog() -> impl Strategy<Value = ConvexFunction> {
    prop_oneof![
        Just(ConvexFunction::zero()),
        (0.1..5.0f64).prop_map(|c| ConvexFunction::quadratic(c).unwrap()),
        (0.0..3.0f64).prop_map(|c| ConvexFunction::abs(c).unwrap()),
        (-2.0..0.0f64, 0.0..2.0f64).prop_map(|(a, b)| ConvexFunction::indicator_interval(a, b).unwrap()),
        (-2.0..2.0f64).prop_map(|p| ConvexFunction::indicator_point(p).unwrap()),
        Just(ConvexFunction::indicator_interval(f64::NEG_INFINITY, 0.5).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn yosida_gradient_is_monotone_and_lipschitz(phi in catalog(), x in -5.0..5.0f64, y in -5.0..5.0f64, eps in 1e-3..3.0f64) {
        let (gx, gy) = (phi.yosida_gradient(x, eps).unwrap(), phi.yosida_gradient(y, eps).unwrap());
        prop_assert!((gx - gy) * (x - y) >= -1e-10);
        prop_assert!((gx - gy).abs() <= (x - y).abs() / eps * (1.0 + 1e-9) + 1e-10);
    }

    #[test]
    fn resolvent_is_nonexpansive_and_optimal(phi in catalog(), x in -5.0..5.0f64, y in -5.0..5.0f64, eps in 1e-3..3.0f64) {
        let (jx, jy) = (phi.resolvent(x, eps).unwrap(), phi.resolvent(y, eps).unwrap());
        prop_assert!((jx - jy).abs() <= (x - y).abs() + 1e-12);
        let g = phi.yosida_gradient(x, eps).unwrap();
        prop_assert!(phi.subdifferential(jx).unwrap().contains(g, INCLUSION_TOL));
    }

    #[test]
    fn numeric_resolvent_matches_closed_forms(phi in catalog(), x in -5.0..5.0f64, eps in 1e-2..3.0f64) {
        let closed = phi.resolvent(x, eps).unwrap();
        let numeric = phi.numeric_resolvent(x, eps).unwrap();
        prop_assert!((closed - numeric).abs() <= 1e-8 * (1.0 + closed.abs()));
    }

    #[test]
    fn projection_lands_in_the_set_and_is_idempotent(
        x in prop::collection::vec(-5.0..5.0f64, 2),
        radius in 0.1..3.0f64,
        offset in -1.0..1.0f64,
    ) {
        let sets = [
            ConvexSet::interval(-1.0, 1.0).unwrap(),
            ConvexSet::ball(vec![0.5, -0.5], radius).unwrap(),
            ConvexSet::halfspace(vec![1.0, 1.0], offset).unwrap(),
        ];
        for set in &sets {
            let (p, dist) = project_to_convex(set, &x).unwrap();
            prop_assert!(set.level(&p) <= 1e-12);
            let (q, again) = project_to_convex(set, &p).unwrap();
            prop_assert!(again <= 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let moved: f64 = x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!((moved - dist).abs() <= 1e-12);
        }
    }

    #[test]
    fn lsmc_fit_is_permutation_equivariant(seed in 0u64..1000) {
        let part = Partition::new(0.0, 1.0, 1).unwrap();
        let inc = sample_increments(part, 200, 1, IncrementLaw::Gaussian, seed).unwrap();
        let states: Vec<f64> = (0..200).map(|j| inc.get(j, 0, 0)).collect();
        let values: Vec<f64> = states.iter().map(|x| x.sin() + 0.3 * x * x).collect();
        let kind = EstimatorKind::LsmcPoly { degree: 3 };
        let fit = RegressionBasis::prepare(&states, 1, kind, None, false).unwrap().fit(&values).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        order.reverse();
        order.swap(3, 150);
        let s2: Vec<f64> = order.iter().map(|&j| states[j]).collect();
        let v2: Vec<f64> = order.iter().map(|&j| values[j]).collect();
        let fit2 = RegressionBasis::prepare(&s2, 1, kind, None, false).unwrap().fit(&v2).unwrap();
        for (k, &j) in order.iter().enumerate() {
            prop_assert!((fit2.fitted[k] - fit.fitted[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn tower_property_on_the_tree() {
    // E^0(E^1(g)) = E^0(g) for exact tree averages.
    let spec = ProblemSpec::builder(1, 1)
        .scalar_diffusion(|_, _| 1.0)
        .terminal(|x| (2.0 * x[0]).cos() + x[0].powi(3))
        .build()
        .unwrap();
    let n = 5;
    let fwd = simulate_forward(&spec, Arc::new(enumerate_tree(Partition::for_problem(&spec, n).unwrap(), 1, 20).unwrap()))
        .unwrap();
    let sol = solve_bsvi(&spec, &SchemeParams::tree(), &fwd).unwrap();
    let mean_terminal: f64 = (0..32).map(|j| spec.terminal(fwd.state(j, n))).sum::<f64>() / 32.0;
    for j in 0..32 {
        assert!((sol.y(j, 0) - mean_terminal).abs() < 1e-14);
    }
}

#[test]
fn oracle_root_is_invariant_under_path_reordering() {
    // Reversing every sign pattern maps the tree onto itself.
    let spec = ProblemSpec::builder(1, 1)
        .scalar_diffusion(|_, _| 1.0)
        .terminal(|x| x[0].abs())
        .phi(ConvexFunction::indicator_interval(0.0, f64::INFINITY).unwrap())
        .build()
        .unwrap();
    let params = SchemeParams::tree();
    let table = oracle_solve(&spec, &params, 6).unwrap();
    let flipped = ProblemSpec::builder(1, 1)
        .scalar_diffusion(|_, _| -1.0)
        .terminal(|x| x[0].abs())
        .phi(ConvexFunction::indicator_interval(0.0, f64::INFINITY).unwrap())
        .build()
        .unwrap();
    let mirror = oracle_solve(&flipped, &params, 6).unwrap();
    assert_eq!(table.y(0, 0), mirror.y(0, 0));
    for node in 0..64 {
        assert_eq!(table.y(6, node), mirror.y(6, 63 - node));
    }
}
