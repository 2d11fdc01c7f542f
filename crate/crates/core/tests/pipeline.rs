use std::sync::Arc;

use bsvi_core::{
    build_problem, enumerate_tree, oracle_solve, parse_config, run_study, sample_increments, simulate_forward,
    solve_bsvi, solve_single, validate_spec, ConvexFunction, Error, EstimatorKind, IncrementEnsemble, IncrementLaw,
    Partition, ProblemConfig, ProblemSpec, SchemeParams, SchemeVariant,
};

#[test]
fn martingale_study_sits_at_the_noise_floor() {
    let cfg = parse_config(
        "[problem]\nname = bm_linear\n[scheme]\npaths = 10000\nseed = 3\n[study]\nn = 8, 16, 32\n",
    )
    .unwrap();
    let report = run_study(&cfg).unwrap();
    assert!(report.at_noise_floor(), "{:?}", report.rows);
    assert!(report.summary()[1].contains("at noise floor"));
    assert!(report.rate_y.is_some());
}

#[test]
fn registry_problems_match_the_oracle() {
    for name in ["bm_abs", "bm_linear", "bm_nonlinear", "linear_decay", "gbm_linear"] {
        let spec = build_problem(&ProblemConfig::named(name)).unwrap();
        for variant in [SchemeVariant::Implicit, SchemeVariant::Explicit] {
            let params = SchemeParams { variant, ..SchemeParams::tree() };
            let dev = bsvi_core::oracle_deviation(&spec, &params, 5).unwrap();
            assert!(dev < 1e-10, "{name} {variant}: {dev}");
        }
    }
}

#[test]
fn oracle_z_matches_hand_differences() {
    let spec = ProblemSpec::builder(1, 1)
        .scalar_diffusion(|_, _| 1.0)
        .terminal(|x| x[0] * x[0])
        .build()
        .unwrap();
    let table = oracle_solve(&spec, &SchemeParams::tree(), 2).unwrap();
    let s = 0.5f64.sqrt();
    // Leaves at +-2s and 0: Y at level 1 is the child average.
    assert!((table.y(1, 0) - (4.0 * s * s + 0.0) / 2.0).abs() < 1e-14);
    assert!((table.z(1, 0) - (4.0 * s * s) / (2.0 * s)).abs() < 1e-14);
    assert!((table.y(0, 0) - 1.0).abs() < 1e-14);
}

#[test]
fn solution_csv_round_trips_the_layout() {
    let cfg = parse_config("[problem]\nname = reflected_drift\n[scheme]\npaths = 50\n[study]\nn = 4\n").unwrap();
    let (forward, sol) = solve_single(&cfg, 4).unwrap();
    let mut out = Vec::new();
    sol.write_csv(&forward, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,step,t,x0,y,z0,u,a"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 50 * 5);
    for row in &rows {
        assert!(row[3] <= 1.0 + 1e-12);
        assert_eq!(row[6], 0.0);
        let (j, i) = (row[0] as usize, row[1] as usize);
        assert_eq!(row[4], sol.y(j, i));
        assert_eq!(row[7], forward.boundary(j, i).unwrap());
    }
}

#[test]
fn increments_survive_a_binary_round_trip() {
    let part = Partition::new(0.0, 2.0, 6).unwrap();
    let inc = sample_increments(part, 37, 2, IncrementLaw::Rademacher, 12).unwrap();
    let mut buf = Vec::new();
    inc.write_binary(&mut buf).unwrap();
    let back = IncrementEnsemble::read_binary(buf.as_slice(), 0.0, 2.0).unwrap();
    for j in 0..37 {
        for i in 0..6 {
            assert_eq!(inc.at(j, i), back.at(j, i));
        }
    }
}

#[test]
fn too_few_paths_for_the_basis_is_reported_with_its_step() {
    let spec = build_problem(&ProblemConfig::named("bm_abs")).unwrap();
    let part = Partition::for_problem(&spec, 4).unwrap();
    let fwd = simulate_forward(&spec, Arc::new(sample_increments(part, 3, 1, IncrementLaw::Gaussian, 0).unwrap()))
        .unwrap();
    let params = SchemeParams { num_paths: 3, ..SchemeParams::default() };
    match solve_bsvi(&spec, &params, &fwd) {
        Err(Error::BackwardStep { step: 3, source }) => {
            assert!(matches!(*source, Error::Underdetermined { samples: 3, features: 4, .. }))
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn validation_flags_only_the_broken_bound() {
    let spec = build_problem(&ProblemConfig::named("bm_nonlinear")).unwrap();
    let part = Partition::for_problem(&spec, 16).unwrap();
    let report = validate_spec(&spec, &SchemeParams::default(), &part);
    assert!(report.is_clean(), "{report:?}");

    let liar = ProblemSpec::builder(1, 1)
        .scalar_diffusion(|_, _| 1.0)
        .generator(|_, _, y, _| -5.0 * y)
        .lipschitz(1.0)
        .build()
        .unwrap();
    let report = validate_spec(&liar, &SchemeParams::default(), &part);
    assert!(report.lipschitz_violation("generator"));
    assert!(!report.lipschitz_violation("drift"));
}

#[test]
fn penalized_tree_solution_stays_above_the_obstacle_band() {
    let spec = build_problem(&ProblemConfig::named("bm_abs"))
        .unwrap()
        .with_phi(ConvexFunction::indicator_interval(0.0, f64::INFINITY).unwrap());
    let n = 10;
    let fwd = simulate_forward(&spec, Arc::new(enumerate_tree(Partition::for_problem(&spec, n).unwrap(), 1, 20).unwrap()))
        .unwrap();
    let params = SchemeParams { estimator: EstimatorKind::TreeExact, ..SchemeParams::tree() };
    let sol = solve_bsvi(&spec, &params, &fwd).unwrap();
    let eps = params.eps(1.0 / n as f64);
    for i in 0..=n {
        assert!(sol.step_y(i).iter().all(|&y| y >= -10.0 * eps));
    }
}
