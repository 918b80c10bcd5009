use super::*;
use crate::analysis::{oracle_cole_hopf, oracle_linear};
use crate::model::{AffineQuadratic, GridSpec, TimeFn};
use crate::paths::{generate, girsanov_weights, WeightOptions};

fn ens(n_steps: usize, n_paths: usize, seed: u64) -> PathEnsemble {
    generate(&GridSpec::new(1.0, n_steps, n_paths, seed).unwrap()).unwrap()
}

fn zero_gen() -> GeneratorSpec {
    GeneratorSpec::new(AffineQuadratic::default(), TerminalCondition::constant(0.0))
}

#[test]
fn split_examples() {
    let tc = TerminalCondition::tanh_w1(0.1);
    let pieces = split_terminal(&tc, 0.03125);
    assert_eq!(pieces.len(), 4);
    assert!((pieces[0].sup_norm() - 0.025).abs() < 1e-15);
    assert_eq!(split_terminal(&TerminalCondition::constant(0.0), 0.01).len(), 1);
    assert_eq!(split_terminal(&TerminalCondition::tanh_w1(1.0), 1.0 / 256.0).len(), 320);
    assert_eq!(split_terminal(&tc, f64::INFINITY).len(), 1);
    assert_eq!(split_terminal(&tc, 1.0)[0], tc);
}

#[test]
fn shift_solves_its_ode() {
    // φ' = 0.1 - 0.5 φ, φ(0) = 0  =>  φ(t) = 0.2 (1 - e^{-t/2}).
    let gen = GeneratorSpec::linear(0.5, 0.1, TerminalCondition::constant(0.0));
    let grid = GridSpec::new(1.0, 16, 2, 0).unwrap();
    let phi = shift_path(&gen, &grid);
    for (i, p) in phi.iter().enumerate() {
        let exact = 0.2 * (1.0 - (-grid.time(i) / 2.0).exp());
        assert!((p - exact).abs() < 1e-13, "{i}: {p} vs {exact}");
    }
    let quad = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::constant(0.0));
    assert!(shift_path(&quad, &grid).iter().all(|p| *p == 0.0));
}

#[test]
fn fitted_ratio_of_geometric_sequence() {
    let d: Vec<f64> = (0..6).map(|k| 0.3_f64.powi(k)).collect();
    assert!((fitted_ratio(&d).unwrap() - 0.3).abs() < 1e-12);
    assert!(fitted_ratio(&[1.0]).is_none());
}

#[test]
fn zero_data_gives_zero_triple() {
    let e = ens(8, 400, 1);
    let (sol, trace) = solve_small(&zero_gen(), &e, &SolveOptions::default()).unwrap();
    assert_eq!(trace.iterations, 1);
    assert_eq!(sol.y.max_abs(), 0.0);
    assert_eq!(sol.z.max_abs(), 0.0);
    assert_eq!(sol.zeta.max_abs(), 0.0);
    let anything = SolutionTriple { y: Field::constant(9, 400, 0.3), ..SolutionTriple::zeros(8, 400) };
    let out = apply_f(&anything, &zero_gen(), &e, None, &BasisSpec::default()).unwrap();
    assert!(out.y.max_abs() < 1e-14);
}

#[test]
fn martingale_representation_of_w1() {
    // Clipped cubic with only the linear coefficient: ξ = W¹_T on the reachable range.
    let tc = TerminalCondition {
        shape: crate::model::TerminalShape::ClippedPolynomial {
            load_w1: 1.0,
            load_w2: 0.0,
            coeffs: vec![0.0, 1.0],
            clip: 50.0,
        },
        scale: 1.0,
        offset: 0.0,
    };
    let e = ens(8, 5000, 2);
    let gen = GeneratorSpec::new(AffineQuadratic::default(), tc);
    let out = apply_f(&SolutionTriple::zeros(8, 5000), &gen, &e, None, &BasisSpec::default()).unwrap();
    let rms = |f: &Field, target: &dyn Fn(usize, usize) -> f64| {
        let s: f64 = (0..8)
            .flat_map(|i| (0..5000).map(move |p| (i, p)))
            .map(|(i, p)| (f.get(i, p) - target(i, p)).powi(2))
            .sum();
        (s / (8.0 * 5000.0)).sqrt()
    };
    // Regression noise of a degree-3 fit on 5000 paths: about sqrt(2k/n) for z.
    assert!(rms(&out.y, &|i, p| e.w1_levels.get(i, p)) < 0.05);
    assert!(rms(&out.z, &|_, _| 1.0) < 0.15);
    assert!(rms(&out.zeta, &|_, _| 0.0) < 0.15);
}

#[test]
fn first_iterate_is_conditional_mean() {
    let e = ens(16, 20_000, 3);
    let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(0.001));
    let out = apply_f(&SolutionTriple::zeros(16, 20_000), &gen, &e, None, &BasisSpec::default()).unwrap();
    let xi = terminal_values(&e, &gen.terminal);
    let mean = xi.iter().sum::<f64>() / xi.len() as f64;
    assert!((out.y0() - mean).abs() < 1e-15 + 3.0 * out.y0_se);
}

#[test]
fn small_quadratic_matches_cole_hopf() {
    let e = ens(32, 20_000, 4);
    let tc = TerminalCondition::tanh_w1(0.001);
    let gen = GeneratorSpec::pure_quadratic(1.0, tc.clone());
    let opts = SolveOptions { tol: 1e-13, ..Default::default() };
    let (sol, trace) = solve_small(&gen, &e, &opts).unwrap();
    let oracle = oracle_cole_hopf(1.0, &e, &tc, &opts.basis_for(&tc)).unwrap();
    let rel = (sol.y0() - oracle.y0()).abs() / oracle.y0().abs();
    assert!(rel < 0.01 || (sol.y0() - oracle.y0()).abs() < 1e-5, "{} vs {}", sol.y0(), oracle.y0());
    assert!(trace.converged);
    assert!(trace.iterations >= 4, "{:?}", trace.distances);
    assert_eq!(trace.ball_violations, 0);
    assert!(trace.fitted_ratio.unwrap() <= 2.0 * trace.contraction_bound, "{trace:?}");
    assert_eq!(sol.y.slice(32), terminal_values(&e, &tc).as_slice());
}

#[test]
fn smallness_is_enforced() {
    let e = ens(4, 200, 5);
    let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(0.01));
    match solve_small(&gen, &e, &SolveOptions::default()) {
        Err(Error::SmallnessViolated { xi_sup, threshold }) => {
            assert_eq!(xi_sup, 0.01);
            assert_eq!(threshold, 1.0 / 256.0);
        }
        other => panic!("expected SmallnessViolated, got {other:?}"),
    }
}

#[test]
fn no_convergence_carries_trace() {
    let e = ens(4, 500, 6);
    let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(0.003));
    let opts = SolveOptions { tol: 1e-300, max_iter: 3, ..Default::default() };
    match solve_small(&gen, &e, &opts) {
        Err(Error::NoConvergence { trace }) => {
            assert_eq!(trace.iterations, 3);
            assert!(!trace.converged);
        }
        other => panic!("expected NoConvergence, got {other:?}"),
    }
}

#[test]
fn chain_with_one_piece_matches_solve_small_bitwise() {
    let e = ens(16, 3000, 7);
    let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(0.002));
    let opts = SolveOptions::default();
    let (small, _) = solve_small(&gen, &e, &opts).unwrap();
    let chain = solve_chain(&gen, &e, &opts).unwrap();
    assert_eq!(chain.pieces(), 1);
    assert_eq!(chain.triple, small);
}

#[test]
fn constant_generator_integrates_deterministically() {
    let e = ens(16, 5000, 8);
    let tc = TerminalCondition::sin_w1(0.3);
    let gen = GeneratorSpec::linear(0.0, 0.25, tc.clone());
    let chain = solve_chain(&gen, &e, &SolveOptions::default()).unwrap();
    let xi = terminal_values(&e, &tc);
    let mean = xi.iter().sum::<f64>() / xi.len() as f64;
    let tol = 3.0 * chain.triple.y0_se + 1e-12;
    assert!((chain.triple.y0() - (mean + 0.25)).abs() < tol, "{} vs {}", chain.triple.y0(), mean + 0.25);
}

#[test]
fn linear_constant_terminal_is_exact() {
    let e = ens(16, 500, 9);
    let gen = GeneratorSpec::linear(0.5, 0.1, TerminalCondition::constant(0.2));
    let chain = solve_chain(&gen, &e, &SolveOptions::default()).unwrap();
    let exact = 0.4 * 0.5_f64.exp() - 0.2;
    assert!((chain.triple.y0() - exact).abs() < 1e-12, "{}", chain.triple.y0());
    assert!(chain.pieces() > 1);
}

#[test]
fn linear_random_terminal_matches_oracle() {
    let e = ens(16, 5000, 10);
    let tc = TerminalCondition::tanh_w1(0.2);
    let gen = GeneratorSpec::linear(0.5, 0.1, tc.clone());
    let opts = SolveOptions::default();
    let chain = solve_chain(&gen, &e, &opts).unwrap();
    let oracle = oracle_linear(0.5, 0.1, &e, &tc, &opts.basis_for(&tc)).unwrap();
    let se = (chain.triple.y0_se.powi(2) + oracle.y0_se.powi(2)).sqrt().max(1e-12);
    assert!((chain.triple.y0() - oracle.y0()).abs() < 3.0 * se);
}

#[test]
fn transform_identity_and_constant_examples() {
    let e = ens(8, 100, 11);
    let id = TransformParams::new(Field::zeros(8, 100), Field::zeros(8, 100), Field::zeros(8, 100), 8, e.dt());
    assert!(id.is_identity());
    assert!(id.weights(&e, &WeightOptions::default()).unwrap().is_none());
    let sol = SolutionTriple { y: Field::constant(9, 100, 0.7), ..SolutionTriple::zeros(8, 100) };
    assert_eq!(untransform_solution(sol.clone(), &id), sol);

    let a = 0.4;
    let p = TransformParams::constant(a, 0.0, &e);
    assert_eq!(p.factor(0, 3), 1.0);
    assert!((p.factor(8, 3) - a.exp()).abs() < 1e-14);
    let gen = GeneratorSpec::new(
        AffineQuadratic { b: TimeFn::Constant(a), ..Default::default() },
        TerminalCondition::constant(0.3),
    )
    .with_g(TimeFn::Constant(0.5));
    let tp = transform_generator(&gen, p.clone(), &e, &WeightOptions::default()).unwrap();
    assert!(tp.terminal().iter().all(|x| (x - 0.3 * a.exp()).abs() < 1e-14));
    // ḡ(t) = g e^{-at}: the ζ² coefficient of the transformed driver.
    for i in [0usize, 4, 7] {
        let gbar = tp.driver(i, 0, 0.0, 0.0, 1.0);
        assert!((gbar - 0.5 * (-a * e.grid.time(i)).exp()).abs() < 1e-14);
        // Linear y-part removed.
        assert!(tp.driver(i, 0, 1.0, 0.0, 0.0).abs() < 1e-15);
    }
    let sol = SolutionTriple { y: Field::constant(9, 100, 0.3), ..SolutionTriple::zeros(8, 100) };
    let back = untransform_solution(sol, &p);
    for i in 0..=8 {
        assert!((back.y.get(i, 5) - 0.3 * (-a * e.grid.time(i)).exp()).abs() < 1e-14);
    }
}

#[test]
fn transform_round_trip_matches_direct_solve() {
    // f = 0.3 y + 0.2 v + v²/2: solving the transformed problem must agree
    // with the chain, which performs the same transform internally.
    let e = ens(16, 4000, 12);
    let tc = TerminalCondition::tanh_w1(0.001);
    let gen = GeneratorSpec::new(
        AffineQuadratic { b: TimeFn::Constant(0.3), c: TimeFn::Constant(0.2), gamma_q: 1.0, ..Default::default() },
        tc,
    );
    let opts = SolveOptions::default();
    let params = TransformParams::from_generator(&gen, &e);
    let tp = transform_generator(&gen, params.clone(), &e, &WeightOptions::default()).unwrap();
    let (bar, _) = solve_transformed(&tp, &e, &opts).unwrap();
    let back = untransform_solution(bar, &params);
    let chain = solve_chain(&gen, &e, &opts).unwrap();
    for i in (0..=16).step_by(4) {
        let se = (back.slice_se[i].powi(2) + chain.triple.slice_se[i].powi(2)).sqrt().max(1e-12);
        let dev = back.y.slice(i).iter().zip(chain.triple.y.slice(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 3.0 * se, "slice {i}: {dev} vs {se}");
    }
}

#[test]
fn weighted_apply_f_uses_drift() {
    // f ≡ 0, ξ = W¹_T under the measure with drift λ: Y_0 = λ T.
    let n = 20_000;
    let e = ens(8, n, 13);
    let tc = TerminalCondition {
        shape: crate::model::TerminalShape::ClippedPolynomial {
            load_w1: 1.0,
            load_w2: 0.0,
            coeffs: vec![0.0, 1.0],
            clip: 50.0,
        },
        scale: 1.0,
        offset: 0.0,
    };
    let gen = GeneratorSpec::new(AffineQuadratic::default(), tc);
    let w = girsanov_weights(&e, &Field::constant(8, n, 0.3), Driver::W1, &WeightOptions::default()).unwrap();
    let out = apply_f(&SolutionTriple::zeros(8, n), &gen, &e, Some(&w), &BasisSpec::default()).unwrap();
    assert!((out.y0() - 0.3).abs() < 3.0 * out.y0_se + 0.02, "{} ± {}", out.y0(), out.y0_se);
    let z_mean = out.z.slice(3).iter().sum::<f64>() / n as f64;
    assert!((z_mean - 1.0).abs() < 0.05);
}

#[test]
fn too_many_pieces_is_reported() {
    let e = ens(4, 200, 14);
    let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(1.0));
    let opts = SolveOptions { max_pieces: 10, ..Default::default() };
    match solve_chain(&gen, &e, &opts) {
        Err(Error::TooManyPieces { needed, cap }) => {
            assert_eq!(needed, 320);
            assert_eq!(cap, 10);
        }
        other => panic!("expected TooManyPieces, got {other:?}"),
    }
}

#[test]
fn nan_generator_is_reported() {
    let e = ens(4, 200, 15);
    let gen = GeneratorSpec::new(
        AffineQuadratic { a: TimeFn::Constant(f64::NAN), ..Default::default() },
        TerminalCondition::constant(0.0),
    );
    let prob = SpecProblem::new(&gen, &e, Form::Direct);
    let design = Design::new(&e, &BasisSpec::default()).unwrap();
    let proj = Projector::new(&design, SliceWeights::None, 4).unwrap();
    match sweep(&prob, &e, &proj, &Fields::zeros(4, 200)) {
        Err(Error::GeneratorEvaluation { slice, path }) => assert_eq!((slice, path), (3, 0)),
        other => panic!("expected GeneratorEvaluation, got {other:?}"),
    }
}

#[test]
fn two_piece_split_is_additive() {
    // A terminal just above the threshold solved in two stages agrees with
    // a direct solve of the same terminal (which still contracts).
    let e = ens(16, 4000, 16);
    let tc = TerminalCondition::tanh_w1(0.0035);
    let gen = GeneratorSpec::pure_quadratic(1.0, tc.clone());
    let chain = solve_chain(&gen, &e, &SolveOptions::default()).unwrap();
    assert_eq!(chain.pieces(), 2);
    let (direct, _) = solve_small(&gen, &e, &SolveOptions::default()).unwrap();
    let se = (direct.y0_se.powi(2) + chain.triple.y0_se.powi(2)).sqrt();
    assert!((direct.y0() - chain.triple.y0()).abs() < 3.0 * se + 1e-9);
}
