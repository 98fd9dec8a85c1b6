//! Randomized invariants.

use std::sync::OnceLock;

use memlqr::closedloop::{evolution_apply, FeedbackLaw};
use memlqr::dump::{decode_table, encode};
use memlqr::linalg::{self, Mat, Vector};
use memlqr::model::{
    build_random_stable, parse_problem, scalar_instance, to_problem_file, InitialSpec, KernelSpec, ProblemInstance,
    TimeGrid, Tolerances,
};
use memlqr::openloop::{assemble_e, solve_open_loop, DiscreteInputToState, OpenLoopSolution};
use memlqr::propagator::PropagatorTables;
use memlqr::riccati::{integrate_backward, RiccatiOptions};
use memlqr::stepping::AugmentedState;
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        Just(KernelSpec::Zero),
        (-2.0..2.0f64).prop_map(|value| KernelSpec::Constant { value, matrix: None }),
        (-2.0..2.0f64, 0.1..3.0f64).prop_map(|(amplitude, rate)| KernelSpec::Exponential {
            amplitude,
            rate,
            matrix: None
        }),
    ]
}

fn instance_strategy() -> impl Strategy<Value = ProblemInstance> {
    (1usize..4, 1usize..3, 1usize..40, 0.1..3.0f64, kernel_strategy())
        .prop_flat_map(|(n, m, steps, horizon, kernel)| {
            (
                proptest::collection::vec(-2.0..2.0f64, n * n),
                proptest::collection::vec(-2.0..2.0f64, n * m),
                proptest::collection::vec(-1.0..1.0f64, n * n),
                proptest::collection::vec(-1.0..1.0f64, n),
                Just((n, m, steps, horizon, kernel)),
            )
        })
        .prop_map(|(a, b, c, xi0, (n, m, steps, horizon, kernel))| {
            let c = Mat::from_row_slice(n, n, &c);
            ProblemInstance::new(
                Mat::from_row_slice(n, n, &a),
                Mat::from_row_slice(n, m, &b),
                c.tr_mul(&c),
                &kernel,
                horizon,
                steps,
                InitialSpec::Origin(Vector::from_row_slice(&xi0)),
                Tolerances::default(),
            )
            .unwrap()
        })
}

fn memory_fixture() -> &'static (ProblemInstance, FeedbackLaw) {
    static FIXTURE: OnceLock<(ProblemInstance, FeedbackLaw)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let p = scalar_instance(0.2, 1.0, 1.0, KernelSpec::Constant { value: -1.0, matrix: None }, 1.0, 30).unwrap();
        let sol = integrate_backward(&p, &RiccatiOptions::default()).unwrap();
        let law = FeedbackLaw::from_riccati(&sol, &p);
        (p, law)
    })
}

fn discrete_cost(lop: &DiscreteInputToState, q: &Mat, e: &Vector, u: &Vector) -> f64 {
    let w = e + &lop.l * u;
    let wm = Mat::from_column_slice(w.len(), 1, w.as_slice());
    let um = Mat::from_column_slice(u.len(), 1, u.as_slice());
    w.dot(&lop.weighted_q(q, &wm).column(0)) + u.dot(&lop.weighted_u(&um).column(0))
}

fn stacked(v: &[Vector]) -> Vector {
    Vector::from_iterator(v.iter().map(|x| x.len()).sum(), v.iter().flat_map(|x| x.iter().copied()))
}

fn optimum_fixture() -> &'static (ProblemInstance, PropagatorTables, OpenLoopSolution) {
    static FIXTURE: OnceLock<(ProblemInstance, PropagatorTables, OpenLoopSolution)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let p = build_random_stable(2, 1, 5, 1.0, 24).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        let ol = solve_open_loop(&p, &prop).unwrap();
        (p, prop, ol)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn problem_file_round_trips(p in instance_strategy()) {
        let text = serde_json::to_string(&to_problem_file(&p)).unwrap();
        let back = parse_problem(&text).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn table_dump_round_trips(n in 1usize..4, steps in 0usize..50, step in 1e-6..10.0f64,
                              data in proptest::collection::vec(-1e6..1e6f64, 0..60)) {
        let blocks: Vec<Mat> = data.chunks_exact(n * n).map(|c| Mat::from_row_slice(n, n, c)).collect();
        let bytes = encode(n, steps, step, &blocks);
        let d = decode_table(&bytes).unwrap();
        prop_assert_eq!((d.n, d.steps, d.step), (n, steps, step));
        prop_assert_eq!(d.blocks, blocks);
        prop_assert!(decode_table(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_table(&bytes);
        let mut framed = b"MLQR1".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_table(&framed);
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,200}") {
        let _ = parse_problem(&text);
    }

    #[test]
    fn trapezoid_weights_integrate_constants(steps in 1usize..200, horizon in 0.01..10.0f64,
                                             lo in 0usize..200, len in 0usize..200) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let lo = lo.min(steps);
        let hi = (lo + len).min(steps);
        let sum: f64 = grid.trap_weights(lo, hi).iter().sum();
        prop_assert!((sum - (grid.node(hi) - grid.node(lo))).abs() < 1e-12 * horizon);
    }

    #[test]
    fn closed_loop_evolution_is_linear(x in proptest::collection::vec(-1.0..1.0f64, 2),
                                       y in proptest::collection::vec(-1.0..1.0f64, 2),
                                       alpha in -2.0..2.0f64, beta in -2.0..2.0f64, end in 0usize..=30) {
        let (p, law) = memory_fixture();
        let state = |v: &[f64]| AugmentedState::new(0, Vector::from_element(1, v[0]), vec![Vector::from_element(1, v[1])]).unwrap();
        let (sx, sy) = (state(&x), state(&y));
        let lhs = evolution_apply(p, law, end, &sx.combine(alpha, &sy, beta)).unwrap();
        let rhs = evolution_apply(p, law, end, &sx).unwrap().combine(alpha, &evolution_apply(p, law, end, &sy).unwrap(), beta);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn open_loop_optimum_is_a_minimum(v in proptest::collection::vec(-1.0..1.0f64, 25), eps in 1e-3..1.0f64) {
        let (p, prop, ol) = optimum_fixture();
        let lop = DiscreteInputToState::assemble(prop, &p.b, ol.tau);
        let e = assemble_e(prop, p);
        let u = stacked(&ol.u_hat);
        let best = discrete_cost(&lop, &p.q, &e, &u);
        prop_assert!((best - ol.cost).abs() < 1e-12 * (1.0 + ol.cost));
        let shifted = &u + Vector::from_row_slice(&v) * eps;
        prop_assert!(discrete_cost(&lop, &p.q, &e, &shifted) >= best - 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn riccati_p0_stays_symmetric_and_nonnegative(seed in 0u64..1000, n in 1usize..4, m in 1usize..3) {
        let p = build_random_stable(n, m, seed, 1.0, 30).unwrap();
        let sol = integrate_backward(&p, &RiccatiOptions::default()).unwrap();
        for p0 in &sol.p0 {
            prop_assert!(linalg::symmetry_residual(p0) <= 1e-8 * (1.0 + linalg::max_abs(p0)));
            prop_assert!(linalg::min_sym_eigenvalue(p0) >= -1e-8 * (1.0 + linalg::max_abs(p0)));
        }
        prop_assert!(sol.drift.warnings.is_empty());
    }
}
