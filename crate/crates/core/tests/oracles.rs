//! Closed-form references, checked before any cross-route comparison.

use memlqr::linalg::{self, Mat, Vector};
use memlqr::model::{scalar_instance, InitialSpec, KernelSpec, MatrixLiteral, ProblemInstance, Tolerances};
use memlqr::openloop::solve_open_loop;
use memlqr::propagator::PropagatorTables;
use memlqr::riccati::{integrate_backward, Checkpoints, RiccatiOptions, Scheme};
use memlqr::synthesis::NodeOperators;
use memlqr::verify;

fn constant(value: f64) -> KernelSpec {
    KernelSpec::Constant { value, matrix: None }
}

fn max_err(p: &ProblemInstance, f: impl Fn(usize) -> f64, exact: impl Fn(f64) -> f64) -> f64 {
    (0..=p.grid.steps())
        .map(|i| (f(i) - exact(p.grid.node(i))).abs())
        .fold(0.0, f64::max)
}

#[test]
fn propagator_of_memory_oscillator_is_cosine() {
    // A = 0, K ≡ -1: w'' = -w, so F(t, 0) = cos t.
    let err = |steps| {
        let p = scalar_instance(0.0, 1.0, 1.0, constant(-1.0), 1.0, steps).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        max_err(&p, |i| prop.f(i, 0)[(0, 0)], f64::cos)
    };
    let (coarse, fine) = (err(100), err(200));
    assert!(fine < 1e-4, "{fine}");
    assert!((3.5..4.5).contains(&(coarse / fine)), "{}", coarse / fine);
}

#[test]
fn mu_with_drift_matches_integral() {
    let (a, c) = (-0.7, 0.3);
    let err = |steps| {
        let p = scalar_instance(a, 1.0, 1.0, constant(c), 1.0, steps).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        max_err(&p, |i| prop.mu(i)[(0, 0)], |t| c * ((a * t).exp() - 1.0) / a)
    };
    let (coarse, fine) = (err(50), err(100));
    assert!(fine < 1e-5, "{fine}");
    assert!((3.5..4.5).contains(&(coarse / fine)));
}

#[test]
fn resolvent_of_negative_kernel_is_sine() {
    let p = scalar_instance(0.0, 1.0, 1.0, constant(-1.0), 1.0, 200).unwrap();
    let prop = PropagatorTables::build(&p).unwrap();
    assert!(max_err(&p, |i| prop.r(i)[(0, 0)], f64::sin) < 1e-4);
}

#[test]
fn memoryless_riccati_with_drift_matches_closed_form() {
    // p(s) = q sinh(γs) / (γ cosh(γs) - a sinh(γs)), γ = √(a² + b²q), s = T - t.
    let (a, b, q) = (0.4, 1.5, 2.0);
    let p = scalar_instance(a, b, q, KernelSpec::Zero, 1.0, 200).unwrap();
    let sol = integrate_backward(&p, &RiccatiOptions::default()).unwrap();
    let g = (a * a + b * b * q).sqrt();
    let exact = |t: f64| {
        let s = 1.0 - t;
        q * (g * s).sinh() / (g * (g * s).cosh() - a * (g * s).sinh())
    };
    let err = max_err(&p, |i| sol.p0[i][(0, 0)], exact);
    assert!(err < 1e-4, "{err}");
    let reference = verify::standard_riccati(&p);
    assert!((reference[0][(0, 0)] - exact(0.0)).abs() < 1e-13);
    let prop = PropagatorTables::build(&p).unwrap();
    let ol = solve_open_loop(&p, &prop).unwrap();
    assert!((ol.cost - exact(0.0)).abs() < 1e-3);
}

#[test]
fn matrix_reference_riccati_matches_scalar_blocks() {
    // Decoupled diagonal 2×2 system: each block follows the scalar formula.
    let a = Mat::from_row_slice(2, 2, &[0.4, 0.0, 0.0, -1.0]);
    let b = Mat::identity(2, 2);
    let q = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
    let p = ProblemInstance::new(
        a,
        b,
        q,
        &KernelSpec::Zero,
        1.0,
        50,
        InitialSpec::Origin(Vector::from_element(2, 1.0)),
        Tolerances::default(),
    )
    .unwrap();
    let reference = verify::standard_riccati(&p);
    for (k, (a, q)) in [(0.4, 1.0), (-1.0, 3.0)].into_iter().enumerate() {
        let s = scalar_instance(a, 1.0, q, KernelSpec::Zero, 1.0, 50).unwrap();
        let scalar = verify::standard_riccati(&s);
        for i in 0..=50 {
            assert!((reference[i][(k, k)] - scalar[i][(0, 0)]).abs() < 1e-10);
        }
        assert!(reference[0][(0, 1)].abs() < 1e-14);
    }
}

#[test]
fn commuting_matrix_kernel_routes_agree() {
    let a = Mat::from_row_slice(2, 2, &[-1.0, 0.5, 0.5, -2.0]);
    let kernel = KernelSpec::Exponential {
        amplitude: -0.8,
        rate: 1.0,
        matrix: Some(MatrixLiteral::Flat(vec![0.0, 0.5, 0.5, -1.0])),
    };
    let p = ProblemInstance::new(
        a,
        Mat::from_row_slice(2, 1, &[1.0, 0.5]),
        Mat::identity(2, 2),
        &kernel,
        1.0,
        100,
        InitialSpec::Origin(Vector::from_row_slice(&[1.0, -0.5])),
        Tolerances::default(),
    )
    .unwrap();
    let prop = PropagatorTables::build(&p).unwrap();
    let opts = RiccatiOptions {
        scheme: Scheme::Heun,
        checkpoints: Checkpoints::Nodes(vec![50]),
        ..RiccatiOptions::default()
    };
    let sol = integrate_backward(&p, &opts).unwrap();
    for t in [0, 50] {
        let ops = NodeOperators::build(&p, &prop, t).unwrap().cost_ops_reduced();
        let tol = 1e-3 * (1.0 + linalg::max_abs(&ops.p0()));
        assert!(linalg::max_abs_diff(&sol.p0[t], &ops.p0()) < tol);
        for j in 0..=t {
            assert!(linalg::max_abs_diff(&sol.p1[t][j], &ops.p1(j)) < tol);
        }
        let slice = sol.p2_at(t).unwrap();
        for j in (0..=t).step_by(7) {
            for k in (0..=t).step_by(5) {
                assert!(linalg::max_abs_diff(slice.get(j, k), &ops.p2(j, k)) < tol);
            }
        }
    }
}
