//! Identity suites. Every check is a row carrying its measured value and its
//! tolerance; a suite passes when every row does.
//!
//! Tolerances come in three kinds:
//! - roundoff rows, fixed multiples of unit roundoff scaled by the table size;
//! - finite-difference rows, `h²ρ³(1 + ‖X‖)` with `ρ = 1 + ‖A‖∞ + √‖K‖∞`;
//! - scheme rows, a base value quoted at `h = 0.005` and scaled by
//!   `max(1, (h / 0.005)^p)` on coarser grids, `p` the scheme order.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::closedloop::{self, FeedbackLaw};
use crate::linalg::{self, Mat, Vector};
use crate::model::{InitialData, ProblemInstance};
use crate::openloop::{self, DiscreteInputToState, OpenLoopSolution};
use crate::propagator::{self, PropagatorTables};
use crate::riccati::{self, Checkpoints, RiccatiOptions, RiccatiSolution, Scheme};
use crate::stepping::{AugmentedState, Stepper, Trajectory};
use crate::synthesis::{self, CostOperators, NodeOperators};
use crate::Result;

/// Step at which scheme-row base tolerances are quoted.
pub const REFERENCE_STEP: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value` is finite and at most `tolerance`.
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value.is_finite() && value <= tolerance,
        }
    }
}

/// `1 + ‖A‖∞ + √(max_i ‖K_i‖∞)`, a rate bounding time derivatives of the tables.
pub fn rate(instance: &ProblemInstance) -> f64 {
    let kernel = (0..instance.kernel.len())
        .map(|i| inf_norm(&instance.kernel.block(i)))
        .fold(0.0, f64::max);
    1.0 + inf_norm(&instance.a) + kernel.sqrt()
}

fn inf_norm(m: &Mat) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn fd_tolerance(h: f64, rho: f64, scale: f64) -> f64 {
    h * h * rho.powi(3) * (1.0 + scale)
}

pub fn scheme_tolerance(base: f64, h: f64, order: f64) -> f64 {
    base * (h / REFERENCE_STEP).powf(order).max(1.0)
}

/// Tolerance of the weak-form residual of a scheme of order `p`.
pub fn dre_tolerance(h: f64, rho: f64, order: f64, scale: f64) -> f64 {
    40.0 * h.powf(order) * rho.powf(order + 1.0) * (1.0 + scale)
}

fn max_over<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    it.into_iter().fold(0.0, f64::max)
}

/// `τ`, the midpoint of `[τ, N]` and the three-quarter point, deduplicated.
pub fn sample_nodes(instance: &ProblemInstance) -> Vec<usize> {
    let tau = instance.init.tau_index();
    let steps = instance.grid.steps();
    let mut nodes = vec![tau, tau + (steps - tau) / 2, tau + 3 * (steps - tau) / 4];
    nodes.dedup();
    nodes
}

// ---------------------------------------------------------------------------
// Propagator tables

/// Identities holding exactly or to roundoff.
pub fn propagator_checks(instance: &ProblemInstance, prop: &PropagatorTables) -> Vec<Check> {
    let n = instance.n;
    let steps = instance.grid.steps();
    let eye = Mat::identity(n, n);
    let r_scale = 1.0 + prop.resolvent_peak;
    let mut out = vec![
        Check::new("propagator.semigroup_origin", linalg::max_abs_diff(prop.e(0), &eye), 0.0),
        Check::new("propagator.mu_origin", linalg::max_abs(prop.mu(0)), 0.0),
        Check::new("propagator.resolvent_origin", linalg::max_abs(prop.r(0)), 0.0),
        Check::new(
            "propagator.f_diagonal",
            max_over((0..=steps).map(|i| linalg::max_abs_diff(prop.f(i, i), &eye))),
            0.0,
        ),
        Check::new(
            "propagator.history_vanishes_at_start",
            max_over((0..=steps).flat_map(|tau| {
                (0..=tau).map(move |j| linalg::max_abs(prop.g(tau, j, tau)).max(linalg::max_abs(prop.m(tau, j, tau))))
            })),
            0.0,
        ),
        Check::new(
            "propagator.m_at_sigma_tau",
            max_over((0..=steps).map(|a| linalg::max_abs(&(prop.m(a, 0, 0) + prop.r(a))))),
            1e-10 * r_scale,
        ),
        Check::new(
            "propagator.volterra_residual",
            propagator::volterra_residual(&prop.mu, &prop.resolvent, &prop.grid),
            1e-12 * r_scale,
        ),
    ];
    let semigroup = max_over((0..=steps).step_by((steps / 8).max(1)).flat_map(|i| {
        (0..=steps - i).step_by((steps / 8).max(1)).map(move |j| {
            let e = prop.e(i + j);
            linalg::max_abs_diff(e, &(prop.e(i) * prop.e(j))) / (1.0 + linalg::max_abs(e))
        })
    }));
    out.push(Check::new("propagator.semigroup_property", semigroup, 1e-12 * steps as f64));
    out
}

/// Centered-difference residuals of the derivative identities
///
/// ```text
/// μ'(t) = K(t) + μ(t)A
/// R'(t) = -K(t) + R(t)A + ∫_0^t K(t - σ)R(σ) dσ
/// ∂τF(t, τ) = -F(t, τ)A + R(t - τ)
/// ∂τM(t, σ, τ) = -F(t, τ)K(τ - σ)
/// ```
/// at interior nodes.
pub fn derivative_checks(instance: &ProblemInstance, prop: &PropagatorTables) -> Vec<Check> {
    let steps = instance.grid.steps();
    let h = instance.grid.step();
    let rho = rate(instance);
    let a = &instance.a;
    let kernel: Vec<Mat> = (0..=steps).map(|i| instance.kernel.block(i)).collect();
    let table_max = |t: &[Mat]| max_over(t.iter().map(linalg::max_abs));
    let centered = |t: &[Mat], i: usize| (&t[i + 1] - &t[i - 1]) / (2.0 * h);

    let mu = &prop.mu.blocks;
    let mu_res = max_over((1..steps).map(|i| linalg::max_abs(&(centered(mu, i) - &kernel[i] - &mu[i] * a))));

    let r = &prop.resolvent.blocks;
    let kr = propagator::convolve(&kernel, r, &prop.grid);
    let r_res = max_over((1..steps).map(|i| linalg::max_abs(&(centered(r, i) + &kernel[i] - &r[i] * a - &kr[i]))));

    // F(t_i, t_j) depends on i - j only.
    let lags = &prop.f.lags;
    let f_res = max_over((1..steps).map(|d| {
        let dtau = (&lags[d - 1] - &lags[d + 1]) / (2.0 * h);
        linalg::max_abs(&(dtau + &lags[d] * a - &r[d]))
    }));

    // M(t_i, s_j, t_τ) with a = i - τ ≥ 1 and b = τ - j ≥ 1.
    let mut m_res = 0.0_f64;
    let mut m_scale = 0.0_f64;
    if !instance.kernel.is_zero() {
        for da in 1..steps {
            for db in 1..=steps - da {
                let (i, j, tau) = (da + db, 0, db);
                let up = prop.m(i, j, tau + 1);
                let down = prop.m(i, j, tau - 1);
                let dtau = (up - down) / (2.0 * h);
                m_scale = m_scale.max(linalg::max_abs(prop.m(i, j, tau)));
                m_res = m_res.max(linalg::max_abs(&(dtau + &lags[da] * &kernel[db])));
            }
        }
    }
    vec![
        Check::new("propagator.mu_derivative", mu_res, fd_tolerance(h, rho, table_max(mu))),
        Check::new("propagator.resolvent_derivative", r_res, fd_tolerance(h, rho, table_max(r))),
        Check::new("propagator.f_tau_derivative", f_res, fd_tolerance(h, rho, table_max(lags))),
        Check::new("propagator.m_tau_derivative", m_res, fd_tolerance(h, rho, m_scale)),
    ]
}

// ---------------------------------------------------------------------------
// Open loop

pub fn openloop_checks(instance: &ProblemInstance, prop: &PropagatorTables, ol: &OpenLoopSolution, seed: u64) -> Vec<Check> {
    let h = instance.grid.step();
    let rho = rate(instance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lop = DiscreteInputToState::assemble(prop, &instance.b, ol.tau);
    let size = ol.u_hat.len() * instance.m;
    let probes: Vec<Vector> = (0..8)
        .map(|_| Vector::from_fn(size, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let margin = if size == 0 {
        0.0
    } else {
        openloop::coercivity_margin(&lop, &instance.q, &probes)
    };
    let bound = openloop::coercivity_bound(&lop);
    let direction: Vec<Vector> = ol
        .u_hat
        .iter()
        .map(|_| Vector::from_fn(instance.m, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let gradient = openloop::discrete_gradient_probe(instance, prop, ol, &direction);
    let free = openloop::free_response_cost(instance, prop);
    let w_scale = max_over(ol.w_hat.iter().map(linalg::max_abs_vec));
    let replay_gap = match openloop::replay(instance, ol, Stepper::Trapezoid) {
        Ok(traj) => max_over(ol.w_hat.iter().zip(&traj.states).map(|(a, b)| linalg::max_abs_diff_vec(a, b))),
        Err(_) => f64::INFINITY,
    };
    let scale = 1.0 + ol.cost;
    vec![
        Check::new("openloop.normal_equation_residual", ol.residual, 1e-10 * (1.0 + max_over(ol.u_hat.iter().map(linalg::max_abs_vec)))),
        Check::new("openloop.uniqueness", ol.uniqueness_gap, 1e-10),
        Check::new("openloop.coercivity", (-margin).max(0.0), 1e-12 * (1.0 + bound)),
        Check::new("openloop.gradient_vanishes", gradient.abs(), 1e-10 * scale),
        Check::new("openloop.cost_below_free_response", (ol.cost - free).max(0.0), 1e-12 * scale),
        Check::new("openloop.representation_vs_stepping", replay_gap, fd_tolerance(h, rho, w_scale)),
    ]
}

// ---------------------------------------------------------------------------
// Synthesis

/// Operators at the sample nodes and the rows they support.
pub fn synthesis_checks(
    instance: &ProblemInstance,
    ol: &OpenLoopSolution,
    ops: &[NodeOperators],
    seed: u64,
) -> Vec<Check> {
    let h = instance.grid.step();
    let mut key = [0.0_f64; 3];
    let mut key_scale = 0.0_f64;
    let mut adjoint = [0.0_f64; 4];
    let mut adjoint_scale = 0.0_f64;
    let mut z_route = 0.0_f64;
    let mut p2_sym = 0.0_f64;
    for op in ops {
        let def = op.cost_ops_definitional();
        key_scale = key_scale.max(def.norm());
        for (k, r) in key.iter_mut().zip(op.key_lemma_residuals()) {
            *k = k.max(r);
        }
        adjoint_scale = adjoint_scale
            .max(linalg::max_abs(&op.psi))
            .max(linalg::max_abs(&op.z));
        for (k, r) in adjoint.iter_mut().zip(op.adjoint_residuals(seed ^ op.t as u64)) {
            *k = k.max(r);
        }
        z_route = z_route.max(linalg::max_abs_diff(&op.z, &op.z_via_projection()));
        p2_sym = p2_sym.max(op.cost_ops_reduced().p2_symmetry_residual() / (1.0 + def.norm()));
    }
    let key_tol = 1e-8 * (1.0 + key_scale);
    let adj_tol = 1e-9 * (1.0 + adjoint_scale);
    let mut out = vec![
        Check::new("synthesis.key_lemma_p0", key[0], key_tol),
        Check::new("synthesis.key_lemma_p1", key[1], key_tol),
        Check::new("synthesis.key_lemma_p2", key[2], key_tol),
        Check::new("synthesis.adjoint_psi1", adjoint[0], adj_tol),
        Check::new("synthesis.adjoint_psi2", adjoint[1], adj_tol),
        Check::new("synthesis.adjoint_z1", adjoint[2], adj_tol),
        Check::new("synthesis.adjoint_z2", adjoint[3], adj_tol),
        Check::new("synthesis.z_routes", z_route, 1e-10 * (1.0 + adjoint_scale)),
        Check::new("synthesis.p2_symmetry", p2_sym, 1e-10),
    ];

    if let Some(first) = ops.iter().find(|op| op.t == ol.tau) {
        let x0 = AugmentedState::initial(instance);
        let u = first.control_from_psi(&x0);
        let w = first.state_from_z(&x0);
        let u_scale = 1.0 + ol.max_control();
        let w_scale = 1.0 + max_over(ol.w_hat.iter().map(linalg::max_abs_vec));
        let u_gap = max_over(u.iter().zip(&ol.u_hat).map(|(a, b)| linalg::max_abs_diff_vec(a, b)));
        let w_gap = max_over(w.iter().zip(&ol.w_hat).map(|(a, b)| linalg::max_abs_diff_vec(a, b)));
        let cost = synthesis::optimal_cost_via_p(&first.cost_ops_reduced(), &x0, h);
        out.push(Check::new("synthesis.psi_reproduces_control", u_gap, 1e-10 * u_scale));
        out.push(Check::new("synthesis.z_reproduces_state", w_gap, 1e-9 * w_scale));
        out.push(Check::new("synthesis.cost_quadratic_form", (cost - ol.cost).abs(), 1e-8 * (1.0 + ol.cost)));
    }

    // Starting later with zero history is a shorter problem, so P0 decreases.
    let mut by_node: Vec<(usize, Mat)> = ops.iter().map(|op| (op.t, op.cost_ops_first_row().p0())).collect();
    by_node.sort_by_key(|(t, _)| *t);
    let mono = max_over(by_node.windows(2).map(|w| {
        let scale = 1.0 + linalg::max_abs(&w[0].1);
        (-linalg::min_sym_eigenvalue(&(&w[0].1 - &w[1].1))).max(0.0) / scale
    }));
    out.push(Check::new("synthesis.p0_monotone", mono, 1e-10));
    out
}

// ---------------------------------------------------------------------------
// Riccati

/// Largest `P0`, `P1` and `P2` block magnitude of a Riccati solution.
pub fn riccati_scale(sol: &RiccatiSolution) -> f64 {
    max_over(sol.p0.iter().map(linalg::max_abs))
        .max(sol.max_p1())
        .max(sol.max_p2())
}

/// Riccati tables against synthesis operators at the same nodes, plus
/// structural drift, terminal values and weak-form residuals.
pub fn riccati_checks(
    instance: &ProblemInstance,
    sol: &RiccatiSolution,
    synth: &[CostOperators],
    ol: &OpenLoopSolution,
    p2_nodes: &[usize],
) -> Vec<Check> {
    let h = instance.grid.step();
    let order = sol.scheme.order();
    let rho = rate(instance);
    let steps = sol.steps();
    let mut p0_gap = 0.0_f64;
    let mut p1_gap = 0.0_f64;
    let mut p2_gap = 0.0_f64;
    let mut scale = 0.0_f64;
    for ops in synth {
        let i = ops.t;
        scale = scale.max(linalg::max_abs(&ops.p0()));
        p0_gap = p0_gap.max(linalg::max_abs_diff(&sol.p0[i], &ops.p0()));
        for (j, p1) in sol.p1[i].iter().enumerate() {
            p1_gap = p1_gap.max(linalg::max_abs_diff(p1, &ops.p1(j)));
        }
        if let (Some(slice), true) = (sol.p2_at(i), ops.is_full()) {
            for j in 0..=i {
                for k in 0..=i {
                    p2_gap = p2_gap.max(linalg::max_abs_diff(slice.get(j, k), &ops.p2(j, k)));
                }
            }
        }
    }
    let cross_tol = scheme_tolerance(1e-3 * (1.0 + scale), h, order);
    let mut out = vec![
        Check::new("riccati.cross_route_p0", p0_gap, cross_tol),
        Check::new("riccati.cross_route_p1", p1_gap, cross_tol),
        Check::new("riccati.cross_route_p2", p2_gap, cross_tol),
    ];

    let tau = instance.init.tau_index();
    let form = riccati::assemble_big_p(sol, tau).map(|big| {
        let x0 = AugmentedState::initial(instance);
        riccati::quadratic_form(&big, &x0.current, &x0.history)
    });
    out.push(Check::new(
        "riccati.cost_quadratic_form",
        form.map(|f| (f - ol.cost).abs()).unwrap_or(f64::INFINITY),
        scheme_tolerance(1e-3 * (1.0 + ol.cost), h, order),
    ));

    out.push(Check::new("riccati.p0_symmetry_drift", sol.drift.p0_symmetry, 1e-8));
    out.push(Check::new("riccati.p0_negativity_drift", sol.drift.p0_negativity, 1e-8));
    out.push(Check::new("riccati.p2_symmetry_drift", sol.drift.p2_symmetry, 1e-8));
    let terminal = linalg::max_abs(&sol.p0[steps])
        .max(max_over(sol.p1[steps].iter().map(linalg::max_abs)))
        .max(max_over(sol.p2_diag[steps].iter().map(linalg::max_abs)))
        .max(sol.p2_at(steps).map(|s| s.norm()).unwrap_or(0.0));
    out.push(Check::new("riccati.terminal_zero", terminal, 0.0));

    let p_scale = riccati_scale(sol);
    let dre = riccati::dre_residual(instance, sol, p2_nodes);
    let tol = dre_tolerance(h, rho, order, p_scale);
    out.push(Check::new("riccati.dre_residual_p0", dre.p0, tol));
    out.push(Check::new("riccati.dre_residual_p1", dre.p1, tol));
    if let Some(p2) = dre.p2 {
        out.push(Check::new("riccati.dre_residual_p2", p2, tol));
    }
    out
}

/// `‖ΔP0(0)‖ / ε` for the terminal perturbations `P0(T) = εI` with `ε = 1e-6`
/// and `1e-4` should agree: the march responds linearly to its terminal data.
pub fn lipschitz_check(instance: &ProblemInstance, base: &RiccatiSolution) -> Result<Check> {
    let response = |eps: f64| -> Result<f64> {
        let opts = RiccatiOptions {
            scheme: base.scheme,
            terminal_perturbation: eps,
            ..RiccatiOptions::default()
        };
        let sol = riccati::integrate_backward(instance, &opts)?;
        Ok(linalg::max_abs_diff(&sol.p0[0], &base.p0[0]) / eps)
    };
    let small = response(1e-6)?;
    let large = response(1e-4)?;
    Ok(Check::new("riccati.terminal_lipschitz", (large - small).abs() / (1.0 + small), 1e-2))
}

// ---------------------------------------------------------------------------
// Memoryless reduction

/// `P0` of the standard Riccati equation `P' = -(AᵀP + PA + Q - PBBᵀP)`,
/// `P(T) = 0`, at every node: closed form for scalars, fine RK4 otherwise.
pub fn standard_riccati(instance: &ProblemInstance) -> Vec<Mat> {
    let grid = &instance.grid;
    let steps = grid.steps();
    let (a, b, q) = (&instance.a, &instance.b, &instance.q);
    if instance.n == 1 {
        let (a, bb, q) = (a[(0, 0)], b.iter().map(|x| x * x).sum::<f64>(), q[(0, 0)]);
        let g = (a * a + bb * q).sqrt();
        return (0..=steps)
            .map(|i| {
                let s = grid.horizon() - grid.node(i);
                let p = if g == 0.0 {
                    q * s
                } else {
                    q * (g * s).sinh() / (g * (g * s).cosh() - a * (g * s).sinh())
                };
                Mat::from_element(1, 1, p)
            })
            .collect();
    }
    let bbt = b * b.transpose();
    let f = |p: &Mat| -> Mat { a.transpose() * p + p * a + q - p * &bbt * p };
    const SUB: usize = 20;
    let dt = grid.step() / SUB as f64;
    let mut p = Mat::zeros(instance.n, instance.n);
    let mut out = vec![p.clone(); steps + 1];
    for i in (0..steps).rev() {
        for _ in 0..SUB {
            let k1 = f(&p);
            let k2 = f(&(&p + &k1 * (0.5 * dt)));
            let k3 = f(&(&p + &k2 * (0.5 * dt)));
            let k4 = f(&(&p + &k3 * dt));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        out[i] = p.clone();
    }
    out
}

/// With `K ≡ 0`: `P1` and `P2` vanish, and `P0` and the cost follow the
/// standard Riccati equation.
pub fn memoryless_checks(instance: &ProblemInstance, sol: &RiccatiSolution, ol: &OpenLoopSolution) -> Vec<Check> {
    let h = instance.grid.step();
    let order = sol.scheme.order();
    let reference = standard_riccati(instance);
    let scale = max_over(reference.iter().map(linalg::max_abs));
    let p0_gap = max_over(sol.p0.iter().zip(&reference).map(|(a, b)| linalg::max_abs_diff(a, b)));
    let p2 = sol.max_p2().max(max_over(sol.p2_diag.iter().flatten().map(linalg::max_abs)));
    let tau = instance.init.tau_index();
    let xi0 = instance.init.xi0();
    let cost = xi0.dot(&(&reference[tau] * xi0));
    vec![
        Check::new("memoryless.p1_zero", sol.max_p1(), 1e-12),
        Check::new("memoryless.p2_zero", p2, 1e-12),
        Check::new("memoryless.p0_reference", p0_gap, scheme_tolerance(5e-4 * (1.0 + scale), h, order)),
        Check::new("memoryless.cost_reference", (ol.cost - cost).abs(), 1e-3 * (1.0 + cost) * (h / REFERENCE_STEP).powi(2).max(1.0)),
    ]
}

// ---------------------------------------------------------------------------
// Closed loop

/// Open-vs-closed agreement, value consistency, composition and linearity of
/// the evolution map, and the transition property of the open-loop optimum.
pub fn closedloop_checks(
    instance: &ProblemInstance,
    prop: &PropagatorTables,
    ol: &OpenLoopSolution,
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    traj: &Trajectory,
    seed: u64,
) -> Result<Vec<Check>> {
    let h = instance.grid.step();
    let order = sol.scheme.order();
    let steps = instance.grid.steps();
    let tau = instance.init.tau_index();
    let mid = tau + (steps - tau) / 2;
    let u_scale = ol.max_control();
    let mut out = vec![
        Check::new(
            "closedloop.control_gap",
            closedloop::control_gap(&traj.controls, &ol.u_hat),
            5e-3 * (1.0 + u_scale) * (h / REFERENCE_STEP).max(1.0),
        ),
        Check::new(
            "closedloop.cost_gap",
            (traj.cost - ol.cost).abs(),
            scheme_tolerance(1e-3 * (1.0 + ol.cost), h, order),
        ),
    ];
    if sol.p2_at(mid).is_some() {
        let (gap, to_go) = closedloop::value_consistency(instance, law, sol, mid)?;
        out.push(Check::new("closedloop.value_consistency", gap, scheme_tolerance(1e-3 * (1.0 + to_go), h, order)));
    }

    let x0 = AugmentedState::initial(instance);
    let direct = closedloop::evolution_apply(instance, law, steps, &x0)?;
    let halfway = closedloop::evolution_apply(instance, law, mid, &x0)?;
    let composed = closedloop::evolution_apply(instance, law, steps, &halfway)?;
    out.push(Check::new("closedloop.composition", direct.max_abs_diff(&composed), 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_state = || {
        let v = |rng: &mut ChaCha8Rng| Vector::from_fn(instance.n, |_, _| rng.gen_range(-1.0..1.0));
        let current = v(&mut rng);
        let history = (0..=tau).map(|_| v(&mut rng)).collect();
        AugmentedState { node: tau, current, history }
    };
    let (x, y) = (random_state(), random_state());
    let (alpha, beta) = (0.7, -1.3);
    let lhs = closedloop::evolution_apply(instance, law, mid, &x.combine(alpha, &y, beta))?;
    let px = closedloop::evolution_apply(instance, law, mid, &x)?;
    let py = closedloop::evolution_apply(instance, law, mid, &y)?;
    let rhs = px.combine(alpha, &py, beta);
    let lin_scale = 1.0 + max_over(rhs.history.iter().chain([&rhs.current]).map(linalg::max_abs_vec));
    out.push(Check::new("closedloop.linearity", lhs.max_abs_diff(&rhs), 1e-12 * lin_scale));

    if mid > tau {
        let (w_gap, u_gap, _) = transition_gaps(instance, prop, ol, mid)?;
        out.push(Check::new("openloop.transition_state", w_gap, 10.0 * h * h));
        out.push(Check::new("openloop.transition_control", u_gap, 10.0 * h * h));
    }
    Ok(out)
}

/// Re-solve the open-loop problem from `X(t1)` along the optimum. Returns the
/// largest state gap on `[t1, T]`, the largest control gap on `(t1, T]` and
/// the control gap at `t1` itself, where the discrete optimum of the restarted
/// problem carries its first-order endpoint error.
pub fn transition_gaps(
    instance: &ProblemInstance,
    prop: &PropagatorTables,
    ol: &OpenLoopSolution,
    t1: usize,
) -> Result<(f64, f64, f64)> {
    let x1 = synthesis::augmented_along(instance, ol, t1);
    let init = InitialData::new(&instance.grid, instance.grid.node(t1), x1.current, x1.history)?;
    let restarted = instance.with_initial(init)?;
    let tail = openloop::solve_open_loop(&restarted, prop)?;
    let steps = instance.grid.steps();
    let w_gap = max_over((t1..=steps).map(|i| linalg::max_abs_diff_vec(ol.state(i), tail.state(i))));
    let u_gap = max_over((t1 + 1..=steps).map(|i| linalg::max_abs_diff_vec(ol.control(i), tail.control(i))));
    let u_start = linalg::max_abs_diff_vec(ol.control(t1), tail.control(t1));
    Ok((w_gap, u_gap, u_start))
}

// ---------------------------------------------------------------------------
// Full suite

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Heun,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Suite {
    pub checks: Vec<Check>,
    pub scalars: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    /// Seconds per phase, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push((phase.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Every suite on one instance.
pub fn run_suite(instance: &ProblemInstance, options: &SuiteOptions) -> Result<Suite> {
    instance.validate()?;
    let mut suite = Suite::default();
    let seed = options.seed;
    let prop = suite.timed("propagators", || PropagatorTables::build(instance))?;
    if prop.resolvent_flagged() {
        suite
            .warnings
            .push(format!("resolvent grows to {:.3e}", prop.resolvent_peak));
    }
    let mut checks = propagator_checks(instance, &prop);
    checks.extend(suite.timed("derivatives", || derivative_checks(instance, &prop)));

    let ol = suite.timed("openloop", || openloop::solve_open_loop(instance, &prop))?;
    checks.extend(openloop_checks(instance, &prop, &ol, seed));

    let nodes = sample_nodes(instance);
    let ops = suite.timed("synthesis", || {
        nodes
            .iter()
            .map(|&t| NodeOperators::build(instance, &prop, t))
            .collect::<Result<Vec<_>>>()
    })?;
    checks.extend(synthesis_checks(instance, &ol, &ops, seed));
    let synth: Vec<CostOperators> = ops.iter().map(NodeOperators::cost_ops_reduced).collect();
    drop(ops);

    let steps = instance.grid.steps();
    let p2_nodes: Vec<usize> = nodes.iter().copied().filter(|&i| i >= 1 && i + 2 <= steps).collect();
    let ric_opts = RiccatiOptions {
        scheme: options.scheme,
        checkpoints: Checkpoints::Nodes(nodes.clone()),
        residual_nodes: p2_nodes.clone(),
        ..RiccatiOptions::default()
    };
    let sol = suite.timed("riccati", || riccati::integrate_backward(instance, &ric_opts))?;
    suite.warnings.extend(sol.drift.warnings.iter().cloned());
    checks.extend(riccati_checks(instance, &sol, &synth, &ol, &p2_nodes));
    checks.push(suite.timed("lipschitz", || lipschitz_check(instance, &sol))?);
    if instance.kernel.is_zero() {
        checks.extend(memoryless_checks(instance, &sol, &ol));
    }

    let law = FeedbackLaw::from_riccati(&sol, instance);
    let traj = suite.timed("closedloop", || closedloop::simulate_feedback(instance, &law))?;
    checks.extend(suite.timed("transition", || {
        closedloop_checks(instance, &prop, &ol, &sol, &law, &traj, seed)
    })?);
    let feedback_nodes: Vec<usize> = (0..=8).map(|k| ol.tau + k * (steps - ol.tau) / 8).collect();
    let feedback = suite.timed("feedback", || {
        synthesis::feedback_consistency(instance, &prop, &ol, &feedback_nodes)
    })?;
    let h = instance.grid.step();
    checks.push(Check::new(
        "synthesis.feedback_consistency",
        feedback,
        5e-3 * (1.0 + ol.max_control()) * (h / REFERENCE_STEP).max(1.0),
    ));

    let tau = instance.init.tau_index();
    let p0 = &sol.p0[tau];
    let eig = ((p0 + p0.transpose()) * 0.5).symmetric_eigenvalues();
    let s = &mut suite.scalars;
    s.insert("j_open_loop".into(), ol.cost);
    s.insert("j_closed_loop".into(), traj.cost);
    s.insert("j_free_response".into(), openloop::free_response_cost(instance, &prop));
    s.insert("p0_min_eigenvalue".into(), eig.min());
    s.insert("p0_max_eigenvalue".into(), eig.max());
    s.insert("p0_synthesis_max".into(), linalg::max_abs(&synth[0].p0()));
    s.insert("gram_condition".into(), ol.gram_condition);
    s.insert("resolvent_peak".into(), prop.resolvent_peak);
    suite.checks = checks;
    Ok(suite)
}
