//! Backward integration of the coupled Riccati system for `P0(t)`,
//! `P1(t, s)`, `P2(t, s, q)`:
//!
//! ```text
//! P0' = -(AᵀP0 + P0A + Q - P0BBᵀP0 + P1(t,t) + P1(t,t)ᵀ)
//! ∂tP1(t,s) = -(AᵀP1(t,s) + P0K(t-s) + P2(t,s,t) - P0BBᵀP1(t,s))
//! ∂tP2(t,s,q) = -(K(t-q)ᵀP1(t,s) + P1(t,q)ᵀK(t-s) - P1(t,q)ᵀBBᵀP1(t,s))
//! ```
//!
//! with zero final data at `T`. On the grid the unknowns at node `i` are
//! `P0`, `P1[j]` and `P2[j][k]` for `j, k ≤ i`; the index set shrinks by one
//! node per backward step.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::linalg::{self, Mat};
use crate::model::ProblemInstance;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Heun,
}

impl Scheme {
    pub fn order(self) -> f64 {
        match self {
            Scheme::Euler => 1.0,
            Scheme::Heun => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Heun => "heun",
        }
    }
}

/// Square array of `n×n` blocks `P2[j][k]`, `j, k < size`.
#[derive(Debug, Clone, PartialEq)]
pub struct P2Slice {
    size: usize,
    blocks: Vec<Mat>,
}

impl P2Slice {
    pub fn zeros(size: usize, n: usize) -> Self {
        Self {
            size,
            blocks: vec![Mat::zeros(n, n); size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, j: usize, k: usize) -> &Mat {
        &self.blocks[j * self.size + k]
    }

    fn from_fn(size: usize, f: impl Fn(usize, usize) -> Mat + Sync) -> Self {
        let blocks = (0..size)
            .into_par_iter()
            .flat_map_iter(|j| {
                let f = &f;
                (0..size).map(move |k| f(j, k))
            })
            .collect();
        Self { size, blocks }
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    /// `max ‖P2[j][k] - P2[k][j]ᵀ‖`.
    pub fn symmetry_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.size {
            for k in 0..=j {
                worst = worst.max(linalg::max_abs_diff(self.get(j, k), &self.get(k, j).transpose()));
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(linalg::all_finite)
    }
}

/// The unknowns at node `node`.
#[derive(Debug, Clone)]
pub struct RiccatiState {
    pub node: usize,
    pub p0: Mat,
    /// `P1[j]`, `j = 0..=node`.
    pub p1: Vec<Mat>,
    pub p2: P2Slice,
}

impl RiccatiState {
    pub fn terminal(n: usize, steps: usize, p0: Mat) -> Self {
        Self {
            node: steps,
            p0,
            p1: vec![Mat::zeros(n, n); steps + 1],
            p2: P2Slice::zeros(steps + 1, n),
        }
    }
}

/// Time derivatives at one node, same layout as [`RiccatiState`].
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub d0: Mat,
    pub d1: Vec<Mat>,
    pub d2: P2Slice,
}

fn d0_entry(instance: &ProblemInstance, p0: &Mat, p1_diag: &Mat) -> Mat {
    let p0b = p0 * &instance.b;
    let mut d = instance.a.tr_mul(p0) + p0 * &instance.a + &instance.q - &p0b * p0b.transpose()
        + p1_diag
        + p1_diag.transpose();
    d.neg_mut();
    d
}

/// `-(AᵀP1[j] + P0K(t_i - s_j) + P2[j][i] - P0BBᵀP1[j])`, with `p0b = P0B`, `g1j = BᵀP1[j]`.
#[allow(clippy::too_many_arguments)]
fn d1_entry(instance: &ProblemInstance, p0: &Mat, p0b: &Mat, p1j: &Mat, g1j: &Mat, p2_ji: &Mat, i: usize, j: usize) -> Mat {
    let mut d = instance.a.tr_mul(p1j) + instance.kernel.right_mul(p0, i - j) + p2_ji - p0b * g1j;
    d.neg_mut();
    d
}

/// `-(K(t_i - s_k)ᵀP1[j] + P1[k]ᵀK(t_i - s_j) - G1[k]ᵀG1[j])`.
#[allow(clippy::too_many_arguments)]
fn d2_entry(instance: &ProblemInstance, p1j: &Mat, p1k_t: &Mat, g1j: &Mat, g1k: &Mat, i: usize, j: usize, k: usize) -> Mat {
    let kernel = &instance.kernel;
    let mut d = kernel.left_mul_transpose(i - k, p1j) + kernel.right_mul(p1k_t, i - j) - g1k.tr_mul(g1j);
    d.neg_mut();
    d
}

/// Right-hand sides at `state.node`.
pub fn rhs(instance: &ProblemInstance, state: &RiccatiState) -> Derivatives {
    let i = state.node;
    let bt = instance.b.transpose();
    let p0 = &state.p0;
    let p0b = p0 * &instance.b;
    let g1: Vec<Mat> = state.p1[..=i].iter().map(|p| &bt * p).collect();
    let d0 = d0_entry(instance, p0, &state.p1[i]);
    let d1: Vec<Mat> = (0..=i)
        .into_par_iter()
        .map(|j| d1_entry(instance, p0, &p0b, &state.p1[j], &g1[j], state.p2.get(j, i), i, j))
        .collect();
    let p1t: Vec<Mat> = state.p1[..=i].iter().map(|p| p.transpose()).collect();
    let d2 = P2Slice::from_fn(i + 1, |j, k| d2_entry(instance, &state.p1[j], &p1t[k], &g1[j], &g1[k], i, j, k));
    Derivatives { d0, d1, d2 }
}

/// `P(i) = P(i+1) - c · d`, restricted to the index set of node `i`.
fn advance(from: &RiccatiState, c: f64, d: &Derivatives) -> RiccatiState {
    let i = from.node - 1;
    let p0 = &from.p0 - &d.d0 * c;
    let p1 = (0..=i).map(|j| &from.p1[j] - &d.d1[j] * c).collect();
    let p2 = P2Slice::from_fn(i + 1, |j, k| from.p2.get(j, k) - d.d2.get(j, k) * c);
    RiccatiState { node: i, p0, p1, p2 }
}

fn average(first: &Derivatives, second: &Derivatives, i: usize) -> Derivatives {
    Derivatives {
        d0: (&first.d0 + &second.d0) * 0.5,
        d1: (0..=i).map(|j| (&first.d1[j] + &second.d1[j]) * 0.5).collect(),
        d2: P2Slice::from_fn(i + 1, |j, k| (first.d2.get(j, k) + second.d2.get(j, k)) * 0.5),
    }
}

/// One backward step from node `i + 1` to node `i`.
pub fn step_back(instance: &ProblemInstance, state: &RiccatiState, scheme: Scheme) -> RiccatiState {
    let h = instance.grid.step();
    let d_next = rhs(instance, state);
    let predicted = advance(state, h, &d_next);
    match scheme {
        Scheme::Euler => predicted,
        Scheme::Heun => {
            let d_pred = rhs(instance, &predicted);
            advance(state, h, &average(&d_next, &d_pred, predicted.node))
        }
    }
}

/// Which `P2` slices to keep.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Checkpoints {
    /// Nodes `0` and `τ` only.
    #[default]
    Minimal,
    /// The listed nodes in addition to `0` and `τ`.
    Nodes(Vec<usize>),
    All,
}

#[derive(Debug, Clone)]
pub struct RiccatiOptions {
    pub scheme: Scheme,
    pub checkpoints: Checkpoints,
    /// Nodes at which the `P2` equation residual will be evaluated; their
    /// neighbours are kept as checkpoints automatically.
    pub residual_nodes: Vec<usize>,
    /// `P0(T) = ε I` instead of zero, for stability probes.
    pub terminal_perturbation: f64,
    pub drift_tol: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Heun,
            checkpoints: Checkpoints::Minimal,
            residual_nodes: Vec::new(),
            terminal_perturbation: 0.0,
            drift_tol: 1e-8,
        }
    }
}

/// Largest relative drift from the structural invariants seen during the march.
#[derive(Debug, Clone, Default)]
pub struct DriftReport {
    /// `max_i ‖P0 - P0ᵀ‖ / (1 + ‖P0‖)`.
    pub p0_symmetry: f64,
    /// `max_i max(0, -λ_min(P0)) / (1 + ‖P0‖)`.
    pub p0_negativity: f64,
    /// `max_i ‖P2[j][k] - P2[k][j]ᵀ‖ / (1 + ‖P2‖)`.
    pub p2_symmetry: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    pub step: f64,
    /// `P0` at every node.
    pub p0: Vec<Mat>,
    /// `p1[i][j] = P1(t_i, s_j)`, `j ≤ i`.
    pub p1: Vec<Vec<Mat>>,
    /// `P2` slices at the checkpoint nodes.
    pub p2: BTreeMap<usize, P2Slice>,
    /// `p2_diag[i][j] = P2(t_i, s_j, t_i)`, the column coupling into the `P1` equation.
    pub p2_diag: Vec<Vec<Mat>>,
    pub drift: DriftReport,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.p0.len() - 1
    }

    pub fn p2_at(&self, i: usize) -> Option<&P2Slice> {
        self.p2.get(&i)
    }

    pub fn max_p1(&self) -> f64 {
        self.p1.iter().flatten().map(linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn max_p2(&self) -> f64 {
        self.p2.values().map(P2Slice::norm).fold(0.0, f64::max)
    }
}

/// March `i = N, …, 0`.
pub fn integrate_backward(instance: &ProblemInstance, options: &RiccatiOptions) -> Result<RiccatiSolution> {
    let n = instance.n;
    let steps = instance.grid.steps();
    let tau = instance.init.tau_index();
    let mut keep: BTreeSet<usize> = [0, tau].into_iter().collect();
    match &options.checkpoints {
        Checkpoints::Minimal => {}
        Checkpoints::Nodes(list) => {
            for &c in list {
                if c > steps {
                    return Err(Error::Validation(format!("checkpoint {c} beyond the final node {steps}")));
                }
                keep.insert(c);
            }
        }
        Checkpoints::All => keep.extend(0..=steps),
    }
    for &r in &options.residual_nodes {
        for c in r.saturating_sub(1)..=(r + 2).min(steps) {
            keep.insert(c);
        }
    }

    let terminal = Mat::identity(n, n) * options.terminal_perturbation;
    let mut state = RiccatiState::terminal(n, steps, terminal);
    let mut p0 = vec![Mat::zeros(n, n); steps + 1];
    let mut p1: Vec<Vec<Mat>> = vec![Vec::new(); steps + 1];
    let mut p2 = BTreeMap::new();
    let mut p2_diag: Vec<Vec<Mat>> = vec![Vec::new(); steps + 1];
    let mut drift = DriftReport::default();

    loop {
        let i = state.node;
        if !(linalg::all_finite(&state.p0) && state.p1.iter().all(linalg::all_finite) && state.p2.all_finite()) {
            return Err(Error::numerical(Some(i), "Riccati solution not finite (blow-up)"));
        }
        let scale = 1.0 + linalg::max_abs(&state.p0);
        drift.p0_symmetry = drift.p0_symmetry.max(linalg::symmetry_residual(&state.p0) / scale);
        drift.p0_negativity = drift
            .p0_negativity
            .max((-linalg::min_sym_eigenvalue(&state.p0)).max(0.0) / scale);
        drift.p2_symmetry = drift
            .p2_symmetry
            .max(state.p2.symmetry_residual() / (1.0 + state.p2.norm()));
        p0[i] = state.p0.clone();
        p1[i] = state.p1.clone();
        p2_diag[i] = (0..=i).map(|j| state.p2.get(j, i).clone()).collect();
        if keep.contains(&i) {
            p2.insert(i, state.p2.clone());
        }
        if i == 0 {
            break;
        }
        state = step_back(instance, &state, options.scheme);
    }

    for (name, value) in [
        ("P0 symmetry", drift.p0_symmetry),
        ("P0 positivity", drift.p0_negativity),
        ("P2 symmetry", drift.p2_symmetry),
    ] {
        if value > options.drift_tol {
            drift
                .warnings
                .push(format!("{name} drift {value:.3e} exceeds {:.1e}", options.drift_tol));
        }
    }

    Ok(RiccatiSolution {
        scheme: options.scheme,
        n,
        m: instance.m,
        step: instance.grid.step(),
        p0,
        p1,
        p2,
        p2_diag,
        drift,
    })
}

/// The block operator at node `i` acting on `(ξ0, ξ(s_0), …, ξ(s_i))`, with
/// the history quadrature weights folded in.
pub fn assemble_big_p(sol: &RiccatiSolution, i: usize) -> Result<Mat> {
    let slice = sol
        .p2_at(i)
        .ok_or_else(|| Error::Validation(format!("no P2 checkpoint at node {i}")))?;
    let n = sol.n;
    let h = sol.step;
    let w: Vec<f64> = (0..=i)
        .map(|s| if i == 0 { 0.0 } else if s == 0 || s == i { 0.5 * h } else { h })
        .collect();
    let mut big = Mat::zeros(n * (i + 2), n * (i + 2));
    big.view_mut((0, 0), (n, n)).copy_from(&sol.p0[i]);
    for s in 0..=i {
        let block = &sol.p1[i][s] * w[s];
        big.view_mut((0, n * (1 + s)), (n, n)).copy_from(&block);
        big.view_mut((n * (1 + s), 0), (n, n)).copy_from(&block.transpose());
        for q in 0..=i {
            let b = slice.get(s, q) * (w[s] * w[q]);
            big.view_mut((n * (1 + q), n * (1 + s)), (n, n)).copy_from(&b);
        }
    }
    Ok(big)
}

/// `⟨P(t_i) X, X⟩` for `X = (ξ0, history samples on nodes 0..=i)`.
pub fn quadratic_form(big: &Mat, current: &crate::linalg::Vector, history: &[crate::linalg::Vector]) -> f64 {
    let n = current.len();
    let mut x = crate::linalg::Vector::zeros(big.nrows());
    x.rows_mut(0, n).copy_from(current);
    for (s, y) in history.iter().enumerate() {
        x.rows_mut(n * (1 + s), n).copy_from(y);
    }
    x.dot(&(big * &x))
}

/// `G0[i] = BᵀP0(t_i)`, `G1[i][j] = BᵀP1(t_i, s_j)`.
#[derive(Debug, Clone)]
pub struct FeedbackGains {
    pub g0: Vec<Mat>,
    pub g1: Vec<Vec<Mat>>,
}

pub fn feedback_gains(sol: &RiccatiSolution, b: &Mat) -> FeedbackGains {
    FeedbackGains {
        g0: sol.p0.iter().map(|p| b.tr_mul(p)).collect(),
        g1: sol
            .p1
            .iter()
            .map(|row| row.iter().map(|p| b.tr_mul(p)).collect())
            .collect(),
    }
}

/// Weak-form residuals of the three component equations.
#[derive(Debug, Clone, Default)]
pub struct DreResidual {
    pub p0: f64,
    pub p1: f64,
    /// `None` when no node had the neighbouring `P2` slices needed.
    pub p2: Option<f64>,
    pub p2_nodes: Vec<usize>,
}

const TEST_DEGREES: [i32; 3] = [0, 1, 2];

fn test_function(degree: i32, s: f64, horizon: f64) -> f64 {
    (s / horizon).powi(degree)
}

/// Time derivative of a node-indexed quantity at node `i`: centered at
/// interior points, second-order one-sided forward where `i - 1` is not
/// available.
fn time_derivative<F: Fn(usize) -> Mat>(f: F, i: usize, centered: bool, h: f64) -> Mat {
    if centered {
        (f(i + 1) - f(i - 1)) / (2.0 * h)
    } else {
        (f(i + 1) * 4.0 - f(i) * 3.0 - f(i + 2)) / (2.0 * h)
    }
}

/// Residuals at interior nodes `1..N-1` for the `P0` and `P1` equations and at
/// the nodes in `p2_nodes` (each needing slices `i-1..=i+2`) for the `P2`
/// equation. History pairings use trapezoid weights and the test functions
/// `1, s/T, (s/T)²`.
pub fn dre_residual(instance: &ProblemInstance, sol: &RiccatiSolution, p2_nodes: &[usize]) -> DreResidual {
    let steps = sol.steps();
    let h = sol.step;
    let grid = &instance.grid;
    let horizon = grid.horizon();
    let bt = instance.b.transpose();
    let mut out = DreResidual::default();
    if steps < 3 {
        return out;
    }
    let weight = |j: usize, i: usize, deg: i32| grid.trap_weight(j, 0, i) * test_function(deg, grid.node(j), horizon);
    for i in 1..steps - 1 {
        let p0 = &sol.p0[i];
        let p1 = &sol.p1[i];
        let r0 = time_derivative(|k| sol.p0[k].clone(), i, true, h) - d0_entry(instance, p0, &p1[i]);
        out.p0 = out.p0.max(linalg::max_abs(&r0));

        let p0b = p0 * &instance.b;
        let g1: Vec<Mat> = p1.iter().map(|p| &bt * p).collect();
        let r1: Vec<Mat> = (0..=i)
            .map(|j| {
                let d = d1_entry(instance, p0, &p0b, &p1[j], &g1[j], &sol.p2_diag[i][j], i, j);
                time_derivative(|k| sol.p1[k][j].clone(), i, j < i, h) - d
            })
            .collect();
        for deg in TEST_DEGREES {
            let mut acc = Mat::zeros(sol.n, sol.n);
            for (j, r) in r1.iter().enumerate() {
                acc += r * weight(j, i, deg);
            }
            out.p1 = out.p1.max(linalg::max_abs(&acc));
        }

        let have = (i - 1..=i + 2).all(|c| sol.p2_at(c).is_some());
        if !(have && p2_nodes.contains(&i)) {
            continue;
        }
        let p1t: Vec<Mat> = p1.iter().map(|p| p.transpose()).collect();
        let mut r2 = Vec::with_capacity((i + 1) * (i + 1));
        for j in 0..=i {
            for k in 0..=i {
                let dt = time_derivative(|c| sol.p2_at(c).expect("checked above").get(j, k).clone(), i, j < i && k < i, h);
                r2.push(dt - d2_entry(instance, &p1[j], &p1t[k], &g1[j], &g1[k], i, j, k));
            }
        }
        let mut worst = 0.0_f64;
        for da in TEST_DEGREES {
            for db in TEST_DEGREES {
                let mut acc = Mat::zeros(sol.n, sol.n);
                for j in 0..=i {
                    for k in 0..=i {
                        let w = weight(j, i, da) * weight(k, i, db);
                        if w != 0.0 {
                            acc += &r2[j * (i + 1) + k] * w;
                        }
                    }
                }
                worst = worst.max(linalg::max_abs(&acc));
            }
        }
        out.p2 = Some(out.p2.unwrap_or(0.0).max(worst));
        out.p2_nodes.push(i);
    }
    out
}
