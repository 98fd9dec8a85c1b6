//! Open-loop solution: minimize the discretized cost directly over the
//! control samples on `[τ, T]`.
//!
//! Controls and states are stacked node by node (`u_τ, …, u_N`). The
//! discrete inner products carry trapezoid weights, so the normal equations
//! below are the exact gradient of the discrete cost.

use nalgebra::{Cholesky, Dyn};
use rayon::prelude::*;

use crate::linalg::{self, Mat, Vector};
use crate::model::ProblemInstance;
use crate::propagator::PropagatorTables;
use crate::stepping::{self, Stepper, Trajectory};
use crate::{Error, Result};

pub use crate::stepping::{evaluate_cost, simulate_direct};

/// The input-to-state map `L` on `[t_τ, T]` with its quadrature weights.
#[derive(Debug, Clone)]
pub struct DiscreteInputToState {
    pub tau: usize,
    pub n: usize,
    pub m: usize,
    /// Block `(i, j)` is `w_j F(t_i, t_j) B` for `j ≤ i`, with trapezoid weights on `[t_τ, t_i]`.
    pub l: Mat,
    /// Trapezoid weights on `[t_τ, T]`, one per node.
    pub weights: Vec<f64>,
}

impl DiscreteInputToState {
    pub fn assemble(prop: &PropagatorTables, b: &Mat, tau: usize) -> Self {
        let grid = &prop.grid;
        let steps = grid.steps();
        let (n, m) = (b.nrows(), b.ncols());
        let nodes = steps - tau + 1;
        // F(t_i, t_j) B depends on i - j only
        let fb: Vec<Mat> = (0..nodes).map(|d| prop.f.lags[d].clone() * b).collect();
        let mut l = Mat::zeros(nodes * n, nodes * m);
        for i in tau..=steps {
            for j in tau..=i {
                let w = grid.trap_weight(j, tau, i);
                if w != 0.0 {
                    let block = &fb[i - j] * w;
                    l.view_mut(((i - tau) * n, (j - tau) * m), (n, m)).copy_from(&block);
                }
            }
        }
        Self {
            tau,
            n,
            m,
            l,
            weights: grid.trap_weights(tau, steps),
        }
    }

    pub fn nodes(&self) -> usize {
        self.weights.len()
    }

    /// `W_x Q̄ X` for a stacked state-space matrix `X` (block rows of height `n`).
    pub fn weighted_q(&self, q: &Mat, x: &Mat) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(x.nrows(), x.ncols());
        for (p, w) in self.weights.iter().enumerate() {
            let rows = x.rows(p * n, n);
            out.rows_mut(p * n, n).copy_from(&(q * rows * *w));
        }
        out
    }

    /// `W_x X` (state-space weights without `Q`).
    pub fn weighted_x(&self, x: &Mat) -> Mat {
        scale_rows(x, &self.weights, self.n)
    }

    /// `W_u X` (control-space weights).
    pub fn weighted_u(&self, x: &Mat) -> Mat {
        scale_rows(x, &self.weights, self.m)
    }

    /// `S = W_u + Lᵀ W_x Q̄ L`.
    pub fn system_matrix(&self, q: &Mat) -> Mat {
        let wql = self.weighted_q(q, &self.l);
        let mut s = self.l.tr_mul(&wql);
        for (p, w) in self.weights.iter().enumerate() {
            for r in 0..self.m {
                s[(p * self.m + r, p * self.m + r)] += w;
            }
        }
        // symmetric by construction; remove the rounding asymmetry before factoring
        let st = s.transpose();
        (s + st) * 0.5
    }
}

fn scale_rows(x: &Mat, weights: &[f64], block: usize) -> Mat {
    let mut out = x.clone();
    for (p, w) in weights.iter().enumerate() {
        out.rows_mut(p * block, block).scale_mut(*w);
    }
    out
}

/// A factored normal-equation matrix `S`.
pub struct NormalEquations {
    pub s: Mat,
    chol: Cholesky<f64, Dyn>,
    pub condition: f64,
}

impl NormalEquations {
    pub fn factor(s: Mat, node: Option<usize>) -> Result<Self> {
        let chol = Cholesky::new(s.clone()).ok_or_else(|| {
            Error::numerical(node, "normal equations not positive definite")
        })?;
        let condition = linalg::cholesky_condition_estimate(&chol.l());
        Ok(Self { s, chol, condition })
    }

    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &Vector) -> Vector {
        self.chol.solve(rhs)
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub tau: usize,
    /// `û` at nodes `τ..=N`.
    pub u_hat: Vec<Vector>,
    /// `ŵ` at nodes `τ..=N`.
    pub w_hat: Vec<Vector>,
    pub cost: f64,
    pub gram_condition: f64,
    /// `‖S û + Lᵀ W_x Q̄ Ē‖_max`.
    pub residual: f64,
    /// Largest gap between the Cholesky solution and an LU solution of the same system.
    pub uniqueness_gap: f64,
}

impl OpenLoopSolution {
    pub fn control(&self, i: usize) -> &Vector {
        &self.u_hat[i - self.tau]
    }

    pub fn state(&self, i: usize) -> &Vector {
        &self.w_hat[i - self.tau]
    }

    pub fn max_control(&self) -> f64 {
        self.u_hat.iter().map(linalg::max_abs_vec).fold(0.0, f64::max)
    }
}

/// Free response `Ē_i = F(t_i, τ) ξ0 + Σ_j w_j M(t_i, s_j, τ) ξ(s_j)`, stacked over `i = τ..=N`.
pub fn assemble_e(prop: &PropagatorTables, instance: &ProblemInstance) -> Vector {
    let init = &instance.init;
    let tau = init.tau_index();
    let steps = prop.grid.steps();
    let n = instance.n;
    let mut out = Vector::zeros((steps - tau + 1) * n);
    for i in tau..=steps {
        let mut e = prop.f(i, tau) * init.xi0();
        if tau > 0 {
            for (j, xi) in init.history().iter().enumerate() {
                e += prop.m(i, j, tau) * xi * prop.grid.trap_weight(j, 0, tau);
            }
        }
        out.rows_mut((i - tau) * n, n).copy_from(&e);
    }
    out
}

pub(crate) fn unstack(v: &Vector, block: usize) -> Vec<Vector> {
    (0..v.len() / block)
        .map(|p| v.rows(p * block, block).into_owned())
        .collect()
}

pub(crate) fn stack(vs: &[Vector]) -> Vector {
    let block = vs.first().map_or(0, |v| v.len());
    let mut out = Vector::zeros(vs.len() * block);
    for (p, v) in vs.iter().enumerate() {
        out.rows_mut(p * block, block).copy_from(v);
    }
    out
}

/// Solve `(W_u + Lᵀ W_x Q̄ L) û = -Lᵀ W_x Q̄ Ē` and rebuild `ŵ = Ē + L û`.
pub fn solve_open_loop(instance: &ProblemInstance, prop: &PropagatorTables) -> Result<OpenLoopSolution> {
    let tau = instance.init.tau_index();
    let lop = DiscreteInputToState::assemble(prop, &instance.b, tau);
    let e = assemble_e(prop, instance);
    let e_mat = Mat::from_column_slice(e.len(), 1, e.as_slice());
    let rhs = -lop.l.tr_mul(&lop.weighted_q(&instance.q, &e_mat));
    let s = lop.system_matrix(&instance.q);
    let eqs = NormalEquations::factor(s, Some(tau))?;
    let u = eqs.solve(&rhs);
    let u_lu = eqs
        .s
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical(Some(tau), "LU solve of the normal equations failed"))?;
    let scale = 1.0 + linalg::max_abs(&u);
    let uniqueness_gap = linalg::max_abs_diff(&u, &u_lu) / scale;
    let residual = linalg::max_abs(&(&eqs.s * &u - &rhs));
    let w = &e_mat + &lop.l * &u;
    let u_vec = Vector::from_column_slice(u.as_slice());
    let w_vec = Vector::from_column_slice(w.as_slice());
    let u_hat = unstack(&u_vec, instance.m);
    let w_hat = unstack(&w_vec, instance.n);
    if !u_hat.iter().chain(&w_hat).all(|v| v.iter().all(|x| x.is_finite())) {
        return Err(Error::numerical(Some(tau), "open-loop solution not finite"));
    }
    let cost = evaluate_cost(&w_hat, &u_hat, &instance.q, instance, tau);
    Ok(OpenLoopSolution {
        tau,
        u_hat,
        w_hat,
        cost,
        gram_condition: eqs.condition,
        residual,
        uniqueness_gap,
    })
}

/// Cost of the uncontrolled free response.
pub fn free_response_cost(instance: &ProblemInstance, prop: &PropagatorTables) -> f64 {
    let tau = instance.init.tau_index();
    let e = unstack(&assemble_e(prop, instance), instance.n);
    let zeros = vec![Vector::zeros(instance.m); e.len()];
    evaluate_cost(&e, &zeros, &instance.q, instance, tau)
}

/// Centered difference `(J(û + εv) - J(û - εv)) / 2ε` with costs measured on
/// `simulate_direct` trajectories.
pub fn optimality_probe(
    instance: &ProblemInstance,
    solution: &OpenLoopSolution,
    direction: &[Vector],
    eps: f64,
    stepper: Stepper,
) -> Result<f64> {
    let shifted = |sign: f64| -> Vec<Vector> {
        solution
            .u_hat
            .iter()
            .zip(direction)
            .map(|(u, v)| u + v * (sign * eps))
            .collect()
    };
    let plus = stepping::simulate_direct(instance, &shifted(1.0), stepper)?;
    let minus = stepping::simulate_direct(instance, &shifted(-1.0), stepper)?;
    Ok((plus.cost - minus.cost) / (2.0 * eps))
}

/// Directional derivative of the discrete cost `ŵᵀW_xQ̄ŵ + ûᵀW_uû` through
/// the `L` representation; vanishes at the discrete optimum up to roundoff.
pub fn discrete_gradient_probe(
    instance: &ProblemInstance,
    prop: &PropagatorTables,
    solution: &OpenLoopSolution,
    direction: &[Vector],
) -> f64 {
    let lop = DiscreteInputToState::assemble(prop, &instance.b, solution.tau);
    let v = stack(direction);
    let lv = &lop.l * &v;
    let w = stack(&solution.w_hat);
    let u = stack(&solution.u_hat);
    let wv = Mat::from_column_slice(lv.len(), 1, lv.as_slice());
    let qlv = lop.weighted_q(&instance.q, &wv);
    let uv = lop.weighted_u(&Mat::from_column_slice(v.len(), 1, v.as_slice()));
    2.0 * (w.dot(&qlv.column(0)) + u.dot(&uv.column(0)))
}

/// `min_i w_i`, the coercivity constant of the normal-equation matrix.
pub fn coercivity_bound(lop: &DiscreteInputToState) -> f64 {
    lop.weights.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smallest Rayleigh quotient of `S` over the given probes, minus the coercivity bound.
pub fn coercivity_margin(lop: &DiscreteInputToState, q: &Mat, probes: &[Vector]) -> f64 {
    let s = lop.system_matrix(q);
    let bound = coercivity_bound(lop);
    probes
        .par_iter()
        .map(|x| (x.dot(&(&s * x)) / x.norm_squared()) - bound)
        .reduce(|| f64::INFINITY, f64::min)
}

/// Trajectory of `simulate_direct` for the open-loop controls.
pub fn replay(instance: &ProblemInstance, solution: &OpenLoopSolution, stepper: Stepper) -> Result<Trajectory> {
    stepping::simulate_direct(instance, &solution.u_hat, stepper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_instance, KernelSpec};

    fn solve(p: &ProblemInstance) -> OpenLoopSolution {
        solve_open_loop(p, &PropagatorTables::build(p).unwrap()).unwrap()
    }

    #[test]
    fn scalar_lqr_cost_near_tanh() {
        let err = |steps| {
            let p = scalar_instance(0.0, 1.0, 1.0, KernelSpec::Zero, 1.0, steps).unwrap();
            (solve(&p).cost - 1f64.tanh()).abs()
        };
        let (e1, e2) = (err(50), err(100));
        assert!(e2 < 1e-3, "{e2}");
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_weight_means_zero_control() {
        let p = scalar_instance(0.3, 1.0, 0.0, KernelSpec::Constant { value: -1.0, matrix: None }, 1.0, 20).unwrap();
        let s = solve(&p);
        assert_eq!(s.cost, 0.0);
        assert!(s.u_hat.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn l_has_zero_leading_row_and_half_weight_diagonal() {
        let p = scalar_instance(0.0, 2.0, 1.0, KernelSpec::Zero, 1.0, 10).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        let lop = DiscreteInputToState::assemble(&prop, &p.b, 0);
        let h = p.grid.step();
        assert_eq!(lop.l[(0, 0)], 0.0);
        for i in 1..=10 {
            assert!((lop.l[(i, i)] - 0.5 * h * 2.0).abs() < 1e-15);
            for j in (i + 1)..=10 {
                assert_eq!(lop.l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn free_response_matches_stepping_with_history() {
        let p = crate::model::parse_problem(
            r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],"kernel":{"type":"constant","value":-1},
            "T":1,"N":100,"tau":0.5,"xi0":[1],"history":[[1]]}"#,
        );
        assert!(p.is_err());
        let history: Vec<Vec<f64>> = vec![vec![1.0]; 51];
        let text = format!(
            r#"{{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],"kernel":{{"type":"constant","value":-1}},
            "T":1,"N":100,"tau":0.5,"xi0":[1],"history":{}}}"#,
            serde_json::to_string(&history).unwrap()
        );
        let p = crate::model::parse_problem(&text).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        let e = unstack(&assemble_e(&prop, &p), 1);
        let traj = simulate_direct(&p, &vec![Vector::zeros(1); 51], Stepper::Trapezoid).unwrap();
        let gap = e
            .iter()
            .zip(&traj.states)
            .map(|(a, b)| (a[0] - b[0]).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn gradient_vanishes_at_discrete_optimum() {
        let p = scalar_instance(0.0, 1.0, 1.0, KernelSpec::Constant { value: -1.0, matrix: None }, 1.0, 40).unwrap();
        let prop = PropagatorTables::build(&p).unwrap();
        let s = solve_open_loop(&p, &prop).unwrap();
        let v: Vec<Vector> = (0..=40).map(|i| Vector::from_element(1, (0.3 * i as f64).cos())).collect();
        assert!(discrete_gradient_probe(&p, &prop, &s, &v).abs() < 1e-12);
        assert!(s.uniqueness_gap < 1e-10);
    }
}
