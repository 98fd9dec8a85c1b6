//! Cost operators built from their integral definitions, node by node.
//!
//! At a node `t` (playing the initial time) everything is expressed through
//! the block matrix `Y = [F̄ | M̄_0 … M̄_t]`, whose column blocks stack
//! `F(p, t)` and `M(p, s, t)` over `p = t..=N`. Then
//!
//! ```text
//! Ψ = -S⁻¹ Lᵀ W_x Q̄ Y,    Z = Y + L Ψ,
//! P = Ψᵀ W_u Ψ + Zᵀ W_x Q̄ Z      (definitional)
//!   = Yᵀ W_x Q̄ Z                 (reduced)
//! ```
//!
//! and `P0`, `P1(t, s)`, `P2(t, s, q)` are read off as blocks of `P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::{self, Mat, Vector};
use crate::model::ProblemInstance;
use crate::openloop::{self, DiscreteInputToState, NormalEquations, OpenLoopSolution};
use crate::propagator::PropagatorTables;
use crate::stepping::AugmentedState;
use crate::Result;

/// `Ψ` and `Z` at one node, with the objects they were built from.
pub struct NodeOperators {
    pub t: usize,
    n: usize,
    m: usize,
    h: f64,
    q: Mat,
    pub lop: DiscreteInputToState,
    eqs: Option<NormalEquations>,
    /// `[F̄ | M̄_0 … M̄_t]`.
    pub y: Mat,
    /// Column blocks `Ψ1(·, t)`, `Ψ2(·, s, t)`.
    pub psi: Mat,
    /// Column blocks `Z1(·, t)`, `Z2(·, s, t)`.
    pub z: Mat,
}

fn assemble_y(prop: &PropagatorTables, n: usize, t: usize) -> Mat {
    let steps = prop.grid.steps();
    let nodes = steps - t + 1;
    let mut y = Mat::zeros(nodes * n, n * (t + 2));
    for p in t..=steps {
        let r = (p - t) * n;
        y.view_mut((r, 0), (n, n)).copy_from(prop.f(p, t));
        for s in 0..=t {
            y.view_mut((r, n * (1 + s)), (n, n)).copy_from(prop.m(p, s, t));
        }
    }
    y
}

impl NodeOperators {
    /// `Ψ` through the normal equations and `Z = Y + LΨ`.
    pub fn build(instance: &ProblemInstance, prop: &PropagatorTables, t: usize) -> Result<Self> {
        let n = instance.n;
        let m = instance.m;
        let lop = DiscreteInputToState::assemble(prop, &instance.b, t);
        let y = assemble_y(prop, n, t);
        let (eqs, psi) = if t == prop.grid.steps() {
            // empty remaining horizon: nothing to optimize
            (None, Mat::zeros(m, y.ncols()))
        } else {
            let eqs = NormalEquations::factor(lop.system_matrix(&instance.q), Some(t))?;
            let rhs = lop.l.tr_mul(&lop.weighted_q(&instance.q, &y));
            let psi = -eqs.solve(&rhs);
            (Some(eqs), psi)
        };
        let z = &y + &lop.l * &psi;
        Ok(Self {
            t,
            n,
            m,
            h: instance.grid.step(),
            q: instance.q.clone(),
            lop,
            eqs,
            y,
            psi,
            z,
        })
    }

    fn col(&self, s: Option<usize>) -> usize {
        self.n * s.map_or(0, |s| 1 + s)
    }

    /// `Ψ1(t_p, t)`.
    pub fn psi1(&self, p: usize) -> Mat {
        self.psi.view(((p - self.t) * self.m, 0), (self.m, self.n)).into_owned()
    }

    /// `Ψ2(t_p, s, t)`.
    pub fn psi2(&self, p: usize, s: usize) -> Mat {
        self.psi
            .view(((p - self.t) * self.m, self.col(Some(s))), (self.m, self.n))
            .into_owned()
    }

    pub fn z1(&self, p: usize) -> Mat {
        self.z.view(((p - self.t) * self.n, 0), (self.n, self.n)).into_owned()
    }

    pub fn z2(&self, p: usize, s: usize) -> Mat {
        self.z
            .view(((p - self.t) * self.n, self.col(Some(s))), (self.n, self.n))
            .into_owned()
    }

    /// `Z = [I - L S⁻¹ Lᵀ W_x Q̄] Y`, the second assembly route.
    pub fn z_via_projection(&self) -> Mat {
        match &self.eqs {
            None => self.y.clone(),
            Some(eqs) => {
                let inner = eqs.solve(&self.lop.l.tr_mul(&self.lop.weighted_q(&self.q, &self.y)));
                &self.y - &self.lop.l * inner
            }
        }
    }

    /// `Ψᵀ W_u Ψ + Zᵀ W_x Q̄ Z`.
    pub fn cost_ops_definitional(&self) -> CostOperators {
        let all = self.psi.tr_mul(&self.lop.weighted_u(&self.psi)) + self.z.tr_mul(&self.lop.weighted_q(&self.q, &self.z));
        CostOperators::new(self.t, self.n, all, true)
    }

    /// `Yᵀ W_x Q̄ Z`.
    pub fn cost_ops_reduced(&self) -> CostOperators {
        let all = self.y.tr_mul(&self.lop.weighted_q(&self.q, &self.z));
        CostOperators::new(self.t, self.n, all, true)
    }

    /// Only the first block row `(P0, P1(t, ·))`, reduced form.
    pub fn cost_ops_first_row(&self) -> CostOperators {
        let f = self.y.columns(0, self.n);
        let all = f.tr_mul(&self.lop.weighted_q(&self.q, &self.z));
        CostOperators::new(self.t, self.n, all, false)
    }

    /// Max-norm gaps between the definitional and reduced forms of `P0`, `P1`, `P2`.
    pub fn key_lemma_residuals(&self) -> [f64; 3] {
        let a = self.cost_ops_definitional();
        let b = self.cost_ops_reduced();
        let n = self.n;
        let c = self.t + 1;
        let d = &a.all - &b.all;
        let p0 = linalg::max_abs(&d.view((0, 0), (n, n)).into_owned());
        let p1 = linalg::max_abs(&d.view((0, n), (n, n * c)).into_owned());
        let p2 = linalg::max_abs(&d.view((n, n), (n * c, n * c)).into_owned());
        [p0, p1, p2]
    }

    /// Adjoint formulas tested on random stacked `g` (seeded):
    ///
    /// ```text
    /// Ψ1*g = -F*Q[LΛ⁻¹g],  Ψ2*g = -M*Q[LΛ⁻¹g],
    /// Z1*g = F*g + Ψ1*[L*g],  Z2*g = M*g + Ψ2*[L*g],
    /// ```
    /// with `Λ⁻¹ = S⁻¹W_u` and `L* = W_u⁻¹LᵀW_x` under the weighted inner products.
    pub fn adjoint_residuals(&self, seed: u64) -> [f64; 4] {
        let Some(eqs) = &self.eqs else {
            return [0.0; 4];
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nu = self.lop.l.ncols();
        let nx = self.lop.l.nrows();
        let gu = Mat::from_fn(nu, 1, |_, _| rng.gen_range(-1.0..1.0));
        let gx = Mat::from_fn(nx, 1, |_, _| rng.gen_range(-1.0..1.0));
        let lop = &self.lop;
        let n = self.n;

        // Ψ adjoints: weighted transpose vs formula
        let lhs_psi = self.psi.tr_mul(&lop.weighted_u(&gu));
        let lambda_inv_g = eqs.solve(&lop.weighted_u(&gu));
        let rhs_psi = -self.y.tr_mul(&lop.weighted_q(&self.q, &(&lop.l * lambda_inv_g)));
        let d_psi = lhs_psi - rhs_psi;

        // Z adjoints
        let lhs_z = self.z.tr_mul(&lop.weighted_x(&gx));
        let mut l_star_g = lop.l.tr_mul(&lop.weighted_x(&gx));
        for (p, w) in lop.weights.iter().enumerate() {
            l_star_g.rows_mut(p * self.m, self.m).scale_mut(1.0 / w);
        }
        let rhs_z = self.y.tr_mul(&lop.weighted_x(&gx)) + self.psi.tr_mul(&lop.weighted_u(&l_star_g));
        let d_z = lhs_z - rhs_z;

        let split = |d: &Mat| {
            let first = linalg::max_abs(&d.rows(0, n).into_owned());
            let rest = linalg::max_abs(&d.rows(n, d.nrows() - n).into_owned());
            (first, rest)
        };
        let (a1, a2) = split(&d_psi);
        let (a3, a4) = split(&d_z);
        [a1, a2, a3, a4]
    }

    /// `û(p) = Ψ1(p, t) ξ0 + Σ_s w_s Ψ2(p, s, t) ξ(s)` for initial data at this node.
    pub fn control_from_psi(&self, state: &AugmentedState) -> Vec<Vector> {
        let x = self.weighted_data(state);
        openloop::unstack(&(&self.psi * x), self.m)
    }

    /// `ŵ(p) = Z1(p, t) ξ0 + Σ_s w_s Z2(p, s, t) ξ(s)`.
    pub fn state_from_z(&self, state: &AugmentedState) -> Vec<Vector> {
        let x = self.weighted_data(state);
        openloop::unstack(&(&self.z * x), self.n)
    }

    fn weighted_data(&self, state: &AugmentedState) -> Vector {
        weighted_data(&trap_weights_on(self.t, self.h), state)
    }
}

fn trap_weights_on(t: usize, h: f64) -> Vec<f64> {
    (0..=t)
        .map(|s| if t == 0 { 0.0 } else if s == 0 || s == t { 0.5 * h } else { h })
        .collect()
}

/// `(ξ0, w_0 ξ(s_0), …, w_t ξ(s_t))` stacked.
fn weighted_data(weights: &[f64], state: &AugmentedState) -> Vector {
    let n = state.current.len();
    let mut x = Vector::zeros(n * (weights.len() + 1));
    x.rows_mut(0, n).copy_from(&state.current);
    for (s, (w, xi)) in weights.iter().zip(&state.history).enumerate() {
        x.rows_mut(n * (1 + s), n).copy_from(&(xi * *w));
    }
    x
}

/// `P0(t)`, `P1(t, s)`, `P2(t, s, q)` at one node, stored as the block matrix
/// `P` acting on `(ξ0, w_s ξ(s))`. Without the full flag only the first block
/// row is present.
#[derive(Debug, Clone)]
pub struct CostOperators {
    pub t: usize,
    n: usize,
    pub all: Mat,
    full: bool,
}

impl CostOperators {
    pub fn new(t: usize, n: usize, all: Mat, full: bool) -> Self {
        Self { t, n, all, full }
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn p0(&self) -> Mat {
        self.all.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn p1(&self, s: usize) -> Mat {
        self.all.view((0, self.n * (1 + s)), (self.n, self.n)).into_owned()
    }

    /// `P2(t, s, q)`: the block pairing `ξ(s)` with `ξ(q)`.
    pub fn p2(&self, s: usize, q: usize) -> Mat {
        assert!(self.full, "P2 requested from a first-row operator set");
        self.all
            .view((self.n * (1 + q), self.n * (1 + s)), (self.n, self.n))
            .into_owned()
    }

    pub fn norm(&self) -> f64 {
        linalg::max_abs(&self.all)
    }

    pub fn p2_symmetry_residual(&self) -> f64 {
        if !self.full {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for s in 0..=self.t {
            for q in 0..=s {
                worst = worst.max(linalg::max_abs_diff(&self.p2(s, q), &self.p2(q, s).transpose()));
            }
        }
        worst
    }
}

/// `⟨P0 ξ0, ξ0⟩ + 2 Σ_s w_s ⟨P1(s) ξ(s), ξ0⟩ + Σ Σ w_s w_q ⟨P2(s, q) ξ(s), ξ(q)⟩`.
pub fn optimal_cost_via_p(ops: &CostOperators, state: &AugmentedState, h: f64) -> f64 {
    assert!(ops.full);
    let x = weighted_data(&trap_weights_on(ops.t, h), state);
    x.dot(&(&ops.all * &x))
}

/// Augmented state at node `i` along an open-loop solution: history below `τ`,
/// then the optimal state, with the convention of the stepping module at `τ`.
pub fn augmented_along(instance: &ProblemInstance, sol: &OpenLoopSolution, i: usize) -> AugmentedState {
    let tau = sol.tau;
    let mut history = instance.init.history_nodes();
    for k in tau..i {
        let cur = sol.state(k);
        if history[k] != *cur {
            history[k] = (&history[k] + cur) * 0.5;
        }
        history.push(sol.state(k + 1).clone());
    }
    AugmentedState {
        node: i,
        current: sol.state(i).clone(),
        history,
    }
}

/// Node operators at every listed node, computed concurrently.
pub fn sweep(instance: &ProblemInstance, prop: &PropagatorTables, nodes: &[usize], full: bool) -> Result<Vec<CostOperators>> {
    nodes
        .par_iter()
        .map(|&t| {
            let ops = NodeOperators::build(instance, prop, t)?;
            Ok(if full {
                ops.cost_ops_reduced()
            } else {
                ops.cost_ops_first_row()
            })
        })
        .collect()
}

/// `max_i |û(t_i) + BᵀP0(t_i)ŵ(t_i) + Σ_s w_s BᵀP1(t_i, s)ŷ(s)|` over the
/// listed nodes, with `P` from the first-row synthesis at each node.
pub fn feedback_consistency(
    instance: &ProblemInstance,
    prop: &PropagatorTables,
    sol: &OpenLoopSolution,
    nodes: &[usize],
) -> Result<f64> {
    let rows = sweep(instance, prop, nodes, false)?;
    let h = instance.grid.step();
    let worst = nodes
        .iter()
        .zip(&rows)
        .map(|(&i, ops)| {
            let state = augmented_along(instance, sol, i);
            let w = trap_weights_on(i, h);
            let mut r = sol.control(i) + instance.b.tr_mul(&(ops.p0() * &state.current));
            for (s, y) in state.history.iter().enumerate() {
                if w[s] != 0.0 {
                    r += instance.b.tr_mul(&(ops.p1(s) * y)) * w[s];
                }
            }
            linalg::max_abs_vec(&r)
        })
        .fold(0.0, f64::max);
    Ok(worst)
}
