//! Time stepping of the state equation on the grid, shared by the direct
//! simulator and the closed-loop simulation.
//!
//! The state carried from node to node is the augmented pair (current value,
//! samples of the path on `[0, t_k]`). Each step is a function of that pair
//! and the controls alone, so restarting a march from any intermediate
//! state reproduces the uninterrupted march bit for bit.

use nalgebra::LU;

use crate::linalg::{Mat, Vector};
use crate::model::ProblemInstance;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    /// Explicit Euler, first order.
    Euler,
    /// Trapezoid rule with an implicit solve for the `A` and `K(0)` parts, second order.
    Trapezoid,
}

/// State at node `node`: `current = w(t_node+)` and path samples `history[l]`,
/// `l = 0..=node`. Only `history[node]` may differ from `current` (a jump at
/// the initial time), and it is replaced by the two-sided average once the
/// node becomes interior.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub node: usize,
    pub current: Vector,
    pub history: Vec<Vector>,
}

impl AugmentedState {
    pub fn new(node: usize, current: Vector, history: Vec<Vector>) -> Result<Self> {
        if history.len() != node + 1 {
            return Err(Error::Dimension(format!(
                "augmented state at node {node} needs {} history samples, got {}",
                node + 1,
                history.len()
            )));
        }
        let n = current.len();
        if history.iter().any(|h| h.len() != n) {
            return Err(Error::Dimension("history samples must match the state dimension".into()));
        }
        Ok(Self {
            node,
            current,
            history,
        })
    }

    /// Initial augmented state of an instance.
    pub fn initial(instance: &ProblemInstance) -> Self {
        let init = &instance.init;
        Self {
            node: init.tau_index(),
            current: init.xi0().clone(),
            history: init.history_nodes(),
        }
    }

    pub fn zeros(node: usize, n: usize) -> Self {
        Self {
            node,
            current: Vector::zeros(n),
            history: vec![Vector::zeros(n); node + 1],
        }
    }

    /// `α·self + β·other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        assert_eq!(self.node, other.node);
        Self {
            node: self.node,
            current: &self.current * alpha + &other.current * beta,
            history: self
                .history
                .iter()
                .zip(&other.history)
                .map(|(x, y)| x * alpha + y * beta)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d = crate::linalg::max_abs_diff_vec(&self.current, &other.current);
        for (x, y) in self.history.iter().zip(&other.history) {
            d = d.max(crate::linalg::max_abs_diff_vec(x, y));
        }
        d
    }
}

/// Single-step integrator for one instance.
pub struct StateStepper<'a> {
    instance: &'a ProblemInstance,
    stepper: Stepper,
    lhs: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<'a> StateStepper<'a> {
    pub fn new(instance: &'a ProblemInstance, stepper: Stepper) -> Result<Self> {
        let lhs = match stepper {
            Stepper::Euler => None,
            Stepper::Trapezoid => {
                let h = instance.grid.step();
                let n = instance.n;
                let m = Mat::identity(n, n) - &instance.a * (0.5 * h) - instance.kernel.block(0) * (0.25 * h * h);
                let lu = m.lu();
                if !lu.is_invertible() {
                    return Err(Error::numerical(None, "implicit step matrix is singular"));
                }
                Some(lu)
            }
        };
        Ok(Self {
            instance,
            stepper,
            lhs,
        })
    }

    pub fn stepper(&self) -> Stepper {
        self.stepper
    }

    /// `Σ_l w_l K(t_target - t_l) y_l` over `l = 0..=k` with trapezoid weights on
    /// `[0, t_k]`, where `y = state.history`.
    pub fn convolution(&self, state: &AugmentedState, target: usize) -> Vector {
        let k = state.node;
        let grid = &self.instance.grid;
        let mut acc = Vector::zeros(self.instance.n);
        if k == 0 {
            return acc;
        }
        let kernel = &self.instance.kernel;
        for (l, y) in state.history.iter().enumerate() {
            acc += kernel.apply(target - l, y) * grid.trap_weight(l, 0, k);
        }
        acc
    }

    /// Advance from node `k` to `k + 1` with controls `u_k`, `u_{k+1}`
    /// (the Euler step ignores `u_{k+1}`).
    pub fn step(&self, state: &mut AugmentedState, u_now: &Vector, u_next: &Vector) -> Result<()> {
        let k = state.node;
        let p = self.instance;
        let h = p.grid.step();
        if k >= p.grid.steps() {
            return Err(Error::numerical(Some(k), "cannot step past the final node"));
        }
        let c_now = self.convolution(state, k);
        let bu = &p.b * u_now;
        let next = match &self.lhs {
            None => &state.current + (&p.a * &state.current + c_now + bu) * h,
            Some(lu) => {
                let mut c_hist = self.convolution(state, k + 1);
                c_hist += p.kernel.apply(1, &state.current) * (0.5 * h);
                let rhs = &state.current
                    + (&p.a * &state.current + c_now + bu + c_hist + &p.b * u_next) * (0.5 * h);
                lu.solve(&rhs)
                    .ok_or_else(|| Error::numerical(Some(k), "implicit step solve failed"))?
            }
        };
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::numerical(Some(k + 1), "state not finite"));
        }
        let last = &mut state.history[k];
        if *last != state.current {
            *last = (&*last + &state.current) * 0.5;
        }
        state.history.push(next.clone());
        state.current = next;
        state.node = k + 1;
        Ok(())
    }
}

/// State and control samples on nodes `start..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: usize,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub cost: f64,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &Vector {
        &self.states[i - self.start]
    }

    pub fn control(&self, i: usize) -> &Vector {
        &self.controls[i - self.start]
    }
}

/// Trapezoid rule for `∫ ⟨Qw, w⟩ + |u|²` over the nodes `start..=N`.
pub fn evaluate_cost(states: &[Vector], controls: &[Vector], q: &Mat, instance: &ProblemInstance, start: usize) -> f64 {
    let grid = &instance.grid;
    let end = grid.steps();
    assert_eq!(states.len(), end - start + 1);
    assert_eq!(controls.len(), end - start + 1);
    let mut total = 0.0;
    for (offset, (w, u)) in states.iter().zip(controls).enumerate() {
        let i = start + offset;
        total += grid.trap_weight(i, start, end) * ((q * w).dot(w) + u.norm_squared());
    }
    total
}

/// Run the state equation from the instance's initial data under the given
/// control samples (one per node `τ..=N`).
pub fn simulate_direct(instance: &ProblemInstance, controls: &[Vector], stepper: Stepper) -> Result<Trajectory> {
    let tau = instance.init.tau_index();
    let steps = instance.grid.steps();
    if controls.len() != steps - tau + 1 {
        return Err(Error::Dimension(format!(
            "expected {} control samples, got {}",
            steps - tau + 1,
            controls.len()
        )));
    }
    if controls.iter().any(|u| u.len() != instance.m) {
        return Err(Error::Dimension(format!("controls must be {}-vectors", instance.m)));
    }
    let stepper = StateStepper::new(instance, stepper)?;
    let mut state = AugmentedState::initial(instance);
    let mut states = Vec::with_capacity(controls.len());
    states.push(state.current.clone());
    for k in tau..steps {
        stepper.step(&mut state, &controls[k - tau], &controls[k + 1 - tau])?;
        states.push(state.current.clone());
    }
    let cost = evaluate_cost(&states, controls, &instance.q, instance, tau);
    Ok(Trajectory {
        start: tau,
        states,
        controls: controls.to_vec(),
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_instance, KernelSpec};

    fn uncontrolled_error(a: f64, kernel: KernelSpec, steps: usize, exact: impl Fn(f64) -> f64) -> f64 {
        let p = scalar_instance(a, 1.0, 1.0, kernel, 1.0, steps).unwrap();
        let u = vec![Vector::zeros(1); steps + 1];
        let traj = simulate_direct(&p, &u, Stepper::Trapezoid).unwrap();
        (0..=steps)
            .map(|i| (traj.state(i)[0] - exact(p.grid.node(i))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn pure_semigroup_second_order() {
        let e1 = uncontrolled_error(-1.5, KernelSpec::Zero, 50, |t| (-1.5 * t).exp());
        let e2 = uncontrolled_error(-1.5, KernelSpec::Zero, 100, |t| (-1.5 * t).exp());
        assert!(e1 < 1e-3);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn memory_oscillator() {
        let k = KernelSpec::Constant { value: -1.0, matrix: None };
        let e1 = uncontrolled_error(0.0, k.clone(), 50, f64::cos);
        let e2 = uncontrolled_error(0.0, k, 100, f64::cos);
        assert!(e1 < 1e-3);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn euler_is_first_order() {
        let err = |steps: usize| {
            let p = scalar_instance(0.0, 1.0, 1.0, KernelSpec::Constant { value: -1.0, matrix: None }, 1.0, steps).unwrap();
            let traj = simulate_direct(&p, &vec![Vector::zeros(1); steps + 1], Stepper::Euler).unwrap();
            (0..=steps).map(|i| (traj.state(i)[0] - p.grid.node(i).cos()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(100) / err(200);
        assert!((1.6..2.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn restart_reproduces_march() {
        let p = crate::model::build_random_stable(2, 1, 5, 1.0, 20).unwrap();
        let s = StateStepper::new(&p, Stepper::Trapezoid).unwrap();
        let u: Vec<Vector> = (0..=20).map(|i| Vector::from_element(1, (i as f64).sin())).collect();
        let mut full = AugmentedState::initial(&p);
        for k in 0..20 {
            s.step(&mut full, &u[k], &u[k + 1]).unwrap();
        }
        let mut part = AugmentedState::initial(&p);
        for k in 0..7 {
            s.step(&mut part, &u[k], &u[k + 1]).unwrap();
        }
        let mut resumed = AugmentedState::new(part.node, part.current.clone(), part.history.clone()).unwrap();
        for k in 7..20 {
            s.step(&mut resumed, &u[k], &u[k + 1]).unwrap();
        }
        assert_eq!(full, resumed);
    }

    #[test]
    fn cost_of_constant_samples() {
        let p = scalar_instance(0.0, 1.0, 2.0, KernelSpec::Zero, 1.0, 10).unwrap();
        let w = vec![Vector::from_element(1, 1.0); 11];
        let u = vec![Vector::from_element(1, 3.0); 11];
        assert!((evaluate_cost(&w, &u, &p.q, &p, 0) - 11.0).abs() < 1e-13);
    }
}
