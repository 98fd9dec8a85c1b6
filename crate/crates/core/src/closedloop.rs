//! Closed-loop simulation under the feedback law
//! `u(t) = -G0(t) w(t) - ∫_0^t G1(t, s) y(s) ds` with gains from the Riccati
//! solution, and the evolution map it induces on augmented states.

use crate::linalg::{self, Vector};
use crate::model::ProblemInstance;
use crate::riccati::{self, FeedbackGains, RiccatiSolution, Scheme};
use crate::stepping::{evaluate_cost, AugmentedState, StateStepper, Stepper, Trajectory};
use crate::{Error, Result};

/// Gain tables on the instance grid.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub gains: FeedbackGains,
    pub stepper: Stepper,
}

impl FeedbackLaw {
    pub fn new(gains: FeedbackGains, stepper: Stepper) -> Self {
        Self { gains, stepper }
    }

    /// Gains of a Riccati solution; the inner stepper follows the scheme order.
    pub fn from_riccati(sol: &RiccatiSolution, instance: &ProblemInstance) -> Self {
        let stepper = match sol.scheme {
            Scheme::Euler => Stepper::Euler,
            Scheme::Heun => Stepper::Trapezoid,
        };
        Self::new(riccati::feedback_gains(sol, &instance.b), stepper)
    }

    /// `u_k = -G0[k] w_k - Σ_l w_l G1[k][l] y_l` (trapezoid on `[0, t_k]`).
    pub fn control(&self, state: &AugmentedState, h: f64) -> Vector {
        let k = state.node;
        let mut u = -(&self.gains.g0[k] * &state.current);
        if k > 0 {
            for (l, y) in state.history.iter().enumerate() {
                let w = if l == 0 || l == k { 0.5 * h } else { h };
                u -= &self.gains.g1[k][l] * y * w;
            }
        }
        u
    }

    pub fn check(&self, instance: &ProblemInstance) -> Result<()> {
        let steps = instance.grid.steps();
        if self.gains.g0.len() != steps + 1 || self.gains.g1.len() != steps + 1 {
            return Err(Error::Dimension("gain tables do not match the grid".into()));
        }
        if self.gains.g0.iter().any(|g| g.shape() != (instance.m, instance.n)) {
            return Err(Error::Dimension(format!("gains must be {}x{}", instance.m, instance.n)));
        }
        Ok(())
    }
}

/// One closed-loop step from node `k` to `k + 1`. For the trapezoid stepper
/// the unknown control at `k + 1` is taken from a predictor step that lags
/// the control.
fn feedback_step(stepper: &StateStepper<'_>, law: &FeedbackLaw, state: &mut AugmentedState, h: f64) -> Result<Vector> {
    let u_now = law.control(state, h);
    match stepper.stepper() {
        Stepper::Euler => stepper.step(state, &u_now, &u_now)?,
        Stepper::Trapezoid => {
            let mut predicted = state.clone();
            stepper.step(&mut predicted, &u_now, &u_now)?;
            let u_pred = law.control(&predicted, h);
            stepper.step(state, &u_now, &u_pred)?;
        }
    }
    Ok(u_now)
}

/// March the closed loop from `start` to node `end`, returning the final
/// state and the samples visited (states and controls at `start.node..=end`).
pub fn march(
    instance: &ProblemInstance,
    law: &FeedbackLaw,
    start: AugmentedState,
    end: usize,
) -> Result<(AugmentedState, Vec<Vector>, Vec<Vector>)> {
    law.check(instance)?;
    if start.node > end || end > instance.grid.steps() {
        return Err(Error::Dimension(format!("cannot march from node {} to {end}", start.node)));
    }
    if start.current.len() != instance.n || start.history.len() != start.node + 1 {
        return Err(Error::Dimension("augmented state does not match the instance".into()));
    }
    let h = instance.grid.step();
    let stepper = StateStepper::new(instance, law.stepper)?;
    let mut state = start;
    let mut states = vec![state.current.clone()];
    let mut controls = Vec::new();
    while state.node < end {
        controls.push(feedback_step(&stepper, law, &mut state, h)?);
        states.push(state.current.clone());
    }
    controls.push(law.control(&state, h));
    Ok((state, states, controls))
}

/// Closed-loop trajectory from the instance's initial data.
pub fn simulate_feedback(instance: &ProblemInstance, law: &FeedbackLaw) -> Result<Trajectory> {
    let start = AugmentedState::initial(instance);
    let tau = start.node;
    let (_, states, controls) = march(instance, law, start, instance.grid.steps())?;
    let cost = evaluate_cost(&states, &controls, &instance.q, instance, tau);
    Ok(Trajectory {
        start: tau,
        states,
        controls,
        cost,
    })
}

/// `Φ(t_i, t_j) X`.
pub fn evolution_apply(instance: &ProblemInstance, law: &FeedbackLaw, i: usize, x: &AugmentedState) -> Result<AugmentedState> {
    Ok(march(instance, law, x.clone(), i)?.0)
}

/// `|cost-to-go on [t_i, T] - ⟨P(t_i) X_i, X_i⟩|` with `X_i = Φ(t_i, τ) X0`;
/// needs a `P2` checkpoint at node `i`. Returns the gap and the cost-to-go.
pub fn value_consistency(
    instance: &ProblemInstance,
    law: &FeedbackLaw,
    sol: &RiccatiSolution,
    i: usize,
) -> Result<(f64, f64)> {
    let start = AugmentedState::initial(instance);
    if i < start.node {
        return Err(Error::Dimension(format!("node {i} precedes the initial node")));
    }
    let (x_i, _, _) = march(instance, law, start, i)?;
    let (_, states, controls) = march(instance, law, x_i.clone(), instance.grid.steps())?;
    let to_go = evaluate_cost(&states, &controls, &instance.q, instance, i);
    let big = riccati::assemble_big_p(sol, i)?;
    let form = riccati::quadratic_form(&big, &x_i.current, &x_i.history);
    Ok(((to_go - form).abs(), to_go))
}

/// `max |u_cl - û|` over the common nodes.
pub fn control_gap(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| linalg::max_abs_diff_vec(x, y))
        .fold(0.0, f64::max)
}
