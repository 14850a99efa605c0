//! Open-loop optimal-control baseline by direct single shooting.
//!
//! For one scenario the solver optimizes the full duty sequence under the
//! same plant, time step, horizon, and soft-constrained objective the
//! policy is evaluated on. Duties are parameterized through a sigmoid of
//! free logits so the box bounds hold by construction. Three constant
//! duty starts (`v_ref/v_in`, 0.25, 0.75) guard against local minima; the
//! best start wins. Gradients come from the tape, updates from Adam.

use crate::autodiff::{Tape, Var};
use crate::dpc::{AdamOptimizer, DpcError, Scenario, Trajectory};
use crate::plant::{
    penalty, penalty_on_tape, stage_cost_on_tape, step, step_on_tape, ControlInput, Disturbance,
    StateVars,
};
use crate::real;
use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Shooting solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    /// Adam step size on the duty logits.
    pub learning_rate: f64,
    /// Iteration cap per start.
    pub max_iterations: usize,
    /// Convergence on the logit gradient infinity norm.
    pub gradient_tolerance: f64,
    /// Plateau window: stop once the best cost improves by less than
    /// `plateau_tolerance` (relative) over this many iterations.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Constraint penalty weight, matching the policy training loss.
    pub lambda: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            learning_rate: 0.05,
            max_iterations: 5000,
            gradient_tolerance: 1e-6,
            plateau_window: 50,
            plateau_tolerance: 1e-9,
            lambda: 10.0,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations == 0 || self.plateau_window == 0 {
            return Err("max_iterations and plateau_window must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gradient_tolerance", self.gradient_tolerance),
            ("plateau_tolerance", self.plateau_tolerance),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Best open-loop plan found for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution<T> {
    /// One duty per step, each strictly inside (0, 1).
    pub duty_sequence: Vec<T>,
    /// Soft-constrained objective of the sequence: tracking plus
    /// `lambda` times the penalty.
    pub cost: T,
    /// Mean stage cost plus terminal cost, the benchmark comparison value.
    pub tracking_cost: T,
    pub penalty: T,
    /// Iterations executed by the winning start.
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OcpError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] DpcError),
    #[error("duty sequence has length {found}, horizon needs {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("all {starts} shooting starts diverged")]
    AllStartsDiverged { starts: usize },
}

/// Numerically re-simulates a fixed duty sequence. This path goes through
/// the plain plant integrator, independent of the tape used by the solver,
/// so it doubles as the re-simulation check of reported costs.
pub fn replay<T: Scalar>(
    scenario: &Scenario<T>,
    duties: &[T],
) -> Result<Trajectory<T>, OcpError> {
    scenario.validate()?;
    if duties.len() != scenario.horizon {
        return Err(OcpError::WrongLength {
            expected: scenario.horizon,
            found: duties.len(),
        });
    }
    let disturbance = Disturbance::default();
    let mut y = scenario.initial_state;
    let mut states = Vec::with_capacity(scenario.horizon + 1);
    let mut stage_costs = Vec::with_capacity(scenario.horizon);
    let mut pen = T::zero();
    states.push(y);
    for (k, &duty) in duties.iter().enumerate() {
        let input = ControlInput { duty };
        stage_costs.push(crate::plant::stage_cost(&y, &input, &scenario.task));
        pen += penalty(&y, duty, &scenario.task);
        y = step(&y, &input, &disturbance, &scenario.plant, scenario.dt).map_err(|e| {
            DpcError::Unstable {
                step: k,
                i_l: e.i_l,
                v_c: e.v_c,
            }
        })?;
        states.push(y);
    }
    let terminal_cost = {
        let input = ControlInput { duty: duties[scenario.horizon - 1] };
        crate::plant::stage_cost(&y, &input, &scenario.task)
    };
    Ok(Trajectory {
        states,
        duties: duties.to_vec(),
        stage_costs,
        terminal_cost,
        penalty: pen,
    })
}

/// Records the open-loop rollout of sigmoid(logits) and returns
/// (objective, tracking, penalty) still on the tape.
pub fn objective_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    scenario: &Scenario<T>,
    logits: &[Var<'t, T>],
    lambda: T,
) -> Result<[Var<'t, T>; 3], DpcError> {
    let disturbance = Disturbance::default();
    let mut state = StateVars::leaf(tape, &scenario.initial_state);
    let mut stage_vars = Vec::with_capacity(scenario.horizon);
    let mut penalty_vars = Vec::with_capacity(scenario.horizon);
    for (k, &logit) in logits.iter().enumerate() {
        let duty = logit.sigmoid();
        stage_vars.push(stage_cost_on_tape(state.capacitor_voltage, scenario.task.v_ref));
        penalty_vars.push(penalty_on_tape(state.inductor_current, duty, &scenario.task));
        state = step_on_tape(state, duty, &disturbance, &scenario.plant, scenario.dt);
        let value = state.value();
        if !value.is_finite() {
            return Err(DpcError::Unstable {
                step: k,
                i_l: value.inductor_current.to_f64().unwrap_or(f64::NAN),
                v_c: value.capacitor_voltage.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let terminal = stage_cost_on_tape(state.capacitor_voltage, scenario.task.v_ref);
    let h_inv = real::<T>(scenario.horizon as f64).recip();
    let stage_sum = stage_vars.into_iter().reduce(|a, b| a + b).expect("horizon >= 1");
    let pen = penalty_vars.into_iter().reduce(|a, b| a + b).expect("horizon >= 1");
    let tracking = stage_sum * h_inv + terminal;
    let objective = tracking + pen * lambda;
    Ok([objective, tracking, pen])
}

struct StartOutcome<T> {
    logits: Vec<T>,
    cost: T,
    tracking: T,
    penalty: T,
    iterations: usize,
    converged: bool,
}

/// Runs Adam from one logit vector, tracking the best-so-far iterate.
fn optimize_start<T: Scalar>(
    scenario: &Scenario<T>,
    config: &OcpConfig,
    mut logits: Vec<T>,
) -> Result<StartOutcome<T>, DpcError> {
    let lambda = real::<T>(config.lambda);
    let mut adam = AdamOptimizer::new(
        logits.len(),
        real::<T>(config.learning_rate),
        real(0.9),
        real(0.999),
        real(1e-8),
    );
    let mut best = Evaluation::measure(scenario, &logits, lambda)?;
    let mut best_logits = logits.clone();
    let mut window_anchor = best.objective;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = logits.iter().map(|&l| tape.scalar(l)).collect();
        let [objective, tracking, pen] = objective_on_tape(&tape, scenario, &vars, lambda)?;
        let grads = tape.gradients(objective)?;

        if objective.value() < best.objective {
            best = Evaluation {
                objective: objective.value(),
                tracking: tracking.value(),
                penalty: pen.value(),
            };
            best_logits.copy_from_slice(&logits);
        }

        let mut grad = Vec::with_capacity(logits.len());
        let mut grad_norm = T::zero();
        for &v in &vars {
            let g = grads.wrt(v);
            grad_norm = grad_norm.max(g.abs());
            grad.push(g);
        }
        if grad_norm < real(config.gradient_tolerance) {
            converged = true;
            break;
        }
        if (iter + 1) % config.plateau_window == 0 {
            let floor = best.objective.abs().max(real(1e-12));
            if window_anchor - best.objective < real::<T>(config.plateau_tolerance) * floor {
                converged = true;
                break;
            }
            window_anchor = best.objective;
        }
        adam.step(&mut logits, &grad);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(DpcError::Unstable {
                step: iter,
                i_l: f64::NAN,
                v_c: f64::NAN,
            });
        }
    }

    Ok(StartOutcome {
        logits: best_logits,
        cost: best.objective,
        tracking: best.tracking,
        penalty: best.penalty,
        iterations,
        converged,
    })
}

struct Evaluation<T> {
    objective: T,
    tracking: T,
    penalty: T,
}

impl<T: Scalar> Evaluation<T> {
    fn measure(scenario: &Scenario<T>, logits: &[T], lambda: T) -> Result<Self, DpcError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = logits.iter().map(|&l| tape.scalar(l)).collect();
        let [objective, tracking, pen] = objective_on_tape(&tape, scenario, &vars, lambda)?;
        Ok(Evaluation {
            objective: objective.value(),
            tracking: tracking.value(),
            penalty: pen.value(),
        })
    }
}

/// Constant duty starts, logit-transformed: the reference conversion
/// ratio plus a low and a high bracket.
fn starting_logits<T: Scalar>(scenario: &Scenario<T>) -> Vec<Vec<T>> {
    let ratio = scenario.task.v_ref / scenario.plant.v_in;
    [ratio, real(0.25), real(0.75)]
        .into_iter()
        .map(|p| {
            let p = p.max(real(1e-3)).min(real(1.0 - 1e-3));
            let logit = (p / (T::one() - p)).ln();
            vec![logit; scenario.horizon]
        })
        .collect()
}

/// Solves the open-loop problem, returning the best start's plan.
pub fn solve<T: Scalar>(
    scenario: &Scenario<T>,
    config: &OcpConfig,
) -> Result<OcpSolution<T>, OcpError> {
    config.validate().map_err(OcpError::Config)?;
    scenario.validate()?;
    let starts = starting_logits(scenario);
    let n_starts = starts.len();
    let mut best: Option<StartOutcome<T>> = None;
    for logits in starts {
        match optimize_start(scenario, config, logits) {
            Ok(outcome) => {
                let better = best
                    .as_ref()
                    .map(|b| outcome.cost < b.cost)
                    .unwrap_or(true);
                if better {
                    best = Some(outcome);
                }
            }
            Err(DpcError::Unstable { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let winner = best.ok_or(OcpError::AllStartsDiverged { starts: n_starts })?;
    let duty_sequence: Vec<T> = winner
        .logits
        .iter()
        .map(|&l| T::one() / (T::one() + (-l).exp()))
        .collect();
    Ok(OcpSolution {
        duty_sequence,
        cost: winner.cost,
        tracking_cost: winner.tracking,
        penalty: winner.penalty,
        iterations: winner.iterations,
        converged: winner.converged,
    })
}

/// Writes a per-step trajectory dump. Row `k` holds the state in which
/// `duty_k` was applied; the final row carries the terminal state with an
/// empty duty column.
pub fn write_trajectory_csv<T: Scalar, W: std::io::Write>(
    mut w: W,
    trajectory: &Trajectory<T>,
) -> std::io::Result<()> {
    writeln!(w, "k,duty_k,v_c_k,i_l_k")?;
    for (k, state) in trajectory.states.iter().enumerate() {
        let v_c = state.capacitor_voltage.to_f64().unwrap_or(f64::NAN);
        let i_l = state.inductor_current.to_f64().unwrap_or(f64::NAN);
        match trajectory.duties.get(k) {
            Some(d) => writeln!(w, "{k},{:e},{v_c:e},{i_l:e}", d.to_f64().unwrap_or(f64::NAN))?,
            None => writeln!(w, "{k},,{v_c:e},{i_l:e}")?,
        }
    }
    Ok(())
}
