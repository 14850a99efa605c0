//! Policy training by differentiating closed-loop rollouts.
//!
//! A rollout alternates the policy and the plant for a fixed horizon on a
//! single tape, so one backward sweep yields the gradient of the rollout
//! objective with respect to every policy weight. Training samples a fresh
//! batch of scenarios each step from a caller-supplied sampler, averages
//! the per-scenario gradients, and applies Adam. Scenario seeds derive
//! deterministically from (master seed, step, batch index); failures
//! report the offending seed so any single rollout can be replayed.

use crate::autodiff::Tape;
use crate::gnn::{GnnConfig, GnnError};
use crate::netlist::{validate_buck, BuckError, ConverterGraph};
use crate::plant::{
    penalty_on_tape, stage_cost_on_tape, step_on_tape, Conventions, Disturbance, PlantParameters,
    PlantState, StateVars, TaskContext, TaskError,
};
use crate::policy::{duties_on_tape, BoundPlan, FeaturePlan, PolicyError, PolicyParameters};
use crate::real;
use crate::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One training or evaluation episode: a converter, a task, an initial
/// state, and the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub graph: ConverterGraph<T>,
    pub plant: PlantParameters<T>,
    pub task: TaskContext<T>,
    pub initial_state: PlantState<T>,
    pub horizon: usize,
    pub dt: T,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpcError {
    #[error(transparent)]
    Graph(#[from] BuckError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("time step {dt} must be finite and positive")]
    BadTimeStep { dt: f64 },
    #[error("initial state is not finite")]
    BadInitialState,
    #[error("rollout diverged at step {step} (i_l = {i_l}, v_c = {v_c})")]
    Unstable { step: usize, i_l: f64, v_c: f64 },
}

impl<T: Scalar> Scenario<T> {
    /// Builds a scenario from a netlist graph, deriving the plant and the
    /// time step from the component values.
    pub fn from_graph(
        graph: ConverterGraph<T>,
        task: TaskContext<T>,
        initial_state: PlantState<T>,
        horizon: usize,
        conventions: &Conventions,
    ) -> Result<Self, DpcError> {
        let plant = validate_buck(&graph)?;
        let dt = plant.time_step(conventions);
        let scenario = Scenario {
            graph,
            plant,
            task,
            initial_state,
            horizon,
            dt,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), DpcError> {
        let extracted = validate_buck(&self.graph)?;
        if extracted != self.plant {
            let to64 = |p: &PlantParameters<T>| PlantParameters {
                v_in: p.v_in.to_f64().unwrap_or(f64::NAN),
                inductance: p.inductance.to_f64().unwrap_or(f64::NAN),
                capacitance: p.capacitance.to_f64().unwrap_or(f64::NAN),
                r_load: p.r_load.to_f64().unwrap_or(f64::NAN),
            };
            return Err(DpcError::Policy(PolicyError::PlantMismatch {
                graph_params: to64(&extracted),
                given: to64(&self.plant),
            }));
        }
        self.task.validate(&self.plant)?;
        if self.horizon == 0 {
            return Err(DpcError::EmptyHorizon);
        }
        if !(self.dt.is_finite() && self.dt > T::zero()) {
            return Err(DpcError::BadTimeStep {
                dt: self.dt.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !self.initial_state.is_finite() {
            return Err(DpcError::BadInitialState);
        }
        Ok(())
    }
}

/// Closed-loop trace with its cost decomposition. Stage costs are the
/// per-step squared tracking errors before averaging; the penalty is the
/// plain sum of the per-step constraint terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// Visited states, `horizon + 1` entries starting at the initial state.
    pub states: Vec<PlantState<T>>,
    /// Duty commands, one per step.
    pub duties: Vec<T>,
    pub stage_costs: Vec<T>,
    pub terminal_cost: T,
    pub penalty: T,
}

impl<T: Scalar> Trajectory<T> {
    /// Mean stage cost plus the terminal cost.
    pub fn tracking_cost(&self) -> T {
        let h = real::<T>(self.stage_costs.len() as f64);
        self.stage_costs.iter().copied().sum::<T>() / h + self.terminal_cost
    }

    /// Tracking cost plus `lambda` times the constraint penalty.
    pub fn objective(&self, lambda: T) -> T {
        self.tracking_cost() + lambda * self.penalty
    }
}

/// Objective pieces of one rollout still attached to the tape.
pub struct RolloutVars<'t, T> {
    pub tracking: crate::autodiff::Var<'t, T>,
    pub penalty: crate::autodiff::Var<'t, T>,
    pub objective: crate::autodiff::Var<'t, T>,
}

/// Runs the closed loop on `tape` and returns both the differentiable
/// objective and the recorded numeric trajectory.
pub fn rollout_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    scenario: &Scenario<T>,
    policy: &crate::policy::BoundPolicy<'t, T>,
    lambda: T,
) -> Result<(RolloutVars<'t, T>, Trajectory<T>), DpcError> {
    scenario.validate()?;
    let plan = FeaturePlan::new(&scenario.graph, &scenario.plant, &scenario.task)?;
    let bound_plan = BoundPlan::bind(tape, &plan);
    let disturbance = Disturbance::default();

    let mut state = StateVars::leaf(tape, &scenario.initial_state);
    let mut states = Vec::with_capacity(scenario.horizon + 1);
    let mut duties = Vec::with_capacity(scenario.horizon);
    let mut stage_costs = Vec::with_capacity(scenario.horizon);
    let mut stage_vars = Vec::with_capacity(scenario.horizon);
    let mut penalty_vars = Vec::with_capacity(scenario.horizon);
    states.push(scenario.initial_state);

    for step in 0..scenario.horizon {
        let snapshot = bound_plan.snapshot(&state);
        let duty = duties_on_tape(
            tape,
            &scenario.graph,
            &snapshot,
            bound_plan.switch_nodes(),
            policy,
        )?[0];
        let stage = stage_cost_on_tape(state.capacitor_voltage, scenario.task.v_ref);
        let pen = penalty_on_tape(state.inductor_current, duty, &scenario.task);

        state = step_on_tape(state, duty, &disturbance, &scenario.plant, scenario.dt);
        let value = state.value();
        if !value.is_finite() {
            return Err(DpcError::Unstable {
                step,
                i_l: value.inductor_current.to_f64().unwrap_or(f64::NAN),
                v_c: value.capacitor_voltage.to_f64().unwrap_or(f64::NAN),
            });
        }

        states.push(value);
        duties.push(duty.value());
        stage_costs.push(stage.value());
        stage_vars.push(stage);
        penalty_vars.push(pen);
    }

    let terminal = stage_cost_on_tape(state.capacitor_voltage, scenario.task.v_ref);
    let h_inv = real::<T>(scenario.horizon as f64).recip();
    let stage_sum = stage_vars
        .into_iter()
        .reduce(|a, b| a + b)
        .expect("horizon >= 1");
    let penalty = penalty_vars
        .into_iter()
        .reduce(|a, b| a + b)
        .expect("horizon >= 1");
    let tracking = stage_sum * h_inv + terminal;
    let objective = tracking + penalty * lambda;

    let trajectory = Trajectory {
        states,
        duties,
        stage_costs,
        terminal_cost: terminal.value(),
        penalty: penalty.value(),
    };
    Ok((
        RolloutVars {
            tracking,
            penalty,
            objective,
        },
        trajectory,
    ))
}

/// Numeric closed-loop rollout; records a fresh tape internally.
pub fn rollout<T: Scalar>(
    scenario: &Scenario<T>,
    params: &PolicyParameters<T>,
) -> Result<Trajectory<T>, DpcError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (_, trajectory) = rollout_on_tape(&tape, scenario, &bound, T::zero())?;
    Ok(trajectory)
}

/// Mean rollout objective over a batch.
pub fn dpc_loss<T: Scalar>(
    batch: &[Scenario<T>],
    params: &PolicyParameters<T>,
    lambda: T,
) -> Result<T, DpcError> {
    let mut total = T::zero();
    for scenario in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (vars, _) = rollout_on_tape(&tape, scenario, &bound, lambda)?;
        total += vars.objective.value();
    }
    Ok(total / real(batch.len() as f64))
}

/// Mean loss decomposition plus the mean gradient in flat parameter order.
pub struct BatchGradients<T> {
    pub loss: T,
    pub tracking: T,
    pub penalty: T,
    pub gradient: Vec<T>,
}

/// (objective, tracking, penalty, flat gradient) of one rollout.
type RolloutMeasurement<T> = Result<(T, T, T, Vec<T>), DpcError>;

/// Differentiates the mean objective of `batch`. Scenario order is fixed,
/// so accumulation order (and therefore the result) does not depend on
/// thread count.
pub fn loss_gradients<T: Scalar>(
    batch: &[Scenario<T>],
    params: &PolicyParameters<T>,
    lambda: T,
) -> Result<BatchGradients<T>, (usize, DpcError)> {
    let n = batch.len();
    assert!(n > 0, "batch must not be empty");
    let per_scenario: Vec<RolloutMeasurement<T>> = {
        use rayon::prelude::*;
        batch
            .par_iter()
            .map(|scenario| {
                let tape = Tape::new();
                let bound = params.bind(&tape);
                let (vars, _) = rollout_on_tape(&tape, scenario, &bound, lambda)?;
                let grads = tape.gradients(vars.objective)?;
                let mut flat = Vec::with_capacity(params.parameter_count());
                bound.push_gradients(&grads, &mut flat);
                Ok((
                    vars.objective.value(),
                    vars.tracking.value(),
                    vars.penalty.value(),
                    flat,
                ))
            })
            .collect()
    };

    let scale = real::<T>(n as f64).recip();
    let mut out = BatchGradients {
        loss: T::zero(),
        tracking: T::zero(),
        penalty: T::zero(),
        gradient: vec![T::zero(); params.parameter_count()],
    };
    for (index, item) in per_scenario.into_iter().enumerate() {
        let (loss, tracking, penalty, flat) = item.map_err(|e| (index, e))?;
        out.loss += loss * scale;
        out.tracking += tracking * scale;
        out.penalty += penalty * scale;
        for (acc, g) in out.gradient.iter_mut().zip(&flat) {
            *acc += *g * scale;
        }
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamOptimizer<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Scalar> AdamOptimizer<T> {
    pub fn new(dimension: usize, learning_rate: T, beta1: T, beta2: T, epsilon: T) -> Self {
        AdamOptimizer {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: vec![T::zero(); dimension],
            v: vec![T::zero(); dimension],
            t: 0,
        }
    }

    /// One update in place: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, parameters: &mut [T], gradient: &[T]) {
        assert_eq!(parameters.len(), self.m.len());
        assert_eq!(gradient.len(), self.m.len());
        self.t += 1;
        let t = real::<T>(f64::from(self.t));
        let c1 = T::one() - self.beta1.powf(t);
        let c2 = T::one() - self.beta2.powf(t);
        for i in 0..parameters.len() {
            let g = gradient[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            parameters[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Training schedule and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Number of optimizer steps; each step draws a fresh batch.
    pub steps: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    /// Constraint penalty weight.
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            steps: 2000,
            batch_size: 16,
            horizon: 200,
            learning_rate: 1e-3,
            lambda: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 || self.batch_size == 0 || self.horizon == 0 {
            return Err("steps, batch_size and horizon must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("beta1 and beta2 must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Draws the scenario for one (step, batch index) slot.
pub trait ScenarioSampler<T: Scalar>: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng, horizon: usize) -> Scenario<T>;
}

impl<T: Scalar, F> ScenarioSampler<T> for F
where
    F: Fn(&mut ChaCha8Rng, usize) -> Scenario<T> + Sync,
{
    fn sample(&self, rng: &mut ChaCha8Rng, horizon: usize) -> Scenario<T> {
        self(rng, horizon)
    }
}

/// SplitMix64 finalizer; decorrelates nearby seed inputs.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-scenario seed for a (master, step, index) slot.
pub fn scenario_seed(master: u64, step: usize, index: usize, batch_size: usize) -> u64 {
    let slot = (step as u64).wrapping_mul(batch_size as u64).wrapping_add(index as u64);
    splitmix64(master ^ splitmix64(slot))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_tracking: f64,
    pub mean_penalty: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("step {step}, scenario seed {scenario_seed}: {source}")]
    Rollout {
        step: usize,
        scenario_seed: u64,
        source: DpcError,
    },
    #[error("loss diverged at step {step} (mean loss {loss}); first bad scenario seed {scenario_seed}")]
    Diverged {
        step: usize,
        loss: f64,
        scenario_seed: u64,
    },
}

/// Writes the training log as CSV.
pub fn write_training_log<W: std::io::Write>(
    mut w: W,
    log: &[StepLog],
) -> std::io::Result<()> {
    writeln!(w, "step,mean_loss,mean_tracking,mean_penalty,wall_time_s")?;
    for row in log {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:.3}",
            row.step, row.mean_loss, row.mean_tracking, row.mean_penalty, row.wall_time_s
        )?;
    }
    Ok(())
}

/// Trains a policy from scratch, appending one log row per completed
/// optimizer step to `log` (rows written so far survive a failure) and
/// reporting each row to `on_step` as it lands. Fully deterministic for a
/// fixed configuration and sampler, independent of thread count.
pub fn train<T: Scalar, S: ScenarioSampler<T>>(
    gnn_config: GnnConfig,
    config: &TrainConfig,
    sampler: &S,
    log: &mut Vec<StepLog>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PolicyParameters<T>, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    gnn_config
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let params = PolicyParameters::<T>::init(gnn_config, config.seed);
    let mut flat = params.to_flat();
    let mut adam = AdamOptimizer::new(
        flat.len(),
        real::<T>(config.learning_rate),
        real(config.beta1),
        real(config.beta2),
        real(config.epsilon),
    );
    let lambda = real::<T>(config.lambda);
    log.reserve(config.steps);
    let start = Instant::now();

    let mut current = params;
    for step in 0..config.steps {
        let seeds: Vec<u64> = (0..config.batch_size)
            .map(|i| scenario_seed(config.seed, step, i, config.batch_size))
            .collect();
        let batch: Vec<Scenario<T>> = seeds
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                sampler.sample(&mut rng, config.horizon)
            })
            .collect();

        let result = loss_gradients(&batch, &current, lambda).map_err(|(index, source)| {
            TrainError::Rollout {
                step,
                scenario_seed: seeds[index],
                source,
            }
        })?;
        let loss = result.loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                loss,
                scenario_seed: seeds[0],
            });
        }

        adam.step(&mut flat, &result.gradient);
        current = PolicyParameters::from_flat(gnn_config, &flat).map_err(|_| {
            TrainError::Diverged {
                step,
                loss,
                scenario_seed: seeds[0],
            }
        })?;

        let row = StepLog {
            step,
            mean_loss: loss,
            mean_tracking: result.tracking.to_f64().unwrap_or(f64::NAN),
            mean_penalty: result.penalty.to_f64().unwrap_or(f64::NAN),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_step(&row);
        log.push(row);
    }
    Ok(current)
}
