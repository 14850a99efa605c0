//! Averaged buck-converter plant: dynamics, integrator, constraints, cost.
//!
//! The averaged model replaces the switching waveform with its duty-cycle
//! weighted mean, which makes the dynamics smooth in the control input:
//!
//! ```text
//! d i_l / dt = (duty * (v_in + delta) - v_c) / L
//! d v_c / dt = (i_l - v_c / R) / C
//! ```
//!
//! where `delta` is an additive input-voltage disturbance (zero by default).
//! Integration is classical fourth-order Runge-Kutta with a fixed step tied
//! to the natural period `2*pi*sqrt(L*C)` of the output filter, clamped to
//! `[1e-8, 1e-3]` seconds so extreme component values stay integrable.
//!
//! The same step arithmetic exists twice: once over plain scalars for
//! simulation, once over tape variables ([`step_on_tape`]) for gradient
//!-based training and trajectory optimization. Both share the derivative
//! formulas textually; tests pin them against each other.

use crate::autodiff::{Tape, Var};
use crate::real;
use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Component value ranges the benchmark samples from. Normalized component
/// features use these bounds, so they are fixed crate-wide constants.
pub mod ranges {
    /// Inductance range in henries.
    pub const INDUCTANCE: (f64, f64) = (1e-7, 2e-1);
    /// Capacitance range in farads.
    pub const CAPACITANCE: (f64, f64) = (5e-8, 2e-2);
    /// Load resistance range in ohms.
    pub const LOAD_RESISTANCE: (f64, f64) = (1e-2, 1e3);
}

/// Fixed numeric conventions of the plant model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Conventions {
    /// Integration steps per natural period of the LC filter.
    pub steps_per_period: f64,
    /// Lower clamp on the time step in seconds.
    pub dt_min: f64,
    /// Upper clamp on the time step in seconds.
    pub dt_max: f64,
    /// Default inductor current limit as a multiple of `v_in / r_load`.
    pub current_limit_factor: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            steps_per_period: 40.0,
            dt_min: 1e-8,
            dt_max: 1e-3,
            current_limit_factor: 1.5,
        }
    }
}

impl Conventions {
    /// Checks positivity of every convention and the clamp ordering.
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and positive, got {v}"))
            }
        };
        positive("steps_per_period", self.steps_per_period)?;
        positive("dt_min", self.dt_min)?;
        positive("dt_max", self.dt_max)?;
        positive("current_limit_factor", self.current_limit_factor)?;
        if self.dt_min > self.dt_max {
            return Err(format!(
                "dt_min {} exceeds dt_max {}",
                self.dt_min, self.dt_max
            ));
        }
        Ok(())
    }
}

/// Physical parameters of one buck converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParameters<T> {
    /// Input voltage in volts.
    pub v_in: T,
    /// Filter inductance in henries.
    pub inductance: T,
    /// Filter capacitance in farads.
    pub capacitance: T,
    /// Load resistance in ohms.
    pub r_load: T,
}

/// Violation of the strict positivity every parameter requires.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("plant parameter {name} must be strictly positive and finite, got {value}")]
pub struct PlantParameterError {
    pub name: &'static str,
    pub value: f64,
}

impl<T: Scalar> PlantParameters<T> {
    pub fn validate(&self) -> Result<(), PlantParameterError> {
        for (name, value) in [
            ("v_in", self.v_in),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("r_load", self.r_load),
        ] {
            if !(value.is_finite() && value > T::zero()) {
                return Err(PlantParameterError {
                    name,
                    value: value.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    /// Natural period of the LC output filter, `2*pi*sqrt(L*C)`.
    pub fn natural_period(&self) -> T {
        let two = T::one() + T::one();
        two * T::PI() * (self.inductance * self.capacitance).sqrt()
    }

    /// Fixed integration step: the natural period divided by
    /// `steps_per_period`, clamped to `[dt_min, dt_max]`.
    pub fn time_step(&self, conventions: &Conventions) -> T {
        let raw = self.natural_period() / real::<T>(conventions.steps_per_period);
        raw.max(real(conventions.dt_min)).min(real(conventions.dt_max))
    }

    /// Default inductor current limit, `current_limit_factor * v_in / r_load`.
    pub fn default_current_limit(&self, conventions: &Conventions) -> T {
        real::<T>(conventions.current_limit_factor) * self.v_in / self.r_load
    }

    /// Steady state under a constant duty cycle: `v_c = duty * v_in`,
    /// `i_l = v_c / r_load`.
    pub fn equilibrium(&self, duty: T) -> PlantState<T> {
        let v_c = duty * self.v_in;
        PlantState {
            inductor_current: v_c / self.r_load,
            capacitor_voltage: v_c,
        }
    }

    /// Worst per-step amplification the fixed-step RK4 integrator applies
    /// to the modes of this (linear) converter at time step `dt`: the
    /// maximum of `|R(dt*lambda)|` over the eigenvalues `lambda` of the
    /// state matrix, where `R` is the degree-4 stability polynomial.
    /// Values above one mean the integration diverges for any duty
    /// sequence that excites the fast mode, which happens for strongly
    /// overdamped plants (`sqrt(L/C)/R` large) once `dt/(R*C)` passes the
    /// real-axis stability bound near 2.785.
    pub fn rk4_growth(&self, dt: T) -> T {
        let half = real::<T>(0.5);
        let trace = -(self.r_load * self.capacitance).recip();
        let det = (self.inductance * self.capacitance).recip();
        let disc = trace * trace - real::<T>(4.0) * det;
        let eigenvalues = if disc >= T::zero() {
            let s = disc.sqrt();
            [
                ((trace + s) * half, T::zero()),
                ((trace - s) * half, T::zero()),
            ]
        } else {
            // Conjugate pair; |R| is symmetric in the sign of the
            // imaginary part so one member suffices, listed twice.
            let s = (-disc).sqrt();
            [(trace * half, s * half), (trace * half, s * half)]
        };
        let mut worst = T::zero();
        for (re, im) in eigenvalues {
            let (zr, zi) = (re * dt, im * dt);
            // Horner evaluation of 1 + z + z^2/2 + z^3/6 + z^4/24.
            let (mut ar, mut ai) = (real::<T>(1.0 / 24.0), T::zero());
            for inv in [1.0 / 6.0, 0.5, 1.0, 1.0] {
                let (nr, ni) = (ar * zr - ai * zi, ar * zi + ai * zr);
                ar = nr + real::<T>(inv);
                ai = ni;
            }
            worst = worst.max((ar * ar + ai * ai).sqrt());
        }
        worst
    }
}

/// Plant state: inductor current `i_l` and capacitor voltage `v_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState<T> {
    pub inductor_current: T,
    pub capacitor_voltage: T,
}

impl<T: Scalar> PlantState<T> {
    pub fn is_finite(&self) -> bool {
        self.inductor_current.is_finite() && self.capacitor_voltage.is_finite()
    }
}

/// Control input: the switch duty cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T> {
    pub duty: T,
}

/// Additive disturbance on the input voltage. Zero everywhere by default;
/// the model keeps the hook so disturbance studies stay one field away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance<T> {
    pub delta_v_in: T,
}

impl<T: Scalar> Default for Disturbance<T> {
    fn default() -> Self {
        Disturbance {
            delta_v_in: T::zero(),
        }
    }
}

/// Control task: voltage reference to track plus the current limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskContext<T> {
    /// Output voltage reference in volts. Valid tasks satisfy
    /// `0 < v_ref <= v_in`.
    pub v_ref: T,
    /// Inductor current magnitude limit in amperes, strictly positive.
    pub i_max: T,
}

impl<T: Scalar> TaskContext<T> {
    /// Task with the default current limit for the given plant.
    pub fn with_default_limit(
        v_ref: T,
        plant: &PlantParameters<T>,
        conventions: &Conventions,
    ) -> Self {
        TaskContext {
            v_ref,
            i_max: plant.default_current_limit(conventions),
        }
    }

    /// Checks task bounds against a plant.
    pub fn validate(&self, plant: &PlantParameters<T>) -> Result<(), TaskError> {
        if !(self.v_ref.is_finite() && self.v_ref > T::zero() && self.v_ref <= plant.v_in) {
            return Err(TaskError::ReferenceOutOfRange {
                v_ref: self.v_ref.to_f64().unwrap_or(f64::NAN),
                v_in: plant.v_in.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !(self.i_max.is_finite() && self.i_max > T::zero()) {
            return Err(TaskError::NonPositiveCurrentLimit {
                i_max: self.i_max.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("reference voltage {v_ref} outside (0, v_in = {v_in}]")]
    ReferenceOutOfRange { v_ref: f64, v_in: f64 },
    #[error("current limit {i_max} must be strictly positive")]
    NonPositiveCurrentLimit { i_max: f64 },
}

/// Integration failure: the state left the finite range.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("plant state became non-finite (i_l = {i_l}, v_c = {v_c})")]
pub struct PlantError {
    pub i_l: f64,
    pub v_c: f64,
}

/// State derivative of the averaged model.
fn derivative<T: Scalar>(
    i_l: T,
    v_c: T,
    duty: T,
    delta_v_in: T,
    p: &PlantParameters<T>,
) -> (T, T) {
    let di = (duty * (p.v_in + delta_v_in) - v_c) / p.inductance;
    let dv = (i_l - v_c / p.r_load) / p.capacitance;
    (di, dv)
}

/// One RK4 step of the averaged model over plain scalars.
///
/// The duty cycle is held constant across the step (zero-order hold).
/// Returns an error if the resulting state is non-finite.
pub fn step<T: Scalar>(
    state: &PlantState<T>,
    input: &ControlInput<T>,
    disturbance: &Disturbance<T>,
    p: &PlantParameters<T>,
    dt: T,
) -> Result<PlantState<T>, PlantError> {
    let (i, v) = (state.inductor_current, state.capacitor_voltage);
    let d = input.duty;
    let w = disturbance.delta_v_in;
    let half = dt / (T::one() + T::one());
    let sixth = dt / real::<T>(6.0);
    let two = T::one() + T::one();

    let (k1i, k1v) = derivative(i, v, d, w, p);
    let (k2i, k2v) = derivative(i + half * k1i, v + half * k1v, d, w, p);
    let (k3i, k3v) = derivative(i + half * k2i, v + half * k2v, d, w, p);
    let (k4i, k4v) = derivative(i + dt * k3i, v + dt * k3v, d, w, p);

    let next = PlantState {
        inductor_current: i + sixth * (k1i + two * k2i + two * k3i + k4i),
        capacitor_voltage: v + sixth * (k1v + two * k2v + two * k3v + k4v),
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(PlantError {
            i_l: next.inductor_current.to_f64().unwrap_or(f64::NAN),
            v_c: next.capacitor_voltage.to_f64().unwrap_or(f64::NAN),
        })
    }
}

/// Tape-recorded plant state used inside differentiable rollouts.
#[derive(Clone, Copy)]
pub struct StateVars<'t, T> {
    pub inductor_current: Var<'t, T>,
    pub capacitor_voltage: Var<'t, T>,
}

impl<'t, T: Scalar> StateVars<'t, T> {
    /// Records the state as tape leaves.
    pub fn leaf(tape: &'t Tape<T>, state: &PlantState<T>) -> Self {
        StateVars {
            inductor_current: tape.scalar(state.inductor_current),
            capacitor_voltage: tape.scalar(state.capacitor_voltage),
        }
    }

    pub fn value(&self) -> PlantState<T> {
        PlantState {
            inductor_current: self.inductor_current.value(),
            capacitor_voltage: self.capacitor_voltage.value(),
        }
    }
}

fn derivative_on_tape<'t, T: Scalar>(
    i_l: Var<'t, T>,
    v_c: Var<'t, T>,
    duty: Var<'t, T>,
    delta_v_in: T,
    p: &PlantParameters<T>,
) -> (Var<'t, T>, Var<'t, T>) {
    let di = (duty * (p.v_in + delta_v_in) - v_c) / p.inductance;
    let dv = (i_l - v_c / p.r_load) / p.capacitance;
    (di, dv)
}

/// One RK4 step recorded on the tape. Mirrors [`step`] exactly; plant
/// parameters, the disturbance, and `dt` enter as constants, so gradients
/// flow only through the state and the duty cycle.
pub fn step_on_tape<'t, T: Scalar>(
    state: StateVars<'t, T>,
    duty: Var<'t, T>,
    disturbance: &Disturbance<T>,
    p: &PlantParameters<T>,
    dt: T,
) -> StateVars<'t, T> {
    let (i, v) = (state.inductor_current, state.capacitor_voltage);
    let w = disturbance.delta_v_in;
    let half = dt / (T::one() + T::one());
    let sixth = dt / real::<T>(6.0);
    let two = T::one() + T::one();

    let (k1i, k1v) = derivative_on_tape(i, v, duty, w, p);
    let (k2i, k2v) = derivative_on_tape(i + k1i * half, v + k1v * half, duty, w, p);
    let (k3i, k3v) = derivative_on_tape(i + k2i * half, v + k2v * half, duty, w, p);
    let (k4i, k4v) = derivative_on_tape(i + k3i * dt, v + k3v * dt, duty, w, p);

    StateVars {
        inductor_current: i + (k1i + k2i * two + k3i * two + k4i) * sixth,
        capacitor_voltage: v + (k1v + k2v * two + k3v * two + k4v) * sixth,
    }
}

/// Constraint residuals, negative when satisfied:
/// `[duty - 1, -duty, |i_l| - i_max]`.
pub fn constraints<T: Scalar>(
    state: &PlantState<T>,
    input: &ControlInput<T>,
    task: &TaskContext<T>,
) -> [T; 3] {
    [
        input.duty - T::one(),
        -input.duty,
        state.inductor_current.abs() - task.i_max,
    ]
}

/// Quadratic voltage tracking error `(v_c - v_ref)^2`. The control input
/// does not enter the cost; it is part of the signature because stage costs
/// are conventionally functions of both.
pub fn stage_cost<T: Scalar>(
    state: &PlantState<T>,
    _input: &ControlInput<T>,
    task: &TaskContext<T>,
) -> T {
    let e = state.capacitor_voltage - task.v_ref;
    e * e
}

/// Tape counterpart of [`stage_cost`].
pub fn stage_cost_on_tape<'t, T: Scalar>(v_c: Var<'t, T>, v_ref: T) -> Var<'t, T> {
    let e = v_c - v_ref;
    e * e
}

/// Soft constraint penalty for one step: squared rectified residuals of the
/// normalized constraints `[duty - 1, -duty, |i_l|/i_max - 1]`. Normalizing
/// the current residual by `i_max` keeps the three terms on comparable
/// scales across plants.
pub fn penalty<T: Scalar>(state: &PlantState<T>, duty: T, task: &TaskContext<T>) -> T {
    let r1 = (duty - T::one()).max(T::zero());
    let r2 = (-duty).max(T::zero());
    let r3 = (state.inductor_current.abs() / task.i_max - T::one()).max(T::zero());
    r1 * r1 + r2 * r2 + r3 * r3
}

/// Tape counterpart of [`penalty`].
pub fn penalty_on_tape<'t, T: Scalar>(
    i_l: Var<'t, T>,
    duty: Var<'t, T>,
    task: &TaskContext<T>,
) -> Var<'t, T> {
    let r1 = (duty - T::one()).relu();
    let r2 = (-duty).relu();
    let r3 = (i_l.abs() / task.i_max - T::one()).relu();
    r1 * r1 + r2 * r2 + r3 * r3
}
