//! Graph-based control for switched DC-DC power converters.
//!
//! The crate covers the full pipeline from circuit description to benchmarked
//! control policy:
//!
//! * [`netlist`] parses SPICE-like netlists into typed bipartite graphs
//!   (component nodes on one side, electrical nets on the other).
//! * [`autodiff`] provides a tape-based reverse-mode engine over scalars,
//!   vectors, and matrix leaves; every differentiable quantity in the crate
//!   flows through it.
//! * [`gnn`] implements a two-phase message-passing network over the
//!   bipartite graph, with type-specific encoders and a global readout.
//! * [`plant`] is the averaged buck-converter model: continuous dynamics,
//!   an RK4 integrator, constraints, and the tracking stage cost.
//! * [`policy`] turns plant measurements into graph feature snapshots and
//!   evaluates per-switch duty-cycle heads on top of the backbone.
//! * [`dpc`] trains the policy by differentiating closed-loop rollouts of
//!   the plant directly (differentiable predictive control).
//! * [`ocp`] solves the per-scenario optimal control problem by direct
//!   single shooting, providing the comparison baseline.
//! * [`bench`] samples converter configurations and reference-step cases,
//!   evaluates policy and baseline on each, and aggregates the gap.
//!
//! The numeric core is generic over the scalar type through [`Scalar`];
//! `f64` aliases for the main types are exported at the crate root.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod dpc;
pub mod gnn;
pub mod netlist;
pub mod ocp;
pub mod plant;
pub mod policy;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented for any type with the arithmetic, constant, and conversion
/// support of `f32`/`f64`; a blanket impl covers both. `Send + Sync` is
/// required so parameter sets and scenario batches can cross thread
/// boundaries during training and benchmarking.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + NumAssignOps
        + Sum
        + Debug
        + Display
        + LowerExp
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` configuration value into the working scalar type.
///
/// Panics if the conversion is not representable, which cannot happen for
/// finite inputs with `f32`/`f64` targets.
pub fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 must convert to the working scalar type")
}

/// Double-precision tape.
pub type Tape64 = autodiff::Tape<f64>;
/// Double-precision converter graph.
pub type ConverterGraph64 = netlist::ConverterGraph<f64>;
/// Double-precision backbone parameters.
pub type GnnParameters64 = gnn::GnnParameters<f64>;
/// Double-precision policy parameters.
pub type PolicyParameters64 = policy::PolicyParameters<f64>;
/// Double-precision plant parameters.
pub type PlantParameters64 = plant::PlantParameters<f64>;
/// Double-precision plant state.
pub type PlantState64 = plant::PlantState<f64>;
/// Double-precision rollout scenario.
pub type Scenario64 = dpc::Scenario<f64>;
