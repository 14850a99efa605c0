//! Measurement embedding and the per-switch control policy.
//!
//! The policy consumes a graph snapshot: node features built from the
//! current plant state, terminal one-hot edge features, and a task vector.
//! The backbone produces node embeddings; a shared head maps each switch
//! node's embedding (concatenated with the task vector) through a sigmoid
//! to a duty cycle in (0, 1). The global embedding is computed for
//! diagnostics but never fed to the head, so control stays fully
//! distributed.
//!
//! Feature layout (`d_x = 3`), one row per node:
//!
//! | node           | slot 0                 | slot 1            | slot 2 |
//! |----------------|------------------------|-------------------|--------|
//! | inductor       | i_l / (v_in / r_load)  | lognorm(L)        | 0      |
//! | capacitor      | v_c / v_in             | lognorm(C)        | 0      |
//! | resistor       | v_c / v_in             | lognorm(R)        | 0      |
//! | voltage source | 1 (v_in / v_in)        | 0                 | 0      |
//! | switch         | 0                      | 0                 | 1      |
//! | diode          | 0                      | 0                 | -1     |
//! | net            | 0                      | 0                 | 0.5    |
//!
//! `lognorm` maps a component value to [0, 1] logarithmically across the
//! benchmark sampling range of its kind ([`crate::plant::ranges`]). The
//! task vector is `[v_ref / v_in, i_max / (v_in / r_load)]`.

use crate::autodiff::{Gradients, Tape, Var, VectorVar};
use crate::gnn::{backbone_on_tape, BoundGnn, BoundMlp, GnnConfig, GnnError, GnnParameters, Mlp};
use crate::netlist::{validate_buck, BuckError, ConverterGraph, NodeType};
use crate::plant::{
    ranges, ControlInput, PlantParameters, PlantState, StateVars, TaskContext, TaskError,
};
use crate::real;
use crate::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Type marker written to feature slot 2 of stateless nodes.
pub const MARKER_SWITCH: f64 = 1.0;
/// Marker for diode nodes.
pub const MARKER_DIODE: f64 = -1.0;
/// Marker for net nodes.
pub const MARKER_NET: f64 = 0.5;

/// Logarithmic normalization of a component value across `(min, max)`:
/// `(log10(x) - log10(min)) / (log10(max) - log10(min))`.
pub fn lognorm<T: Scalar>(value: T, range: (f64, f64)) -> T {
    let lo = real::<T>(range.0.log10());
    let hi = real::<T>(range.1.log10());
    (value.log10() - lo) / (hi - lo)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Graph(#[from] BuckError),
    #[error("graph/plant mismatch: graph extracts {graph_params:?}, got {given:?}")]
    PlantMismatch {
        graph_params: PlantParameters<f64>,
        given: PlantParameters<f64>,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("plant state is not finite")]
    NonFiniteState,
    #[error("snapshot contains a non-finite feature")]
    NonFiniteFeature,
    #[error("graph has no switch nodes")]
    NoSwitches,
    #[error(transparent)]
    Gnn(#[from] GnnError),
}

/// Policy input at one time step: the graph plus aligned feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub graph: ConverterGraph<T>,
    /// Node features, one row per combined node index.
    pub x: Vec<Vec<T>>,
    /// Edge features, one row per edge in graph edge order.
    pub e: Vec<Vec<T>>,
    /// Task vector.
    pub z: Vec<T>,
}

/// How one feature slot of one node is filled at each step.
#[derive(Debug, Clone, Copy)]
enum Slot<T> {
    Fixed(T),
    /// `i_l * scale`.
    Current { scale: T },
    /// `v_c * scale`.
    Voltage { scale: T },
}

/// Precomputed per-node feature recipe for a validated buck graph. The
/// state-independent parts (edge features, task vector, fixed slots) are
/// fixed; the measurement slots reference the plant state.
#[derive(Debug, Clone)]
pub struct FeaturePlan<T> {
    node_slots: Vec<[Slot<T>; 3]>,
    edge_rows: Vec<[T; 2]>,
    z: [T; 2],
    switch_nodes: Vec<usize>,
}

impl<T: Scalar> FeaturePlan<T> {
    /// Builds the plan, checking that the graph is a buck converter whose
    /// extracted parameters equal `plant` and that the task is valid.
    pub fn new(
        graph: &ConverterGraph<T>,
        plant: &PlantParameters<T>,
        task: &TaskContext<T>,
    ) -> Result<Self, PolicyError> {
        let extracted = validate_buck(graph)?;
        if extracted != *plant {
            let to64 = |p: &PlantParameters<T>| PlantParameters {
                v_in: p.v_in.to_f64().unwrap_or(f64::NAN),
                inductance: p.inductance.to_f64().unwrap_or(f64::NAN),
                capacitance: p.capacitance.to_f64().unwrap_or(f64::NAN),
                r_load: p.r_load.to_f64().unwrap_or(f64::NAN),
            };
            return Err(PolicyError::PlantMismatch {
                graph_params: to64(&extracted),
                given: to64(plant),
            });
        }
        task.validate(plant)?;

        let current_scale = plant.r_load / plant.v_in; // 1 / (v_in / r_load)
        let voltage_scale = plant.v_in.recip();
        let zero = T::zero();
        let node_slots = (0..graph.node_count())
            .map(|v| match graph.node_type(v) {
                NodeType::Inductor => [
                    Slot::Current {
                        scale: current_scale,
                    },
                    Slot::Fixed(lognorm(
                        graph.components[v].value.expect("inductor has a value"),
                        ranges::INDUCTANCE,
                    )),
                    Slot::Fixed(zero),
                ],
                NodeType::Capacitor => [
                    Slot::Voltage {
                        scale: voltage_scale,
                    },
                    Slot::Fixed(lognorm(
                        graph.components[v].value.expect("capacitor has a value"),
                        ranges::CAPACITANCE,
                    )),
                    Slot::Fixed(zero),
                ],
                NodeType::Resistor => [
                    Slot::Voltage {
                        scale: voltage_scale,
                    },
                    Slot::Fixed(lognorm(
                        graph.components[v].value.expect("resistor has a value"),
                        ranges::LOAD_RESISTANCE,
                    )),
                    Slot::Fixed(zero),
                ],
                NodeType::VoltageSource => [Slot::Fixed(T::one()), Slot::Fixed(zero), Slot::Fixed(zero)],
                NodeType::Switch => [Slot::Fixed(zero), Slot::Fixed(zero), Slot::Fixed(real(MARKER_SWITCH))],
                NodeType::Diode => [Slot::Fixed(zero), Slot::Fixed(zero), Slot::Fixed(real(MARKER_DIODE))],
                NodeType::Net => [Slot::Fixed(zero), Slot::Fixed(zero), Slot::Fixed(real(MARKER_NET))],
            })
            .collect();
        let edge_rows = graph
            .edges
            .iter()
            .map(|e| {
                if e.terminal == 0 {
                    [T::one(), T::zero()]
                } else {
                    [T::zero(), T::one()]
                }
            })
            .collect();
        let z = [task.v_ref / plant.v_in, task.i_max * current_scale];
        Ok(FeaturePlan {
            node_slots,
            edge_rows,
            z: [z[0], z[1]],
            switch_nodes: graph.switch_indices(),
        })
    }

    pub fn switch_nodes(&self) -> &[usize] {
        &self.switch_nodes
    }

    /// Numeric node feature rows for a given state.
    pub fn node_features(&self, y: &PlantState<T>) -> Vec<Vec<T>> {
        self.node_slots
            .iter()
            .map(|slots| {
                slots
                    .iter()
                    .map(|s| match *s {
                        Slot::Fixed(c) => c,
                        Slot::Current { scale } => y.inductor_current * scale,
                        Slot::Voltage { scale } => y.capacitor_voltage * scale,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn edge_features(&self) -> Vec<Vec<T>> {
        self.edge_rows.iter().map(|r| r.to_vec()).collect()
    }

    pub fn task_vector(&self) -> Vec<T> {
        self.z.to_vec()
    }
}

/// Builds the policy snapshot from plant measurements.
pub fn embed_measurements<T: Scalar>(
    graph: &ConverterGraph<T>,
    y: &PlantState<T>,
    plant: &PlantParameters<T>,
    task: &TaskContext<T>,
) -> Result<Snapshot<T>, PolicyError> {
    if !y.is_finite() {
        return Err(PolicyError::NonFiniteState);
    }
    let plan = FeaturePlan::new(graph, plant, task)?;
    Ok(Snapshot {
        graph: graph.clone(),
        x: plan.node_features(y),
        e: plan.edge_features(),
        z: plan.task_vector(),
    })
}

/// Full policy parameter set: backbone plus the shared duty head
/// (input `d_h + d_z`, output 1, squashed by a sigmoid downstream).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters<T> {
    pub backbone: GnnParameters<T>,
    pub head: Mlp<T>,
}

impl<T: Scalar> PolicyParameters<T> {
    /// Deterministic initialization; backbone weights first, head weights
    /// next, all from one seeded stream.
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        config.validate().expect("configuration must be valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = GnnParameters::init_with_rng(config, &mut rng);
        let head = Mlp::init(config.d_h + config.d_z, config.mlp_hidden, 1, &mut rng);
        PolicyParameters { backbone, head }
    }

    pub fn config(&self) -> &GnnConfig {
        &self.backbone.config
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.parameter_count() + self.head.parameter_count()
    }

    /// Flat order: backbone (see [`GnnParameters::to_flat`]) then head.
    pub fn to_flat(&self) -> Vec<T> {
        let mut flat = self.backbone.to_flat();
        self.head.push_flat(&mut flat);
        flat
    }

    pub fn from_flat(config: GnnConfig, values: &[T]) -> Result<Self, GnnError> {
        let head_count = Mlp::<T>::shape_count(config.d_h + config.d_z, config.mlp_hidden, 1);
        let backbone_count =
            values
                .len()
                .checked_sub(head_count)
                .ok_or(GnnError::FlatLength {
                    expected: head_count,
                    found: values.len(),
                })?;
        let backbone = GnnParameters::from_flat(config, &values[..backbone_count])?;
        if values[backbone_count..].iter().any(|v| !v.is_finite()) {
            return Err(GnnError::NonFiniteParameter);
        }
        let mut cursor = values[backbone_count..].iter();
        let head = Mlp::read_flat(config.d_h + config.d_z, config.mlp_hidden, 1, &mut cursor)
            .ok_or(GnnError::FlatLength {
                expected: backbone_count + head_count,
                found: values.len(),
            })?;
        Ok(PolicyParameters { backbone, head })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundPolicy<'t, T> {
        BoundPolicy {
            backbone: self.backbone.bind(tape),
            head: self.head.bind(tape),
        }
    }
}

/// Policy weights recorded on a tape.
pub struct BoundPolicy<'t, T> {
    pub backbone: BoundGnn<'t, T>,
    pub head: BoundMlp<'t, T>,
}

impl<'t, T: Scalar> BoundPolicy<'t, T> {
    /// Gradients of every policy weight in flat parameter order.
    pub fn push_gradients(&self, grads: &Gradients<T>, out: &mut Vec<T>) {
        self.backbone.push_gradients(grads, out);
        self.head.push_gradients(grads, out);
    }
}

/// Snapshot features recorded on a tape.
pub struct SnapshotVars<'t, T> {
    pub x: Vec<VectorVar<'t, T>>,
    pub e: Vec<VectorVar<'t, T>>,
    pub z: VectorVar<'t, T>,
}

/// A [`FeaturePlan`] with its state-independent parts already recorded on
/// the tape, ready to emit one snapshot per rollout step.
pub struct BoundPlan<'t, T> {
    tape: &'t Tape<T>,
    slots: Vec<[BoundSlot<'t, T>; 3]>,
    e: Vec<VectorVar<'t, T>>,
    z: VectorVar<'t, T>,
    switch_nodes: Vec<usize>,
}

#[derive(Clone, Copy)]
enum BoundSlot<'t, T> {
    Fixed(Var<'t, T>),
    Current { scale: T },
    Voltage { scale: T },
}

impl<'t, T: Scalar> BoundPlan<'t, T> {
    pub fn bind(tape: &'t Tape<T>, plan: &FeaturePlan<T>) -> Self {
        let slots = plan
            .node_slots
            .iter()
            .map(|row| {
                let bind_slot = |s: &Slot<T>| match *s {
                    Slot::Fixed(c) => BoundSlot::Fixed(tape.scalar(c)),
                    Slot::Current { scale } => BoundSlot::Current { scale },
                    Slot::Voltage { scale } => BoundSlot::Voltage { scale },
                };
                [bind_slot(&row[0]), bind_slot(&row[1]), bind_slot(&row[2])]
            })
            .collect();
        BoundPlan {
            tape,
            slots,
            e: plan.edge_rows.iter().map(|r| tape.vector(r)).collect(),
            z: tape.vector(&plan.z),
            switch_nodes: plan.switch_nodes.clone(),
        }
    }

    pub fn switch_nodes(&self) -> &[usize] {
        &self.switch_nodes
    }

    /// Records the state-dependent node features for one step.
    pub fn snapshot(&self, state: &StateVars<'t, T>) -> SnapshotVars<'t, T> {
        let x = self
            .slots
            .iter()
            .map(|row| {
                let vars: Vec<Var<'t, T>> = row
                    .iter()
                    .map(|s| match *s {
                        BoundSlot::Fixed(v) => v,
                        BoundSlot::Current { scale } => state.inductor_current * scale,
                        BoundSlot::Voltage { scale } => state.capacitor_voltage * scale,
                    })
                    .collect();
                self.tape.from_scalars(&vars)
            })
            .collect();
        SnapshotVars {
            x,
            e: self.e.clone(),
            z: self.z,
        }
    }
}

/// Evaluates the policy on the tape: backbone, then the shared head and
/// sigmoid at every switch node, in graph order.
pub fn duties_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    graph: &ConverterGraph<T>,
    snapshot: &SnapshotVars<'t, T>,
    switch_nodes: &[usize],
    policy: &BoundPolicy<'t, T>,
) -> Result<Vec<Var<'t, T>>, PolicyError> {
    if switch_nodes.is_empty() {
        return Err(PolicyError::NoSwitches);
    }
    let (h, _h_global) = backbone_on_tape(
        tape,
        graph,
        &snapshot.x,
        &snapshot.e,
        snapshot.z,
        &policy.backbone,
    )?;
    Ok(switch_nodes
        .iter()
        .map(|&s| {
            let head_in = tape.concat(&[h[s], snapshot.z]);
            policy.head.apply(head_in).component(0).sigmoid()
        })
        .collect())
}

/// Numeric policy evaluation: one duty command per switch node, in graph
/// order, each strictly inside (0, 1).
pub fn act<T: Scalar>(
    snapshot: &Snapshot<T>,
    params: &PolicyParameters<T>,
) -> Result<Vec<ControlInput<T>>, PolicyError> {
    let switch_nodes = snapshot.graph.switch_indices();
    if switch_nodes.is_empty() {
        return Err(PolicyError::NoSwitches);
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut x = Vec::with_capacity(snapshot.x.len());
    for row in &snapshot.x {
        x.push(tape.try_vector(row).map_err(|_| PolicyError::NonFiniteFeature)?);
    }
    let mut e = Vec::with_capacity(snapshot.e.len());
    for row in &snapshot.e {
        e.push(tape.try_vector(row).map_err(|_| PolicyError::NonFiniteFeature)?);
    }
    let z = tape
        .try_vector(&snapshot.z)
        .map_err(|_| PolicyError::NonFiniteFeature)?;
    let vars = SnapshotVars { x, e, z };
    let duties = duties_on_tape(&tape, &snapshot.graph, &vars, &switch_nodes, &bound)?;
    Ok(duties
        .into_iter()
        .map(|d| ControlInput { duty: d.value() })
        .collect())
}
