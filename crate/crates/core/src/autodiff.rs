//! Tape-based reverse-mode automatic differentiation.
//!
//! The tape records a directed acyclic graph of operations as they execute.
//! Nodes are scalars, vectors, or matrix leaves; handles ([`Var`],
//! [`VectorVar`], [`MatrixVar`]) are `Copy` indices into the tape plus the
//! forward value. A single backward sweep ([`Tape::gradients`]) accumulates
//! adjoints for every node, so the gradient with respect to any leaf is
//! available afterwards in constant time.
//!
//! Vector operations (elementwise arithmetic, affine maps, concatenation)
//! record one node per operation rather than one per element. Network
//! rollouts over hundreds of steps stay in the hundred-thousand-node range
//! this way, where a scalar-only tape would need hundreds of millions.
//!
//! Conventions at non-smooth points: `relu` has derivative 0 at the origin,
//! and `max`/`min` route the gradient to their first operand on ties.
//! Arithmetic follows IEEE semantics (division by zero yields infinities);
//! the checked constructors and `checked_div`/`ln`/`pow` return errors for
//! operations whose forward value or derivative would be poisoned from the
//! start.

use crate::Scalar;
use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Sentinel parent index for unary scalar operations.
const NONE: u32 = u32::MAX;

/// Errors from recording or differentiating tape expressions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("non-finite value {value} cannot be recorded as a leaf")]
    NonFiniteLeaf { value: f64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("logarithm of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("power with non-positive base {base}")]
    PowDomain { base: f64 },
    #[error("variable does not belong to this tape")]
    ForeignVariable,
}

fn as_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

enum Node<T> {
    ScalarLeaf,
    /// Scalar result with up to two parents; local partials are fixed at
    /// record time. `parents[k] == NONE` marks an unused slot.
    ScalarOp {
        parents: [u32; 2],
        partials: [T; 2],
    },
    /// Scalar extracted from component `position` of vector `source`.
    Index {
        source: u32,
        position: u32,
    },
    VectorLeaf {
        value: Box<[T]>,
    },
    /// Vector assembled from scalar nodes.
    FromScalars {
        value: Box<[T]>,
        sources: Box<[u32]>,
    },
    /// Concatenation of vector nodes, in order.
    ConcatV {
        value: Box<[T]>,
        sources: Box<[u32]>,
    },
    AddV {
        value: Box<[T]>,
        lhs: u32,
        rhs: u32,
    },
    /// Elementwise scaling by a constant factor.
    ScaleV {
        value: Box<[T]>,
        source: u32,
        factor: T,
    },
    TanhV {
        value: Box<[T]>,
        source: u32,
    },
    /// Elementwise maximum; ties route the gradient to `lhs`.
    MaxV {
        value: Box<[T]>,
        lhs: u32,
        rhs: u32,
    },
    /// `weights * input + bias` with a row-major matrix leaf.
    Affine {
        value: Box<[T]>,
        weights: u32,
        input: u32,
        bias: u32,
    },
    MatrixLeaf {
        value: Box<[T]>,
        rows: u32,
        cols: u32,
    },
}

impl<T> Node<T> {
    fn vector_value(&self) -> &[T] {
        match self {
            Node::VectorLeaf { value }
            | Node::FromScalars { value, .. }
            | Node::ConcatV { value, .. }
            | Node::AddV { value, .. }
            | Node::ScaleV { value, .. }
            | Node::TanhV { value, .. }
            | Node::MaxV { value, .. }
            | Node::Affine { value, .. }
            | Node::MatrixLeaf { value, .. } => value,
            _ => unreachable!("scalar node has no vector value"),
        }
    }
}

/// Recording tape. One tape per differentiated computation; create handles
/// with [`Tape::scalar`], [`Tape::vector`], and [`Tape::matrix`], combine
/// them with operators and methods, then call [`Tape::gradients`] on the
/// scalar output.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes but keeps the allocation. Requires exclusive
    /// access, so no handle into the old recording can outlive the reset.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, node: Node<T>) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        assert!(index < NONE as usize, "tape node limit exceeded");
        nodes.push(node);
        index as u32
    }

    /// Records a scalar leaf. Panics on non-finite input; use
    /// [`Tape::try_scalar`] for a fallible version.
    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.try_scalar(value)
            .expect("scalar leaf must be finite")
    }

    pub fn try_scalar(&self, value: T) -> Result<Var<'_, T>, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteLeaf {
                value: as_f64(value),
            });
        }
        let index = self.push(Node::ScalarLeaf);
        Ok(Var {
            tape: self,
            index,
            value,
        })
    }

    /// Records a vector leaf. Panics on empty or non-finite input.
    pub fn vector(&self, values: &[T]) -> VectorVar<'_, T> {
        self.try_vector(values).expect("vector leaf must be finite")
    }

    pub fn try_vector(&self, values: &[T]) -> Result<VectorVar<'_, T>, AdError> {
        assert!(!values.is_empty(), "vector leaf must be non-empty");
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteLeaf { value: as_f64(bad) });
        }
        let len = values.len() as u32;
        let index = self.push(Node::VectorLeaf {
            value: values.into(),
        });
        Ok(VectorVar {
            tape: self,
            index,
            len,
        })
    }

    /// Records a zero vector leaf.
    pub fn zeros(&self, len: usize) -> VectorVar<'_, T> {
        self.vector(&vec![T::zero(); len])
    }

    /// Records a row-major matrix leaf of shape `rows x cols`. Matrices are
    /// parameter leaves; the only operation consuming them is
    /// [`MatrixVar::affine`].
    pub fn matrix(&self, rows: usize, cols: usize, values: &[T]) -> MatrixVar<'_, T> {
        self.try_matrix(rows, cols, values)
            .expect("matrix leaf must be finite")
    }

    pub fn try_matrix(
        &self,
        rows: usize,
        cols: usize,
        values: &[T],
    ) -> Result<MatrixVar<'_, T>, AdError> {
        assert!(rows > 0 && cols > 0, "matrix leaf must be non-empty");
        assert_eq!(values.len(), rows * cols, "matrix data length mismatch");
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteLeaf { value: as_f64(bad) });
        }
        let index = self.push(Node::MatrixLeaf {
            value: values.into(),
            rows: rows as u32,
            cols: cols as u32,
        });
        Ok(MatrixVar {
            tape: self,
            index,
            rows: rows as u32,
            cols: cols as u32,
        })
    }

    /// Assembles a vector from scalar variables.
    pub fn from_scalars<'t>(&'t self, parts: &[Var<'t, T>]) -> VectorVar<'t, T> {
        assert!(!parts.is_empty(), "cannot assemble an empty vector");
        let value: Box<[T]> = parts.iter().map(|p| {
            assert!(std::ptr::eq(p.tape, self), "variable belongs to a different tape");
            p.value
        }).collect();
        let sources: Box<[u32]> = parts.iter().map(|p| p.index).collect();
        let len = value.len() as u32;
        let index = self.push(Node::FromScalars { value, sources });
        VectorVar {
            tape: self,
            index,
            len,
        }
    }

    /// Concatenates vectors in order.
    pub fn concat<'t>(&'t self, parts: &[VectorVar<'t, T>]) -> VectorVar<'t, T> {
        assert!(!parts.is_empty(), "cannot concatenate zero vectors");
        let nodes = self.nodes.borrow();
        let mut value = Vec::new();
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "vector belongs to a different tape");
            value.extend_from_slice(nodes[p.index as usize].vector_value());
        }
        drop(nodes);
        let sources: Box<[u32]> = parts.iter().map(|p| p.index).collect();
        let len = value.len() as u32;
        let index = self.push(Node::ConcatV {
            value: value.into(),
            sources,
        });
        VectorVar {
            tape: self,
            index,
            len,
        }
    }

    /// Runs the backward sweep from `output`, returning adjoints for every
    /// node recorded so far. `output` must be a scalar on this tape.
    pub fn gradients(&self, output: Var<'_, T>) -> Result<Gradients<T>, AdError> {
        if !std::ptr::eq(self, output.tape) {
            return Err(AdError::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let mut adjoints: Vec<Adjoint<T>> = nodes
            .iter()
            .map(|n| match n {
                Node::ScalarLeaf | Node::ScalarOp { .. } | Node::Index { .. } => {
                    Adjoint::Scalar(T::zero())
                }
                other => Adjoint::Vector(vec![T::zero(); other.vector_value().len()].into()),
            })
            .collect();
        *adjoints[output.index as usize].scalar_mut() = T::one();

        for i in (0..nodes.len()).rev() {
            // Operands always precede results, so parents live in `lower`.
            let (lower, upper) = adjoints.split_at_mut(i);
            let grad = &upper[0];
            match &nodes[i] {
                Node::ScalarLeaf | Node::VectorLeaf { .. } | Node::MatrixLeaf { .. } => {}
                Node::ScalarOp { parents, partials } => {
                    let g = grad.scalar();
                    for k in 0..2 {
                        if parents[k] != NONE {
                            *lower[parents[k] as usize].scalar_mut() += partials[k] * g;
                        }
                    }
                }
                Node::Index { source, position } => {
                    let g = grad.scalar();
                    lower[*source as usize].vector_mut()[*position as usize] += g;
                }
                Node::FromScalars { sources, .. } => {
                    let g = grad.vector();
                    for (k, &s) in sources.iter().enumerate() {
                        *lower[s as usize].scalar_mut() += g[k];
                    }
                }
                Node::ConcatV { sources, .. } => {
                    let g = grad.vector();
                    let mut offset = 0;
                    for &s in sources.iter() {
                        let part = lower[s as usize].vector_mut();
                        for (a, &gj) in part.iter_mut().zip(&g[offset..]) {
                            *a += gj;
                        }
                        offset += part.len();
                    }
                }
                Node::AddV { lhs, rhs, .. } => {
                    let g = grad.vector();
                    for (a, &gj) in lower[*lhs as usize].vector_mut().iter_mut().zip(g) {
                        *a += gj;
                    }
                    for (a, &gj) in lower[*rhs as usize].vector_mut().iter_mut().zip(g) {
                        *a += gj;
                    }
                }
                Node::ScaleV { source, factor, .. } => {
                    let g = grad.vector();
                    for (a, &gj) in lower[*source as usize].vector_mut().iter_mut().zip(g) {
                        *a += *factor * gj;
                    }
                }
                Node::TanhV { value, source } => {
                    let g = grad.vector();
                    let adj = lower[*source as usize].vector_mut();
                    for j in 0..g.len() {
                        adj[j] += (T::one() - value[j] * value[j]) * g[j];
                    }
                }
                Node::MaxV { lhs, rhs, .. } => {
                    let g = grad.vector();
                    let a = nodes[*lhs as usize].vector_value();
                    let b = nodes[*rhs as usize].vector_value();
                    {
                        let la = lower[*lhs as usize].vector_mut();
                        for j in 0..g.len() {
                            if a[j] >= b[j] {
                                la[j] += g[j];
                            }
                        }
                    }
                    let rb = lower[*rhs as usize].vector_mut();
                    for j in 0..g.len() {
                        if a[j] < b[j] {
                            rb[j] += g[j];
                        }
                    }
                }
                Node::Affine {
                    weights,
                    input,
                    bias,
                    ..
                } => {
                    let g = grad.vector();
                    let (w_val, rows, cols) = match &nodes[*weights as usize] {
                        Node::MatrixLeaf { value, rows, cols } => {
                            (&value[..], *rows as usize, *cols as usize)
                        }
                        _ => unreachable!("affine weights are a matrix leaf"),
                    };
                    let x_val = nodes[*input as usize].vector_value();
                    for (a, &gi) in lower[*bias as usize].vector_mut().iter_mut().zip(g) {
                        *a += gi;
                    }
                    {
                        let xa = lower[*input as usize].vector_mut();
                        for i in 0..rows {
                            let gi = g[i];
                            if gi == T::zero() {
                                continue;
                            }
                            let row = &w_val[i * cols..(i + 1) * cols];
                            for j in 0..cols {
                                xa[j] += row[j] * gi;
                            }
                        }
                    }
                    let wa = lower[*weights as usize].vector_mut();
                    for i in 0..rows {
                        let gi = g[i];
                        if gi == T::zero() {
                            continue;
                        }
                        let row = &mut wa[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            row[j] += gi * x_val[j];
                        }
                    }
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}

enum Adjoint<T> {
    Scalar(T),
    Vector(Box<[T]>),
}

impl<T: Scalar> Adjoint<T> {
    fn scalar(&self) -> T {
        match self {
            Adjoint::Scalar(v) => *v,
            Adjoint::Vector(_) => unreachable!("vector adjoint read as scalar"),
        }
    }

    fn scalar_mut(&mut self) -> &mut T {
        match self {
            Adjoint::Scalar(v) => v,
            Adjoint::Vector(_) => unreachable!("vector adjoint written as scalar"),
        }
    }

    fn vector(&self) -> &[T] {
        match self {
            Adjoint::Vector(v) => v,
            Adjoint::Scalar(_) => unreachable!("scalar adjoint read as vector"),
        }
    }

    fn vector_mut(&mut self) -> &mut [T] {
        match self {
            Adjoint::Vector(v) => v,
            Adjoint::Scalar(_) => unreachable!("scalar adjoint written as vector"),
        }
    }
}

/// Adjoints of every tape node after a backward sweep. Query with the
/// handles used during recording.
pub struct Gradients<T> {
    adjoints: Vec<Adjoint<T>>,
}

impl<T> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gradients")
            .field("nodes", &self.adjoints.len())
            .finish()
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to a scalar node.
    pub fn wrt(&self, v: Var<'_, T>) -> T {
        self.adjoints[v.index as usize].scalar()
    }

    /// Gradient with respect to a vector node, componentwise.
    pub fn wrt_vector(&self, v: VectorVar<'_, T>) -> &[T] {
        self.adjoints[v.index as usize].vector()
    }

    /// Gradient with respect to a matrix leaf, row-major.
    pub fn wrt_matrix(&self, m: MatrixVar<'_, T>) -> &[T] {
        self.adjoints[m.index as usize].vector()
    }
}

/// Scalar variable: a handle to a scalar tape node plus its forward value.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    index: u32,
    value: T,
}

impl<'t, T: std::fmt::Debug> std::fmt::Debug for Var<'t, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Forward value of this node.
    pub fn value(self) -> T {
        self.value
    }

    fn unary(self, value: T, partial: T) -> Var<'t, T> {
        let index = self.tape.push(Node::ScalarOp {
            parents: [self.index, NONE],
            partials: [partial, T::zero()],
        });
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    fn binary(self, rhs: Var<'t, T>, value: T, pl: T, pr: T) -> Var<'t, T> {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "variables belong to different tapes"
        );
        let index = self.tape.push(Node::ScalarOp {
            parents: [self.index, rhs.index],
            partials: [pl, pr],
        });
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    pub fn exp(self) -> Var<'t, T> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    /// Natural logarithm; the domain excludes zero and negatives.
    pub fn ln(self) -> Result<Var<'t, T>, AdError> {
        if self.value <= T::zero() {
            return Err(AdError::LogDomain {
                value: as_f64(self.value),
            });
        }
        Ok(self.unary(self.value.ln(), self.value.recip()))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let t = self.value.tanh();
        self.unary(t, T::one() - t * t)
    }

    /// Rectified linear unit; the derivative at zero is zero.
    pub fn relu(self) -> Var<'t, T> {
        if self.value > T::zero() {
            self.unary(self.value, T::one())
        } else {
            self.unary(T::zero(), T::zero())
        }
    }

    /// Logistic sigmoid, evaluated in the numerically stable branch for
    /// either sign; never overflows.
    pub fn sigmoid(self) -> Var<'t, T> {
        let s = if self.value >= T::zero() {
            (T::one() + (-self.value).exp()).recip()
        } else {
            let e = self.value.exp();
            e / (T::one() + e)
        };
        self.unary(s, s * (T::one() - s))
    }

    /// Maximum of two variables; on ties the gradient goes to `self`.
    pub fn max(self, rhs: Var<'t, T>) -> Var<'t, T> {
        if self.value >= rhs.value {
            self.binary(rhs, self.value, T::one(), T::zero())
        } else {
            self.binary(rhs, rhs.value, T::zero(), T::one())
        }
    }

    /// Minimum of two variables; on ties the gradient goes to `self`.
    pub fn min(self, rhs: Var<'t, T>) -> Var<'t, T> {
        if self.value <= rhs.value {
            self.binary(rhs, self.value, T::one(), T::zero())
        } else {
            self.binary(rhs, rhs.value, T::zero(), T::one())
        }
    }

    /// Absolute value, composed as `max(x, -x)`.
    pub fn abs(self) -> Var<'t, T> {
        self.max(-self)
    }

    /// Power with a constant exponent.
    pub fn powf(self, k: T) -> Var<'t, T> {
        self.unary(self.value.powf(k), k * self.value.powf(k - T::one()))
    }

    /// Power with a variable exponent; requires a positive base.
    pub fn pow(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, AdError> {
        if self.value <= T::zero() {
            return Err(AdError::PowDomain {
                base: as_f64(self.value),
            });
        }
        let v = self.value.powf(rhs.value);
        Ok(self.binary(
            rhs,
            v,
            rhs.value * self.value.powf(rhs.value - T::one()),
            v * self.value.ln(),
        ))
    }

    /// Division that rejects a zero divisor instead of producing infinities.
    pub fn checked_div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, AdError> {
        if rhs.value == T::zero() {
            return Err(AdError::DivisionByZero);
        }
        Ok(self / rhs)
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value + rhs.value, T::one(), T::one())
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value - rhs.value, T::one(), -T::one())
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        self.binary(
            rhs,
            self.value / rhs.value,
            rhs.value.recip(),
            -self.value / (rhs.value * rhs.value),
        )
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.unary(-self.value, -T::one())
    }
}

/// Constant operands fold into the node instead of becoming leaves.
impl<'t, T: Scalar> Add<T> for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: T) -> Self::Output {
        self.unary(self.value + rhs, T::one())
    }
}

impl<'t, T: Scalar> Sub<T> for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: T) -> Self::Output {
        self.unary(self.value - rhs, T::one())
    }
}

impl<'t, T: Scalar> Mul<T> for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: T) -> Self::Output {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t, T: Scalar> Div<T> for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: T) -> Self::Output {
        self.unary(self.value / rhs, rhs.recip())
    }
}

/// Vector variable: a handle to a vector tape node.
#[derive(Clone, Copy)]
pub struct VectorVar<'t, T> {
    tape: &'t Tape<T>,
    index: u32,
    len: u32,
}

impl<'t, T: Scalar> VectorVar<'t, T> {
    pub fn len(self) -> usize {
        self.len as usize
    }

    pub fn is_empty(self) -> bool {
        self.len == 0
    }

    /// Copies the forward value out of the tape.
    pub fn to_vec(self) -> Vec<T> {
        self.tape.nodes.borrow()[self.index as usize]
            .vector_value()
            .to_vec()
    }

    /// Extracts component `i` as a scalar variable.
    pub fn component(self, i: usize) -> Var<'t, T> {
        assert!(i < self.len as usize, "component index out of range");
        let value = self.tape.nodes.borrow()[self.index as usize].vector_value()[i];
        let index = self.tape.push(Node::Index {
            source: self.index,
            position: i as u32,
        });
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    /// Elementwise scaling by a constant.
    pub fn scale(self, factor: T) -> VectorVar<'t, T> {
        let value: Box<[T]> = self
            .tape
            .nodes
            .borrow()[self.index as usize]
            .vector_value()
            .iter()
            .map(|&v| v * factor)
            .collect();
        let index = self.tape.push(Node::ScaleV {
            value,
            source: self.index,
            factor,
        });
        VectorVar {
            tape: self.tape,
            index,
            len: self.len,
        }
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(self) -> VectorVar<'t, T> {
        let value: Box<[T]> = self
            .tape
            .nodes
            .borrow()[self.index as usize]
            .vector_value()
            .iter()
            .map(|v| v.tanh())
            .collect();
        let index = self.tape.push(Node::TanhV {
            value,
            source: self.index,
        });
        VectorVar {
            tape: self.tape,
            index,
            len: self.len,
        }
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn emax(self, rhs: VectorVar<'t, T>) -> VectorVar<'t, T> {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "vectors belong to different tapes"
        );
        assert_eq!(self.len, rhs.len, "vector length mismatch");
        let value: Box<[T]> = {
            let nodes = self.tape.nodes.borrow();
            let a = nodes[self.index as usize].vector_value();
            let b = nodes[rhs.index as usize].vector_value();
            a.iter()
                .zip(b)
                .map(|(&x, &y)| if x >= y { x } else { y })
                .collect()
        };
        let index = self.tape.push(Node::MaxV {
            value,
            lhs: self.index,
            rhs: rhs.index,
        });
        VectorVar {
            tape: self.tape,
            index,
            len: self.len,
        }
    }
}

impl<'t, T: Scalar> Add for VectorVar<'t, T> {
    type Output = VectorVar<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "vectors belong to different tapes"
        );
        assert_eq!(self.len, rhs.len, "vector length mismatch");
        let value: Box<[T]> = {
            let nodes = self.tape.nodes.borrow();
            let a = nodes[self.index as usize].vector_value();
            let b = nodes[rhs.index as usize].vector_value();
            a.iter().zip(b).map(|(&x, &y)| x + y).collect()
        };
        let index = self.tape.push(Node::AddV {
            value,
            lhs: self.index,
            rhs: rhs.index,
        });
        VectorVar {
            tape: self.tape,
            index,
            len: self.len,
        }
    }
}

/// Mean of a non-empty set of equal-length vectors.
pub fn vector_mean<'t, T: Scalar>(parts: &[VectorVar<'t, T>]) -> VectorVar<'t, T> {
    assert!(!parts.is_empty(), "mean of zero vectors");
    let sum = parts[1..].iter().fold(parts[0], |acc, &v| acc + v);
    sum.scale(T::from_usize(parts.len()).unwrap().recip())
}

/// Matrix leaf handle. Matrices only enter the computation through
/// [`MatrixVar::affine`].
#[derive(Clone, Copy)]
pub struct MatrixVar<'t, T> {
    tape: &'t Tape<T>,
    index: u32,
    rows: u32,
    cols: u32,
}

impl<'t, T: Scalar> MatrixVar<'t, T> {
    pub fn rows(self) -> usize {
        self.rows as usize
    }

    pub fn cols(self) -> usize {
        self.cols as usize
    }

    /// `self * x + bias`, the affine map at the core of every dense layer.
    pub fn affine(self, x: VectorVar<'t, T>, bias: VectorVar<'t, T>) -> VectorVar<'t, T> {
        assert!(
            std::ptr::eq(self.tape, x.tape) && std::ptr::eq(self.tape, bias.tape),
            "operands belong to different tapes"
        );
        assert_eq!(self.cols, x.len, "matrix-vector shape mismatch");
        assert_eq!(self.rows, bias.len, "bias length mismatch");
        let value: Box<[T]> = {
            let nodes = self.tape.nodes.borrow();
            let w = nodes[self.index as usize].vector_value();
            let xv = nodes[x.index as usize].vector_value();
            let b = nodes[bias.index as usize].vector_value();
            let cols = self.cols as usize;
            (0..self.rows as usize)
                .map(|i| {
                    let row = &w[i * cols..(i + 1) * cols];
                    let mut acc = b[i];
                    for j in 0..cols {
                        acc += row[j] * xv[j];
                    }
                    acc
                })
                .collect()
        };
        let index = self.tape.push(Node::Affine {
            value,
            weights: self.index,
            input: x.index,
            bias: bias.index,
        });
        VectorVar {
            tape: self.tape,
            index,
            len: self.rows,
        }
    }
}
