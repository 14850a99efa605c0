//! SPICE-like netlist parsing and the typed bipartite converter graph.
//!
//! A netlist line reads `<designator> <netA> <netB> [value]`. The first
//! letter of the designator selects the component type (`V`, `S`, `D`, `L`,
//! `C`, `R`), net names are arbitrary whitespace-free tokens, and `0` is the
//! ground net, which must appear somewhere. `#` starts a comment that runs
//! to end of line.
//!
//! The parsed form is a bipartite graph: component nodes on one side, net
//! nodes on the other, and one edge per component terminal (two per
//! component). Terminal index 0 is the first net token on the line,
//! terminal index 1 the second.

use crate::plant::PlantParameters;
use crate::real;
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;

/// Node type of every vertex in the bipartite graph. Exactly one variant,
/// [`NodeType::Net`], lives on the net side; the rest are component types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeType {
    Net,
    Switch,
    Diode,
    Inductor,
    Capacitor,
    Resistor,
    VoltageSource,
}

impl NodeType {
    /// All node types in canonical order. Encoder tables and anything else
    /// indexed per type follow this order.
    pub const ALL: [NodeType; 7] = [
        NodeType::Net,
        NodeType::Switch,
        NodeType::Diode,
        NodeType::Inductor,
        NodeType::Capacitor,
        NodeType::Resistor,
        NodeType::VoltageSource,
    ];

    /// Position of this type in [`NodeType::ALL`].
    pub fn index(self) -> usize {
        match self {
            NodeType::Net => 0,
            NodeType::Switch => 1,
            NodeType::Diode => 2,
            NodeType::Inductor => 3,
            NodeType::Capacitor => 4,
            NodeType::Resistor => 5,
            NodeType::VoltageSource => 6,
        }
    }

    /// Designator letter used in netlist text, `None` for net nodes.
    pub fn designator_letter(self) -> Option<char> {
        match self {
            NodeType::Net => None,
            NodeType::Switch => Some('S'),
            NodeType::Diode => Some('D'),
            NodeType::Inductor => Some('L'),
            NodeType::Capacitor => Some('C'),
            NodeType::Resistor => Some('R'),
            NodeType::VoltageSource => Some('V'),
        }
    }

    fn from_letter(letter: char) -> Option<NodeType> {
        match letter {
            'V' => Some(NodeType::VoltageSource),
            'S' => Some(NodeType::Switch),
            'D' => Some(NodeType::Diode),
            'L' => Some(NodeType::Inductor),
            'C' => Some(NodeType::Capacitor),
            'R' => Some(NodeType::Resistor),
            _ => None,
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            NodeType::Net => "net",
            NodeType::Switch => "switch",
            NodeType::Diode => "diode",
            NodeType::Inductor => "inductor",
            NodeType::Capacitor => "capacitor",
            NodeType::Resistor => "resistor",
            NodeType::VoltageSource => "voltage source",
        };
        f.write_str(name)
    }
}

/// One component instance from the netlist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentNode<T> {
    /// Designator as written, e.g. `L1`. Unique among components.
    pub id: String,
    pub node_type: NodeType,
    /// Component value in base SI units. `None` for switches and diodes.
    pub value: Option<T>,
}

/// One terminal connection: component `component`'s terminal
/// `terminal` (0 or 1) attaches to net `net`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    /// Index into [`ConverterGraph::components`].
    pub component: usize,
    /// Index into [`ConverterGraph::nets`].
    pub net: usize,
    /// Terminal index on the component, 0 or 1.
    pub terminal: u8,
}

/// Typed bipartite graph of a converter circuit.
///
/// Invariants, enforced by [`parse_netlist`] and checked by
/// [`ConverterGraph::validate`]:
/// * component ids are unique and disjoint from net names;
/// * every component has exactly two edges, terminals 0 and 1 in order;
/// * every net has at least one edge;
/// * the graph is connected and contains the ground net `"0"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterGraph<T> {
    pub components: Vec<ComponentNode<T>>,
    /// Net names in order of first appearance. Ground is `"0"`.
    pub nets: Vec<String>,
    /// Edges grouped per component: terminals 0 and 1 of component 0, then
    /// terminals 0 and 1 of component 1, and so on.
    pub edges: Vec<Edge>,
}

/// Combined node count over both partitions. Node `i` is component `i` for
/// `i < components.len()` and net `i - components.len()` otherwise; graph
/// feature matrices index rows in this order.
impl<T: Scalar> ConverterGraph<T> {
    pub fn node_count(&self) -> usize {
        self.components.len() + self.nets.len()
    }

    /// Node type of the combined node index.
    pub fn node_type(&self, node: usize) -> NodeType {
        if node < self.components.len() {
            self.components[node].node_type
        } else {
            NodeType::Net
        }
    }

    /// Indices of switch components, in component order. This is the
    /// controllable subset the policy emits one duty cycle for.
    pub fn switch_indices(&self) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.node_type == NodeType::Switch)
            .map(|(i, _)| i)
            .collect()
    }

    /// Net indices connected to component `c`, ordered by terminal.
    fn terminals_of(&self, c: usize) -> Vec<usize> {
        let mut nets: Vec<(u8, usize)> = self
            .edges
            .iter()
            .filter(|e| e.component == c)
            .map(|e| (e.terminal, e.net))
            .collect();
        nets.sort_unstable();
        nets.into_iter().map(|(_, n)| n).collect()
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.components.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut ids = HashSet::new();
        for c in &self.components {
            if c.node_type == NodeType::Net {
                return Err(GraphError::NetTypedComponent { id: c.id.clone() });
            }
            if !ids.insert(c.id.as_str()) {
                return Err(GraphError::DuplicateComponentId { id: c.id.clone() });
            }
        }
        let mut net_names = HashSet::new();
        for n in &self.nets {
            if !net_names.insert(n.as_str()) {
                return Err(GraphError::DuplicateNetName { name: n.clone() });
            }
            if ids.contains(n.as_str()) {
                return Err(GraphError::IdCollision { name: n.clone() });
            }
        }
        if !net_names.contains("0") {
            return Err(GraphError::MissingGround);
        }
        if self.edges.len() != 2 * self.components.len() {
            return Err(GraphError::WrongEdgeCount {
                expected: 2 * self.components.len(),
                found: self.edges.len(),
            });
        }
        let mut terminals: Vec<Vec<u8>> = vec![Vec::new(); self.components.len()];
        let mut net_degree = vec![0usize; self.nets.len()];
        for e in &self.edges {
            if e.component >= self.components.len() || e.net >= self.nets.len() {
                return Err(GraphError::EdgeOutOfRange);
            }
            if e.terminal > 1 {
                return Err(GraphError::BadTerminal { terminal: e.terminal });
            }
            terminals[e.component].push(e.terminal);
            net_degree[e.net] += 1;
        }
        for (c, ts) in terminals.iter_mut().enumerate() {
            ts.sort_unstable();
            if ts.as_slice() != [0, 1] {
                return Err(GraphError::BadComponentTerminals {
                    id: self.components[c].id.clone(),
                });
            }
        }
        if let Some(n) = net_degree.iter().position(|&d| d == 0) {
            return Err(GraphError::IsolatedNet {
                name: self.nets[n].clone(),
            });
        }
        if !self.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let nc = self.components.len();
        let mut adjacency = vec![Vec::new(); n];
        for e in &self.edges {
            adjacency[e.component].push(nc + e.net);
            adjacency[nc + e.net].push(e.component);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut visited = 1;
        while let Some(v) = stack.pop() {
            for &w in &adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    visited += 1;
                    stack.push(w);
                }
            }
        }
        visited == n
    }

    /// Renders the graph back to netlist text. Component order becomes line
    /// order, so `parse(serialize(g))` reproduces `g` exactly when net
    /// first-appearance order matches component order, and an isomorphic
    /// graph otherwise.
    pub fn to_netlist(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.components.iter().enumerate() {
            let nets = self.terminals_of(i);
            out.push_str(&c.id);
            for n in nets {
                out.push(' ');
                out.push_str(&self.nets[n]);
            }
            if let Some(v) = c.value {
                out.push(' ');
                out.push_str(&format!("{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Relabels the graph by a pair of permutations, one per partition.
///
/// `component_perm[i]` is the new index of component `i`, `net_perm[j]` the
/// new index of net `j`. Edges are rewritten accordingly; edge list order is
/// preserved. The result is isomorphic to the input, and applying the
/// inverse permutations restores it exactly.
pub fn permute_graph<T: Scalar>(
    graph: &ConverterGraph<T>,
    component_perm: &[usize],
    net_perm: &[usize],
) -> Result<ConverterGraph<T>, GraphError> {
    check_permutation(component_perm, graph.components.len(), "component")?;
    check_permutation(net_perm, graph.nets.len(), "net")?;
    let mut components = vec![None; graph.components.len()];
    for (i, c) in graph.components.iter().enumerate() {
        components[component_perm[i]] = Some(c.clone());
    }
    let mut nets = vec![String::new(); graph.nets.len()];
    for (j, n) in graph.nets.iter().enumerate() {
        nets[net_perm[j]] = n.clone();
    }
    let edges = graph
        .edges
        .iter()
        .map(|e| Edge {
            component: component_perm[e.component],
            net: net_perm[e.net],
            terminal: e.terminal,
        })
        .collect();
    Ok(ConverterGraph {
        components: components.into_iter().map(|c| c.unwrap()).collect(),
        nets,
        edges,
    })
}

fn check_permutation(perm: &[usize], len: usize, side: &str) -> Result<(), GraphError> {
    if perm.len() != len {
        return Err(GraphError::BadPermutation {
            side: side.to_string(),
            reason: format!("length {} does not match {len}", perm.len()),
        });
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || seen[p] {
            return Err(GraphError::BadPermutation {
                side: side.to_string(),
                reason: format!("not a bijection on 0..{len}"),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Structural violations reported by [`ConverterGraph::validate`] and
/// [`permute_graph`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("graph has no components")]
    Empty,
    #[error("component '{id}' has node type net")]
    NetTypedComponent { id: String },
    #[error("duplicate component id '{id}'")]
    DuplicateComponentId { id: String },
    #[error("duplicate net name '{name}'")]
    DuplicateNetName { name: String },
    #[error("net '{name}' collides with a component id")]
    IdCollision { name: String },
    #[error("ground net '0' is missing")]
    MissingGround,
    #[error("expected {expected} edges (two per component), found {found}")]
    WrongEdgeCount { expected: usize, found: usize },
    #[error("edge references an out-of-range node")]
    EdgeOutOfRange,
    #[error("terminal index {terminal} is not 0 or 1")]
    BadTerminal { terminal: u8 },
    #[error("component '{id}' does not have exactly terminals 0 and 1")]
    BadComponentTerminals { id: String },
    #[error("net '{name}' has no connected component")]
    IsolatedNet { name: String },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("invalid {side} permutation: {reason}")]
    BadPermutation { side: String, reason: String },
}

/// Parse failure with 1-based line and column positions where applicable.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: unknown designator letter '{letter}'")]
    UnknownDesignator {
        line: usize,
        column: usize,
        letter: char,
    },
    #[error("line {line}: {designator} is missing its value")]
    MissingValue { line: usize, designator: String },
    #[error("line {line}: {designator} requires a positive value, got {value}")]
    NonPositiveValue {
        line: usize,
        designator: String,
        value: f64,
    },
    #[error("line {line}: {message}")]
    InvalidValue { line: usize, message: String },
    #[error("line {line}: duplicate designator '{designator}' (first on line {first_line})")]
    DuplicateDesignator {
        line: usize,
        first_line: usize,
        designator: String,
    },
    #[error("net '{name}' collides with a component designator")]
    IdCollision { name: String },
    #[error("ground net '0' never appears")]
    MissingGround,
    #[error("netlist graph is disconnected")]
    Disconnected,
    #[error("netlist contains no components")]
    Empty,
}

/// One whitespace-delimited token with its 1-based column.
struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let body = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let mut tokens = Vec::new();
    let mut start = None;
    // Columns count characters, not bytes, so positions stay meaningful in
    // editors for non-ASCII net names.
    for (col, ch) in body.chars().chain(std::iter::once(' ')).enumerate() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                let byte_start = body
                    .char_indices()
                    .nth(s)
                    .map(|(b, _)| b)
                    .unwrap_or(body.len());
                let byte_end = body
                    .char_indices()
                    .nth(col)
                    .map(|(b, _)| b)
                    .unwrap_or(body.len());
                tokens.push(Token {
                    text: &body[byte_start..byte_end],
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(col);
        }
    }
    tokens
}

/// Parses netlist text into a [`ConverterGraph`].
///
/// Lines are independent; blank lines and `#` comments are skipped. CRLF
/// input is accepted. The graph is fully validated before being returned:
/// ground presence, connectivity, id/net name disjointness, and per-type
/// value rules (positive value required for `L`/`C`/`R`, non-negative for
/// `V`, no value for `S`/`D`).
pub fn parse_netlist<T: Scalar>(text: &str) -> Result<ConverterGraph<T>, ParseError> {
    let mut components: Vec<ComponentNode<T>> = Vec::new();
    let mut component_lines: HashMap<String, usize> = HashMap::new();
    let mut nets: Vec<String> = Vec::new();
    let mut net_index: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<Edge> = Vec::new();

    for (line_no, raw_line) in text.lines().enumerate() {
        let line = line_no + 1;
        let tokens = tokenize(raw_line);
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 3 {
            let last = tokens.last().unwrap();
            return Err(ParseError::Syntax {
                line,
                column: last.column + last.text.chars().count(),
                message: "expected `<designator> <netA> <netB> [value]`".to_string(),
            });
        }
        if tokens.len() > 4 {
            return Err(ParseError::Syntax {
                line,
                column: tokens[4].column,
                message: format!("unexpected trailing token '{}'", tokens[4].text),
            });
        }

        let designator = &tokens[0];
        let mut chars = designator.text.chars();
        let letter = chars.next().expect("token is non-empty");
        let node_type = NodeType::from_letter(letter).ok_or(ParseError::UnknownDesignator {
            line,
            column: designator.column,
            letter,
        })?;
        if let Some(bad) = chars.clone().find(|c| !c.is_ascii_alphanumeric() && *c != '_') {
            return Err(ParseError::Syntax {
                line,
                column: designator.column,
                message: format!("designator '{}' contains invalid character '{bad}'", designator.text),
            });
        }
        let id = designator.text.to_string();
        if let Some(&first_line) = component_lines.get(&id) {
            return Err(ParseError::DuplicateDesignator {
                line,
                first_line,
                designator: id,
            });
        }

        let value = match tokens.get(3) {
            Some(tok) => {
                let v: f64 = tok.text.parse().map_err(|_| ParseError::Syntax {
                    line,
                    column: tok.column,
                    message: format!("cannot parse value '{}'", tok.text),
                })?;
                if !v.is_finite() {
                    return Err(ParseError::InvalidValue {
                        line,
                        message: format!("value '{}' is not finite", tok.text),
                    });
                }
                Some(v)
            }
            None => None,
        };

        let value = match node_type {
            NodeType::Inductor | NodeType::Capacitor | NodeType::Resistor => {
                let v = value.ok_or_else(|| ParseError::MissingValue {
                    line,
                    designator: id.clone(),
                })?;
                if v <= 0.0 {
                    return Err(ParseError::NonPositiveValue {
                        line,
                        designator: id.clone(),
                        value: v,
                    });
                }
                Some(real::<T>(v))
            }
            NodeType::VoltageSource => {
                let v = value.ok_or_else(|| ParseError::MissingValue {
                    line,
                    designator: id.clone(),
                })?;
                if v < 0.0 {
                    return Err(ParseError::InvalidValue {
                        line,
                        message: format!("voltage source '{id}' requires a non-negative value, got {v}"),
                    });
                }
                Some(real::<T>(v))
            }
            NodeType::Switch | NodeType::Diode => {
                // A literal 0 is tolerated so machine-written lists can
                // always emit four columns.
                if let Some(v) = value.filter(|&v| v != 0.0) {
                    return Err(ParseError::InvalidValue {
                        line,
                        message: format!("{node_type} '{id}' takes no value, got {v}"),
                    });
                }
                None
            }
            NodeType::Net => unreachable!("from_letter never yields Net"),
        };

        let component = components.len();
        for (terminal, tok) in tokens[1..3].iter().enumerate() {
            let name = tok.text.to_string();
            let net = *net_index.entry(name.clone()).or_insert_with(|| {
                nets.push(name);
                nets.len() - 1
            });
            edges.push(Edge {
                component,
                net,
                terminal: terminal as u8,
            });
        }
        component_lines.insert(id.clone(), line);
        components.push(ComponentNode {
            id,
            node_type,
            value,
        });
    }

    if components.is_empty() {
        return Err(ParseError::Empty);
    }
    for name in &nets {
        if component_lines.contains_key(name) {
            return Err(ParseError::IdCollision { name: name.clone() });
        }
    }
    if !net_index.contains_key("0") {
        return Err(ParseError::MissingGround);
    }

    let graph = ConverterGraph {
        components,
        nets,
        edges,
    };
    if !graph.is_connected() {
        return Err(ParseError::Disconnected);
    }
    debug_assert_eq!(graph.validate(), Ok(()));
    Ok(graph)
}

/// Rejection reasons from [`validate_buck`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a buck converter: {reason}")]
pub struct BuckError {
    pub reason: String,
}

fn buck_err<X>(reason: impl Into<String>) -> Result<X, BuckError> {
    Err(BuckError {
        reason: reason.into(),
    })
}

/// Checks that the graph is structurally the single-switch synchronous buck
/// cell and extracts its plant parameters.
///
/// The expected topology, up to net naming and line order:
/// source between input net and ground, switch from input net to the
/// switching net, diode from switching net to ground, inductor from the
/// switching net to the output net, capacitor and load resistor each from
/// the output net to ground.
pub fn validate_buck<T: Scalar>(graph: &ConverterGraph<T>) -> Result<PlantParameters<T>, BuckError> {
    graph.validate().map_err(|e| BuckError {
        reason: format!("invalid graph: {e}"),
    })?;
    let mut by_type: HashMap<NodeType, Vec<usize>> = HashMap::new();
    for (i, c) in graph.components.iter().enumerate() {
        by_type.entry(c.node_type).or_default().push(i);
    }
    for t in [
        NodeType::VoltageSource,
        NodeType::Switch,
        NodeType::Diode,
        NodeType::Inductor,
        NodeType::Capacitor,
        NodeType::Resistor,
    ] {
        match by_type.get(&t).map(Vec::len).unwrap_or(0) {
            1 => {}
            n => return buck_err(format!("expected exactly one {t}, found {n}")),
        }
    }
    if graph.components.len() != 6 {
        return buck_err(format!(
            "expected exactly 6 components, found {}",
            graph.components.len()
        ));
    }
    if graph.nets.len() != 4 {
        return buck_err(format!("expected exactly 4 nets, found {}", graph.nets.len()));
    }

    let ground = graph
        .nets
        .iter()
        .position(|n| n == "0")
        .expect("validated graph contains ground");
    let one = |t: NodeType| by_type[&t][0];
    let nets_of = |c: usize| -> (usize, usize) {
        let ts = graph.terminals_of(c);
        (ts[0], ts[1])
    };
    // Each locator accepts either terminal order.
    let other_than = |pair: (usize, usize), n: usize| -> Option<usize> {
        if pair.0 == n {
            Some(pair.1)
        } else if pair.1 == n {
            Some(pair.0)
        } else {
            None
        }
    };

    let source = one(NodeType::VoltageSource);
    let input = match other_than(nets_of(source), ground) {
        Some(n) if n != ground => n,
        _ => return buck_err("voltage source must connect the input net to ground"),
    };
    let switch = one(NodeType::Switch);
    let switched = match other_than(nets_of(switch), input) {
        Some(n) if n != ground && n != input => n,
        _ => return buck_err("switch must connect the input net to a distinct switching net"),
    };
    let diode = one(NodeType::Diode);
    if other_than(nets_of(diode), ground) != Some(switched) {
        return buck_err("diode must connect the switching net to ground");
    }
    let inductor = one(NodeType::Inductor);
    let output = match other_than(nets_of(inductor), switched) {
        Some(n) if n != ground && n != input && n != switched => n,
        _ => return buck_err("inductor must connect the switching net to a distinct output net"),
    };
    let capacitor = one(NodeType::Capacitor);
    if other_than(nets_of(capacitor), ground) != Some(output) {
        return buck_err("capacitor must connect the output net to ground");
    }
    let resistor = one(NodeType::Resistor);
    if other_than(nets_of(resistor), ground) != Some(output) {
        return buck_err("load resistor must connect the output net to ground");
    }

    let value = |c: usize| graph.components[c].value.expect("typed values checked at parse");
    let params = PlantParameters {
        v_in: value(source),
        inductance: value(inductor),
        capacitance: value(capacitor),
        r_load: value(resistor),
    };
    params.validate().map_err(|e| BuckError {
        reason: e.to_string(),
    })?;
    Ok(params)
}
