//! DAG-DNN intermediate representation.
//!
//! A [`Graph`] is a connected DAG with a single input and a single output
//! node. Every arc carries an [`ArcFunction`]; nodes only merge values
//! (concatenation or addition) or pass through the value of their single
//! incoming arc.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::function::{ArcFunction, FunctionError};
use crate::linalg::{add_assign, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Output,
    Compute,
    Concat,
    Addition,
    Relay,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Output => "output",
            NodeKind::Compute => "compute",
            NodeKind::Concat => "concat",
            NodeKind::Addition => "addition",
            NodeKind::Relay => "relay",
        }
    }

    /// Nodes allowed to have more than one incoming arc.
    pub fn is_merge(self) -> bool {
        matches!(self, NodeKind::Concat | NodeKind::Addition | NodeKind::Output)
    }

    /// Nodes that stack their incoming values. An output node with several
    /// incoming arcs is a concatenation output.
    pub fn concatenates(self) -> bool {
        matches!(self, NodeKind::Concat | NodeKind::Output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Output dimension of the node.
    pub dim: usize,
}

impl Node {
    pub fn new(id: usize, kind: NodeKind, dim: usize) -> Self {
        Self { id: NodeId(id), kind, dim }
    }
}

/// An arc `src → dst` carrying a base-set function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "fn")]
    pub func: ArcFunction,
}

impl Edge {
    pub fn new(src: usize, dst: usize, func: ArcFunction) -> Self {
        Self { src: NodeId(src), dst: NodeId(dst), func }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("arc {src}->{dst} references an unknown node")]
    UnknownNode { src: NodeId, dst: NodeId },
    #[error("graph has no input node")]
    MissingInput,
    #[error("graph has no output node")]
    MissingOutput,
    #[error("graph has several input nodes {0:?}")]
    MultipleInputs(Vec<NodeId>),
    #[error("graph has several output nodes {0:?}")]
    MultipleOutputs(Vec<NodeId>),
    #[error("node {0} has dimension zero")]
    ZeroDim(NodeId),
    #[error("cycle through nodes {0:?}")]
    CycleDetected(Vec<NodeId>),
    #[error("arc {src}->{dst} would create a cycle")]
    WouldCreateCycle { src: NodeId, dst: NodeId },
    #[error("node {0} is not reachable from the input")]
    UnreachableNode(NodeId),
    #[error("node {0} does not reach the output")]
    DanglingNode(NodeId),
    #[error("dimension mismatch at {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: String, expected: usize, found: usize },
    #[error("invalid function on arc {src}->{dst}: {source}")]
    InvalidFunction { src: NodeId, dst: NodeId, source: FunctionError },
    #[error("{kind:?} node {node} has {degree} incoming arcs")]
    InvalidInDegree { node: NodeId, kind: NodeKind, degree: usize },
    #[error("output node {0} has outgoing arcs")]
    OutputHasSuccessors(NodeId),
    #[error("unsupported schema `{0}`")]
    Schema(String),
}

pub const SCHEMA: &str = "dagdnn/1";

/// Unvalidated network description, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "schema_tag")]
    pub schema: String,
    pub nodes: Vec<Node>,
    pub arcs: Vec<Edge>,
}

fn schema_tag() -> String {
    SCHEMA.to_string()
}

impl NetworkSpec {
    pub fn new(nodes: Vec<Node>, arcs: Vec<Edge>) -> Self {
        Self { schema: schema_tag(), nodes, arcs }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        self.ids_of(NodeKind::Input)
    }

    pub fn outputs(&self) -> Vec<NodeId> {
        self.ids_of(NodeKind::Output)
    }

    fn ids_of(&self, kind: NodeKind) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id).collect();
        ids.sort();
        ids
    }

    /// Structural checks shared by single- and multi-terminal networks:
    /// ids, function payloads, dimensions, in-degrees and acyclicity.
    /// Returns a topological order (ties broken by ascending id).
    pub fn check_structure(&self) -> Result<Vec<NodeId>, GraphError> {
        if self.schema != SCHEMA {
            return Err(GraphError::Schema(self.schema.clone()));
        }
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut by_id = BTreeMap::new();
        for n in &self.nodes {
            if by_id.insert(n.id, n).is_some() {
                return Err(GraphError::DuplicateNode(n.id));
            }
            if n.dim == 0 {
                return Err(GraphError::ZeroDim(n.id));
            }
        }
        let mut indeg: BTreeMap<NodeId, usize> = by_id.keys().map(|&k| (k, 0)).collect();
        let mut concat_dims: BTreeMap<NodeId, usize> = BTreeMap::new();
        for e in &self.arcs {
            let (Some(src), Some(dst)) = (by_id.get(&e.src), by_id.get(&e.dst)) else {
                return Err(GraphError::UnknownNode { src: e.src, dst: e.dst });
            };
            e.func
                .validate()
                .map_err(|source| GraphError::InvalidFunction { src: e.src, dst: e.dst, source })?;
            if e.func.in_dim() != src.dim {
                return Err(GraphError::DimensionMismatch {
                    context: format!("input of arc {}->{}", e.src, e.dst),
                    expected: src.dim,
                    found: e.func.in_dim(),
                });
            }
            if dst.kind.concatenates() {
                *concat_dims.entry(e.dst).or_default() += e.func.out_dim();
            } else if e.func.out_dim() != dst.dim {
                return Err(GraphError::DimensionMismatch {
                    context: format!("output of arc {}->{}", e.src, e.dst),
                    expected: dst.dim,
                    found: e.func.out_dim(),
                });
            }
            if src.kind == NodeKind::Output {
                return Err(GraphError::OutputHasSuccessors(src.id));
            }
            *indeg.get_mut(&e.dst).unwrap() += 1;
        }
        for n in &self.nodes {
            let d = indeg[&n.id];
            let ok = match n.kind {
                NodeKind::Input => d == 0,
                k if k.is_merge() => d >= 1,
                _ => d == 1,
            };
            if !ok {
                return Err(GraphError::InvalidInDegree { node: n.id, kind: n.kind, degree: d });
            }
            let stacked = concat_dims.get(&n.id).copied().unwrap_or(0);
            if n.kind.concatenates() && d > 0 && stacked != n.dim {
                return Err(GraphError::DimensionMismatch {
                    context: format!("concatenation node {}", n.id),
                    expected: n.dim,
                    found: stacked,
                });
            }
        }
        topo_order(by_id.keys().copied(), &self.arcs)
    }
}

impl NetworkSpec {
    /// Plain evaluation of a possibly multi-terminal network; `inputs` holds
    /// one value per input node.
    pub fn interpret(&self, inputs: &BTreeMap<NodeId, Vec<f64>>) -> Result<BTreeMap<NodeId, Vec<f64>>, GraphError> {
        let topo = self.check_structure()?;
        interpret_parts(&self.nodes, &self.arcs, &topo, inputs)
    }
}

/// Kahn's algorithm with ascending-id tie breaking.
fn topo_order(ids: impl Iterator<Item = NodeId>, arcs: &[Edge]) -> Result<Vec<NodeId>, GraphError> {
    let mut indeg: BTreeMap<NodeId, usize> = ids.map(|k| (k, 0)).collect();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for e in arcs {
        *indeg.get_mut(&e.dst).expect("known node") += 1;
        succ.entry(e.src).or_default().push(e.dst);
    }
    let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for w in succ.get(&v).into_iter().flatten() {
            let d = indeg.get_mut(w).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(*w);
            }
        }
    }
    if order.len() != indeg.len() {
        let stuck = indeg.into_iter().filter(|&(k, d)| d > 0 && !order.contains(&k)).map(|(k, _)| k).collect();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

/// Validated, immutable DAG-DNN with one input and one output node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    pos: BTreeMap<NodeId, usize>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    topo: Vec<NodeId>,
    input: NodeId,
    output: NodeId,
}

impl Graph {
    /// Validates `nodes`/`edges` as a connected single-input single-output DAG-DNN.
    ///
    /// A graph with a single node of kind `Input` and no arcs is the trivial
    /// network; that node is both input and output.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let spec = NetworkSpec::new(nodes, edges);
        let topo = spec.check_structure()?;
        let inputs = spec.inputs();
        let outputs = spec.outputs();
        let input = match inputs.as_slice() {
            [] => return Err(GraphError::MissingInput),
            [i] => *i,
            _ => return Err(GraphError::MultipleInputs(inputs)),
        };
        let output = match outputs.as_slice() {
            [] if spec.nodes.len() == 1 => input,
            [] => return Err(GraphError::MissingOutput),
            [o] => *o,
            _ => return Err(GraphError::MultipleOutputs(outputs)),
        };
        let g = Self::assemble(spec.nodes, spec.arcs, topo, input, output);
        let from_input = g.descendants(input);
        if let Some(n) = g.nodes.iter().find(|n| !from_input.contains(&n.id)) {
            return Err(GraphError::UnreachableNode(n.id));
        }
        let to_output = g.ancestors(output);
        if let Some(n) = g.nodes.iter().find(|n| !to_output.contains(&n.id)) {
            return Err(GraphError::DanglingNode(n.id));
        }
        Ok(g)
    }

    /// Builds a graph without validation. Intended for hand-built fixtures
    /// that deliberately violate invariants; panics on cycles or unknown ids.
    pub fn from_parts_unchecked(nodes: Vec<Node>, edges: Vec<Edge>) -> Self {
        let topo = topo_order(nodes.iter().map(|n| n.id), &edges).expect("acyclic fixture");
        let pick = |k: NodeKind| nodes.iter().find(|n| n.kind == k).map(|n| n.id);
        let input = pick(NodeKind::Input).unwrap_or(nodes[0].id);
        let output = pick(NodeKind::Output).unwrap_or(input);
        Self::assemble(nodes, edges, topo, input, output)
    }

    fn assemble(mut nodes: Vec<Node>, edges: Vec<Edge>, topo: Vec<NodeId>, input: NodeId, output: NodeId) -> Self {
        nodes.sort_by_key(|n| n.id);
        let pos: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            incoming[pos[&e.dst]].push(k);
            outgoing[pos[&e.src]].push(k);
        }
        Self { nodes, edges, pos, incoming, outgoing, topo, input, output }
    }

    pub fn from_spec(spec: NetworkSpec) -> Result<Self, GraphError> {
        if spec.schema != SCHEMA {
            return Err(GraphError::Schema(spec.schema));
        }
        Self::new(spec.nodes, spec.arcs)
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.nodes.clone(), self.edges.clone())
    }

    pub fn into_parts(self) -> (Vec<Node>, Vec<Edge>) {
        (self.nodes, self.edges)
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.pos.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[self.pos[&id]]
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.node(id).dim
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.node(id).kind
    }

    pub fn index_of(&self, id: NodeId) -> usize {
        self.pos[&id]
    }

    pub fn max_id(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.id.0)
    }

    /// Incoming arcs of `id` in arc-list order.
    pub fn in_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.incoming[self.pos[&id]].iter().map(move |&k| &self.edges[k])
    }

    pub fn out_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.outgoing[self.pos[&id]].iter().map(move |&k| &self.edges[k])
    }

    pub fn in_degree(&self, id: NodeId) -> usize {
        self.incoming[self.pos[&id]].len()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.in_edges(id).map(|e| e.src).collect()
    }

    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        self.out_edges(id).map(|e| e.dst).collect()
    }

    /// First arc `src → dst`, if any.
    pub fn edge(&self, src: NodeId, dst: NodeId) -> Option<&Edge> {
        self.out_edges(src).find(|e| e.dst == dst)
    }

    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    /// Nodes reachable from `id`, including itself.
    pub fn descendants(&self, id: NodeId) -> BTreeSet<NodeId> {
        self.walk(id, |g, v| g.children(v))
    }

    /// Nodes that reach `id`, including itself.
    pub fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        self.walk(id, |g, v| g.parents(v))
    }

    fn walk(&self, start: NodeId, next: impl Fn(&Self, NodeId) -> Vec<NodeId>) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for w in next(self, v) {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    pub fn param_count(&self) -> usize {
        self.edges.iter().map(|e| e.func.param_count()).sum()
    }

    /// Evaluates every node by a plain walk in topological order.
    ///
    /// Concatenation nodes stack their incoming arc values in arc-list order;
    /// addition nodes sum them.
    pub fn interpret(&self, x: &[f64]) -> Result<BTreeMap<NodeId, Vec<f64>>, GraphError> {
        let inputs = BTreeMap::from([(self.input, x.to_vec())]);
        interpret_parts(&self.nodes, &self.edges, &self.topo, &inputs)
    }

    /// Output value of the plain interpreter.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, GraphError> {
        let mut values = self.interpret(x)?;
        Ok(values.remove(&self.output).expect("output evaluated"))
    }

    /// Adds an arc between existing nodes, keeping the graph acyclic.
    pub fn with_edge(&self, src: NodeId, dst: NodeId, func: ArcFunction) -> Result<Graph, GraphError> {
        if src == dst || self.descendants(dst).contains(&src) {
            return Err(GraphError::WouldCreateCycle { src, dst });
        }
        let mut edges = self.edges.clone();
        edges.push(Edge { src, dst, func });
        Graph::new(self.nodes.clone(), edges)
    }
}

pub(crate) fn interpret_parts(
    nodes: &[Node],
    edges: &[Edge],
    topo: &[NodeId],
    inputs: &BTreeMap<NodeId, Vec<f64>>,
) -> Result<BTreeMap<NodeId, Vec<f64>>, GraphError> {
    let by_id: BTreeMap<NodeId, &Node> = nodes.iter().map(|n| (n.id, n)).collect();
    let mut incoming: BTreeMap<NodeId, Vec<&Edge>> = BTreeMap::new();
    for e in edges {
        incoming.entry(e.dst).or_default().push(e);
    }
    let mut values: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for &v in topo {
        let node = by_id[&v];
        let value = if node.kind == NodeKind::Input {
            let x = inputs.get(&v).ok_or(GraphError::MissingInput)?;
            if x.len() != node.dim {
                return Err(GraphError::DimensionMismatch {
                    context: format!("input value for node {v}"),
                    expected: node.dim,
                    found: x.len(),
                });
            }
            x.clone()
        } else {
            let arcs = incoming.get(&v).map(Vec::as_slice).unwrap_or_default();
            let mut parts = arcs.iter().map(|e| e.func.apply(&values[&e.src]));
            match node.kind {
                k if k.concatenates() => parts.flatten().collect(),
                NodeKind::Addition => {
                    let mut acc = vec![0.0; node.dim];
                    for p in parts {
                        add_assign(&mut acc, &p);
                    }
                    acc
                }
                _ => parts.next().ok_or(GraphError::UnreachableNode(v))?,
            }
        };
        values.insert(v, value);
    }
    Ok(values)
}

/// Validates a network description.
pub fn build_graph(spec: &NetworkSpec) -> Result<Graph, GraphError> {
    Graph::from_spec(spec.clone())
}

/// The simplest DAG-DNN: one node that is both input and output.
pub fn single_node(dim: usize) -> Graph {
    Graph::new(vec![Node::new(0, NodeKind::Input, dim)], vec![]).expect("single node graph")
}

/// O1: series connection `f ∘ g`.
pub fn apply_series(g: &Graph, f: ArcFunction) -> Result<Graph, GraphError> {
    let out = g.output();
    if f.in_dim() != g.dim(out) {
        return Err(GraphError::DimensionMismatch {
            context: "series connection".into(),
            expected: g.dim(out),
            found: f.in_dim(),
        });
    }
    let new_id = NodeId(g.max_id() + 1);
    let mut nodes = g.nodes().to_vec();
    for n in &mut nodes {
        if n.id == out && n.kind == NodeKind::Output {
            n.kind = NodeKind::Compute;
        }
    }
    nodes.push(Node { id: new_id, kind: NodeKind::Output, dim: f.out_dim() });
    let mut edges = g.edges().to_vec();
    edges.push(Edge { src: out, dst: new_id, func: f });
    Graph::new(nodes, edges)
}

/// O2: concatenation of the outputs of several networks that share one input.
///
/// The input nodes are merged into node 0; the remaining nodes are
/// renumbered in operand order and a new concatenation node becomes the output.
pub fn apply_concat(gs: &[Graph]) -> Result<Graph, GraphError> {
    let first = gs.first().ok_or(GraphError::Empty)?;
    let in_dim = first.dim(first.input());
    let mut nodes = vec![Node::new(0, NodeKind::Input, in_dim)];
    let mut edges = Vec::new();
    let mut blocks = Vec::new();
    let mut next = 1;
    for g in gs {
        if g.dim(g.input()) != in_dim {
            return Err(GraphError::DimensionMismatch {
                context: "concatenation operands share the input".into(),
                expected: in_dim,
                found: g.dim(g.input()),
            });
        }
        let mut map = BTreeMap::from([(g.input(), NodeId(0))]);
        for n in g.nodes().iter().filter(|n| n.id != g.input()) {
            let kind = if n.kind == NodeKind::Output { NodeKind::Compute } else { n.kind };
            map.insert(n.id, NodeId(next));
            nodes.push(Node::new(next, kind, n.dim));
            next += 1;
        }
        edges.extend(g.edges().iter().map(|e| Edge { src: map[&e.src], dst: map[&e.dst], func: e.func.clone() }));
        blocks.push((map[&g.output()], g.dim(g.output())));
    }
    let total = blocks.iter().map(|b| b.1).sum();
    nodes.push(Node::new(next, NodeKind::Output, total));
    for (src, dim) in blocks {
        edges.push(Edge { src, dst: NodeId(next), func: ArcFunction::Identity { dim } });
    }
    Graph::new(nodes, edges)
}

/// O3: duplication of the output into `m` stacked copies.
pub fn apply_duplicate(g: &Graph, m: usize) -> Result<Graph, GraphError> {
    if m == 0 {
        return Err(GraphError::DimensionMismatch { context: "duplication count".into(), expected: 1, found: 0 });
    }
    let out = g.output();
    let d = g.dim(out);
    let new_id = NodeId(g.max_id() + 1);
    let mut nodes = g.nodes().to_vec();
    for n in &mut nodes {
        if n.id == out && n.kind == NodeKind::Output {
            n.kind = NodeKind::Compute;
        }
    }
    nodes.push(Node { id: new_id, kind: NodeKind::Output, dim: m * d });
    let mut edges = g.edges().to_vec();
    edges.extend((0..m).map(|_| Edge { src: out, dst: new_id, func: ArcFunction::Identity { dim: d } }));
    Graph::new(nodes, edges)
}

/// Square matrix over `{0,1}` indexed by node ids; `get(i, j)` refers to `j → i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    ids: Vec<NodeId>,
    pos: BTreeMap<NodeId, usize>,
    bits: Vec<bool>,
}

impl BitMatrix {
    fn new(ids: Vec<NodeId>) -> Self {
        let pos = ids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let n = ids.len();
        Self { ids, pos, bits: vec![false; n * n] }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> bool {
        self.bits[self.pos[&i] * self.ids.len() + self.pos[&j]]
    }

    fn set(&mut self, i: NodeId, j: NodeId) {
        let n = self.ids.len();
        self.bits[self.pos[&i] * n + self.pos[&j]] = true;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.ids.len().max(1)).map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }
}

/// Square matrix of path counts; `get(i, j)` counts paths `j → i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    ids: Vec<NodeId>,
    pos: BTreeMap<NodeId, usize>,
    vals: Vec<u64>,
}

impl IntMatrix {
    pub fn get(&self, i: NodeId, j: NodeId) -> u64 {
        self.vals[self.pos[&i] * self.ids.len() + self.pos[&j]]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn mul(&self, other: &IntMatrix) -> IntMatrix {
        let n = self.ids.len();
        let mut vals = vec![0u64; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.vals[i * n + k];
                if a == 0 {
                    continue;
                }
                for j in 0..n {
                    let b = other.vals[k * n + j];
                    vals[i * n + j] = vals[i * n + j].saturating_add(a.saturating_mul(b));
                }
            }
        }
        IntMatrix { ids: self.ids.clone(), pos: self.pos.clone(), vals }
    }
}

/// `G(i, j) = 1` iff there is an arc `j → i`; the diagonal is zero.
pub fn adjacency(g: &Graph) -> BitMatrix {
    let mut m = BitMatrix::new(g.nodes().iter().map(|n| n.id).collect());
    for e in g.edges() {
        if e.src != e.dst {
            m.set(e.dst, e.src);
        }
    }
    m
}

/// `G^k` over the integers: entry `(i, j)` is the number of length-`k` paths `j → i`.
/// Counts saturate at `u64::MAX`.
pub fn path_counts(g: &Graph, k: usize) -> IntMatrix {
    let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id).collect();
    let n = ids.len();
    let pos: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut eye = IntMatrix { ids: ids.clone(), pos: pos.clone(), vals: vec![0; n * n] };
    for i in 0..n {
        eye.vals[i * n + i] = 1;
    }
    let mut base = IntMatrix { ids, pos, vals: vec![0; n * n] };
    for e in g.edges() {
        if e.src != e.dst {
            let (i, j) = (base.pos[&e.dst], base.pos[&e.src]);
            base.vals[i * n + j] = base.vals[i * n + j].saturating_add(1);
        }
    }
    let mut acc = eye;
    let mut p = base;
    let mut k = k;
    while k > 0 {
        if k & 1 == 1 {
            acc = p.mul(&acc);
        }
        p = p.mul(&p);
        k >>= 1;
    }
    acc
}

/// Reflexive transitive closure: `R(i, j) = 1` iff `j` reaches `i` (including `i = j`).
pub fn reachability(g: &Graph) -> BitMatrix {
    let mut m = BitMatrix::new(g.nodes().iter().map(|n| n.id).collect());
    for &v in g.topological_order() {
        m.set(v, v);
        for p in g.parents(v) {
            for &j in g.nodes().iter().map(|n| &n.id) {
                if m.get(p, j) {
                    m.set(v, j);
                }
            }
        }
    }
    m
}

/// Selection `[0 … I … 0]` as a linear arc.
pub fn selection(offset: usize, width: usize, total: usize) -> ArcFunction {
    ArcFunction::Linear { matrix: Matrix::selector(offset, width, total) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(d: usize) -> ArcFunction {
        ArcFunction::Identity { dim: d }
    }

    fn chain(n: usize, d: usize) -> Graph {
        let mut g = single_node(d);
        for _ in 0..n {
            g = apply_series(&g, id(d)).unwrap();
        }
        g
    }

    #[test]
    fn single_node_is_valid() {
        let g = single_node(3);
        assert_eq!(g.input(), g.output());
        assert_eq!(g.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_detected() {
        let f = ArcFunction::affine(Matrix::zeros(2, 3), vec![0.0; 2]);
        let r = Graph::new(vec![Node::new(0, NodeKind::Input, 3), Node::new(1, NodeKind::Output, 5)], vec![Edge::new(0, 1, f)]);
        assert!(matches!(r, Err(GraphError::DimensionMismatch { expected: 5, found: 2, .. })));
    }

    #[test]
    fn cycle_detected() {
        let nodes = vec![
            Node::new(0, NodeKind::Input, 1),
            Node::new(1, NodeKind::Addition, 1),
            Node::new(2, NodeKind::Compute, 1),
            Node::new(3, NodeKind::Output, 1),
        ];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(1, 2, id(1)), Edge::new(2, 1, id(1)), Edge::new(2, 3, id(1))];
        assert!(matches!(Graph::new(nodes, edges), Err(GraphError::CycleDetected(_))));
    }

    #[test]
    fn self_loop_rejected() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Addition, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(1, 1, id(1)), Edge::new(1, 2, id(1))];
        assert!(matches!(Graph::new(nodes, edges), Err(GraphError::CycleDetected(_))));
    }

    #[test]
    fn multiple_terminals_rejected() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Output, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(0, 2, id(1))];
        assert_eq!(Graph::new(nodes, edges), Err(GraphError::MultipleOutputs(vec![NodeId(1), NodeId(2)])));
    }

    #[test]
    fn unreachable_and_dangling() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Addition, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 2, id(1))];
        assert!(matches!(Graph::new(nodes, edges), Err(GraphError::InvalidInDegree { .. })));
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Compute, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(0, 2, id(1))];
        assert_eq!(Graph::new(nodes, edges), Err(GraphError::DanglingNode(NodeId(1))));
    }

    #[test]
    fn series_identity() {
        let g = apply_series(&single_node(2), id(2)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.apply(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn duplicate_stacks() {
        let g = apply_duplicate(&chain(1, 2), 2).unwrap();
        assert_eq!(g.dim(g.output()), 4);
        assert_eq!(g.apply(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_shares_input() {
        let f1 = ArcFunction::scale(1, 2.0);
        let f2 = ArcFunction::scale(1, -1.0);
        let g1 = apply_series(&single_node(1), f1).unwrap();
        let g2 = apply_series(&single_node(1), f2).unwrap();
        let g = apply_concat(&[g1, g2]).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.kind(g.output()), NodeKind::Output);
        assert_eq!(g.apply(&[3.0]).unwrap(), vec![6.0, -3.0]);
        let bad = apply_concat(&[single_node(1), single_node(2)]);
        assert!(matches!(bad, Err(GraphError::DimensionMismatch { .. })));
    }

    #[test]
    fn path_counts_on_chain() {
        let g = chain(2, 1);
        let p = path_counts(&g, 2);
        assert_eq!(p.get(g.output(), g.input()), 1);
        let ones: u64 = g.nodes().iter().flat_map(|a| g.nodes().iter().map(move |b| (a.id, b.id))).map(|(a, b)| p.get(a, b)).sum();
        assert_eq!(ones, 1);
    }

    #[test]
    fn with_edge_rejects_cycles() {
        let g = chain(2, 1);
        let r = g.with_edge(NodeId(2), NodeId(0), id(1));
        assert_eq!(r, Err(GraphError::WouldCreateCycle { src: NodeId(2), dst: NodeId(0) }));
    }
}
