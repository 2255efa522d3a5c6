//! Rewrite passes into the addition-node level form.
//!
//! The fixed pipeline is `normalize_io → concat_to_addition → assign_levels →
//! eliminate_jumps → assign_levels`, bundled by [`normalize`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::function::ArcFunction;
use crate::graph::{selection, Edge, Graph, GraphError, NetworkSpec, Node, NodeId, NodeKind};

/// Longest-path levels of a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMap {
    levels: BTreeMap<NodeId, usize>,
    per_level: Vec<Vec<NodeId>>,
}

impl LevelMap {
    pub fn level(&self, id: NodeId) -> usize {
        self.levels[&id]
    }

    pub fn get(&self, id: NodeId) -> Option<usize> {
        self.levels.get(&id).copied()
    }

    /// Highest level `L`.
    pub fn depth(&self) -> usize {
        self.per_level.len() - 1
    }

    /// Nodes at level `l` in ascending id order.
    pub fn nodes_at(&self, l: usize) -> &[NodeId] {
        &self.per_level[l]
    }

    /// `m_l`.
    pub fn width(&self, l: usize) -> usize {
        self.per_level.get(l).map_or(0, Vec::len)
    }

    /// `m_{≤n}`.
    pub fn upto(&self, n: usize) -> usize {
        (0..=n.min(self.depth())).map(|l| self.width(l)).sum()
    }

    /// All nodes in level order.
    pub fn order(&self) -> Vec<NodeId> {
        self.per_level.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_level.iter().map(Vec::len).collect()
    }
}

/// Longest-path level of every node, by dynamic programming over a
/// topological order.
pub fn assign_levels(g: &Graph) -> LevelMap {
    let mut levels: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &v in g.topological_order() {
        let l = g.in_edges(v).map(|e| levels[&e.src] + 1).max().unwrap_or(0);
        levels.insert(v, l);
    }
    let depth = levels.values().copied().max().unwrap_or(0);
    let mut per_level = vec![Vec::new(); depth + 1];
    for (&id, &l) in &levels {
        per_level[l].push(id);
    }
    LevelMap { levels, per_level }
}

/// Merges several inputs into one stacked input and several outputs into one
/// concatenation output. Single-terminal networks pass through unchanged.
///
/// Inputs and outputs are stacked in ascending id order. The old input nodes
/// become compute nodes fed by selection arcs `[0 … I … 0]`.
pub fn normalize_io(spec: &NetworkSpec) -> Result<Graph, GraphError> {
    spec.check_structure()?;
    let inputs = spec.inputs();
    let outputs = spec.outputs();
    if inputs.is_empty() {
        return Err(GraphError::MissingInput);
    }
    let mut nodes = spec.nodes.clone();
    let mut arcs = spec.arcs.clone();
    let mut next = nodes.iter().map(|n| n.id.0).max().unwrap_or(0) + 1;
    let dim_of = |nodes: &[Node], id: NodeId| nodes.iter().find(|n| n.id == id).unwrap().dim;

    if outputs.len() > 1 {
        let total = outputs.iter().map(|&o| dim_of(&nodes, o)).sum();
        let out = NodeId(next);
        next += 1;
        for &o in &outputs {
            let dim = dim_of(&nodes, o);
            arcs.push(Edge { src: o, dst: out, func: ArcFunction::Identity { dim } });
        }
        set_kind(&mut nodes, &outputs, NodeKind::Compute);
        nodes.push(Node { id: out, kind: NodeKind::Output, dim: total });
    }
    if inputs.len() > 1 {
        let total = inputs.iter().map(|&i| dim_of(&nodes, i)).sum();
        let inp = NodeId(next);
        let mut offset = 0;
        for &i in &inputs {
            let width = dim_of(&nodes, i);
            arcs.push(Edge { src: inp, dst: i, func: selection(offset, width, total) });
            offset += width;
        }
        set_kind(&mut nodes, &inputs, NodeKind::Compute);
        nodes.push(Node { id: inp, kind: NodeKind::Input, dim: total });
    }
    Graph::new(nodes, arcs)
}

fn set_kind(nodes: &mut [Node], ids: &[NodeId], kind: NodeKind) {
    for n in nodes.iter_mut().filter(|n| ids.contains(&n.id)) {
        n.kind = kind;
    }
}

/// Splits a stacked input vector of [`normalize_io`] back into per-input blocks.
pub fn stack_inputs(spec: &NetworkSpec, inputs: &BTreeMap<NodeId, Vec<f64>>) -> Vec<f64> {
    spec.inputs().iter().flat_map(|i| inputs[i].iter().copied()).collect()
}

fn is_concat(g: &Graph, id: NodeId) -> bool {
    match g.kind(id) {
        NodeKind::Concat => true,
        NodeKind::Output => g.in_degree(id) > 1,
        _ => false,
    }
}

/// Replaces every concatenation by an addition node.
///
/// Each incoming arc `f_i` of a concatenation node `c` is redirected to a new
/// branch node, which feeds a new addition node through the block embedding
/// `I_i`; the addition node feeds `c` through Identity. Parallel arcs into an
/// existing addition node are split the same way, without the embedding.
pub fn concat_to_addition(g: &Graph) -> Result<Graph, GraphError> {
    let concats: BTreeSet<NodeId> = g.nodes().iter().map(|n| n.id).filter(|&id| is_concat(g, id)).collect();
    let mut next = g.max_id() + 1;
    let mut nodes: Vec<Node> = g.nodes().to_vec();
    let mut edges = Vec::with_capacity(g.edges().len());
    let mut adders: BTreeMap<NodeId, (NodeId, usize)> = BTreeMap::new();
    let mut seen_pairs: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut fresh = |nodes: &mut Vec<Node>, kind, dim| {
        let id = NodeId(next);
        next += 1;
        nodes.push(Node { id, kind, dim });
        id
    };
    for c in &concats {
        let dim = g.dim(*c);
        let a = fresh(&mut nodes, NodeKind::Addition, dim);
        adders.insert(*c, (a, 0));
    }
    for e in g.edges() {
        if let Some((a, offset)) = adders.get_mut(&e.dst) {
            let width = e.func.out_dim();
            let b = fresh(&mut nodes, NodeKind::Compute, width);
            edges.push(Edge { src: e.src, dst: b, func: e.func.clone() });
            edges.push(Edge {
                src: b,
                dst: *a,
                func: ArcFunction::RestrictedIdentity { offset: *offset, width, dim: g.dim(e.dst) },
            });
            *offset += width;
        } else if g.kind(e.dst) == NodeKind::Addition && !seen_pairs.insert((e.src, e.dst)) {
            let width = e.func.out_dim();
            let b = fresh(&mut nodes, NodeKind::Compute, width);
            edges.push(Edge { src: e.src, dst: b, func: e.func.clone() });
            edges.push(Edge { src: b, dst: e.dst, func: ArcFunction::Identity { dim: width } });
        } else {
            edges.push(e.clone());
        }
    }
    for (c, (a, _)) in &adders {
        edges.push(Edge { src: *a, dst: *c, func: ArcFunction::Identity { dim: g.dim(*c) } });
    }
    for n in nodes.iter_mut().filter(|n| n.kind == NodeKind::Concat) {
        n.kind = NodeKind::Compute;
    }
    Graph::new(nodes, edges)
}

/// Replaces every arc spanning more than one level by a chain of relay
/// nodes: the arc function on the first link, Identity on the rest.
pub fn eliminate_jumps(g: &Graph, lm: &LevelMap) -> Result<Graph, GraphError> {
    let mut next = g.max_id() + 1;
    let mut nodes = g.nodes().to_vec();
    let mut edges = Vec::with_capacity(g.edges().len());
    for e in g.edges() {
        let gap = lm.level(e.dst) - lm.level(e.src);
        if gap <= 1 {
            edges.push(e.clone());
            continue;
        }
        let dim = e.func.out_dim();
        let mut prev = e.src;
        for k in 0..gap - 1 {
            let r = NodeId(next);
            next += 1;
            nodes.push(Node { id: r, kind: NodeKind::Relay, dim });
            let func = if k == 0 { e.func.clone() } else { ArcFunction::Identity { dim } };
            edges.push(Edge { src: prev, dst: r, func });
            prev = r;
        }
        edges.push(Edge { src: prev, dst: e.dst, func: ArcFunction::Identity { dim } });
    }
    Graph::new(nodes, edges)
}

/// Violations of the addition-node form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OplusReport {
    /// Ordered pairs joined by more than one arc.
    pub parallel_arcs: Vec<(NodeId, NodeId)>,
    /// Non-addition, non-input nodes whose in-degree is not 1.
    pub bad_in_degree: Vec<(NodeId, usize)>,
    /// Informational: end nodes of jumps that are not addition nodes.
    pub non_addition_jump_targets: Vec<NodeId>,
}

impl OplusReport {
    pub fn is_ok(&self) -> bool {
        self.parallel_arcs.is_empty() && self.bad_in_degree.is_empty()
    }
}

pub fn check_oplus_invariants(g: &Graph) -> OplusReport {
    let mut report = OplusReport::default();
    let mut pairs: BTreeMap<(NodeId, NodeId), usize> = BTreeMap::new();
    for e in g.edges() {
        *pairs.entry((e.src, e.dst)).or_default() += 1;
    }
    report.parallel_arcs = pairs.into_iter().filter(|(_, c)| *c > 1).map(|(p, _)| p).collect();
    for n in g.nodes() {
        let d = g.in_degree(n.id);
        if !matches!(n.kind, NodeKind::Addition | NodeKind::Input) && d != 1 && n.id != g.input() {
            report.bad_in_degree.push((n.id, d));
        }
    }
    let lm = assign_levels(g);
    let targets: BTreeSet<NodeId> = g
        .edges()
        .iter()
        .filter(|e| lm.level(e.dst) - lm.level(e.src) > 1 && g.kind(e.dst) != NodeKind::Addition)
        .map(|e| e.dst)
        .collect();
    report.non_addition_jump_targets = targets.into_iter().collect();
    report
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph is not in normalized form: {0}")]
    NotNormalized(String),
}

/// A graph in addition-node form with unit level gaps, plus its levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGraph {
    graph: Graph,
    levels: LevelMap,
}

impl LevelGraph {
    /// Wraps an already normalized graph, checking the form.
    pub fn new(graph: Graph) -> Result<Self, NormalizeError> {
        let levels = assign_levels(&graph);
        if let Some(n) = graph.nodes().iter().find(|n| n.kind == NodeKind::Concat || is_concat(&graph, n.id)) {
            return Err(NormalizeError::NotNormalized(format!("concatenation node {}", n.id)));
        }
        let report = check_oplus_invariants(&graph);
        if !report.is_ok() {
            return Err(NormalizeError::NotNormalized(format!("{report:?}")));
        }
        if let Some(e) = graph.edges().iter().find(|e| levels.level(e.dst) != levels.level(e.src) + 1) {
            return Err(NormalizeError::NotNormalized(format!("jump {}->{}", e.src, e.dst)));
        }
        Ok(Self { graph, levels })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn levels(&self) -> &LevelMap {
        &self.levels
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// `L`.
    pub fn depth(&self) -> usize {
        self.levels.depth()
    }
}

/// Runs the full pipeline on a graph.
pub fn normalize(g: &Graph) -> Result<LevelGraph, NormalizeError> {
    let g = concat_to_addition(g)?;
    let lm = assign_levels(&g);
    let g = eliminate_jumps(&g, &lm)?;
    LevelGraph::new(g)
}

/// Runs the full pipeline on a possibly multi-terminal description.
pub fn normalize_spec(spec: &NetworkSpec) -> Result<LevelGraph, NormalizeError> {
    normalize(&normalize_io(spec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Io,
    Concat,
    Jumps,
    All,
}

impl std::str::FromStr for Pass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "io" => Ok(Pass::Io),
            "concat" => Ok(Pass::Concat),
            "jumps" => Ok(Pass::Jumps),
            "all" => Ok(Pass::All),
            _ => Err(format!("unknown pass `{s}`")),
        }
    }
}

pub fn run_pass(spec: &NetworkSpec, pass: Pass) -> Result<Graph, NormalizeError> {
    let g = normalize_io(spec)?;
    Ok(match pass {
        Pass::Io => g,
        Pass::Concat => concat_to_addition(&g)?,
        Pass::Jumps => {
            let lm = assign_levels(&g);
            eliminate_jumps(&g, &lm)?
        }
        Pass::All => normalize(&g)?.into_graph(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_concat, apply_series, single_node};

    fn id(d: usize) -> ArcFunction {
        ArcFunction::Identity { dim: d }
    }

    fn fig8a() -> Graph {
        let g1 = apply_series(&single_node(1), ArcFunction::scale(1, 2.0)).unwrap();
        let g2 = apply_series(&single_node(1), ArcFunction::scale(1, 3.0)).unwrap();
        apply_concat(&[g1, g2]).unwrap()
    }

    #[test]
    fn chain_levels() {
        let mut g = single_node(1);
        for _ in 0..4 {
            g = apply_series(&g, id(1)).unwrap();
        }
        let lm = assign_levels(&g);
        assert_eq!(lm.depth(), 4);
        assert_eq!(lm.counts(), vec![1; 5]);
        assert_eq!(lm.upto(2), 3);
    }

    #[test]
    fn fig8_concat_becomes_seven_nodes() {
        let g = concat_to_addition(&fig8a()).unwrap();
        assert_eq!(g.len(), 7);
        let adds: Vec<_> = g.nodes().iter().filter(|n| n.kind == NodeKind::Addition).collect();
        assert_eq!(adds.len(), 1);
        let lm = assign_levels(&g);
        assert_eq!(lm.counts(), vec![1, 2, 2, 1, 1]);
        assert!(check_oplus_invariants(&g).is_ok());
        assert_eq!(g.apply(&[1.5]).unwrap(), vec![3.0, 4.5]);
    }

    #[test]
    fn parallel_arcs_reported() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Addition, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(0, 1, id(1)), Edge::new(1, 2, id(1))];
        let g = Graph::new(nodes, edges).unwrap();
        let r = check_oplus_invariants(&g);
        assert_eq!(r.parallel_arcs, vec![(NodeId(0), NodeId(1))]);
        let fixed = concat_to_addition(&g).unwrap();
        assert!(check_oplus_invariants(&fixed).is_ok());
        assert_eq!(fixed.apply(&[2.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn in_degree_violation_reported() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Compute, 1), Node::new(2, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(0, 2, id(1)), Edge::new(1, 2, id(1))];
        let g = Graph::from_parts_unchecked(nodes, edges);
        let r = check_oplus_invariants(&g);
        assert_eq!(r.bad_in_degree, vec![(NodeId(2), 2)]);
        assert_eq!(r.non_addition_jump_targets, vec![NodeId(2)]);
    }

    #[test]
    fn jump_becomes_chain() {
        let nodes = vec![
            Node::new(0, NodeKind::Input, 1),
            Node::new(1, NodeKind::Compute, 1),
            Node::new(2, NodeKind::Addition, 1),
            Node::new(3, NodeKind::Output, 1),
        ];
        let edges = vec![
            Edge::new(0, 1, ArcFunction::scale(1, 2.0)),
            Edge::new(1, 2, id(1)),
            Edge::new(0, 2, ArcFunction::scale(1, 5.0)),
            Edge::new(2, 3, id(1)),
        ];
        let g = Graph::new(nodes, edges).unwrap();
        let lg = normalize(&g).unwrap();
        assert_eq!(lg.graph().len(), 5);
        let relay = lg.graph().nodes().iter().find(|n| n.kind == NodeKind::Relay).unwrap();
        assert_eq!(lg.levels().level(relay.id), 1);
        assert_eq!(lg.graph().edge(NodeId(0), relay.id).unwrap().func, ArcFunction::scale(1, 5.0));
        assert_eq!(lg.graph().apply(&[1.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn multi_io_stacks() {
        let nodes = vec![
            Node::new(0, NodeKind::Input, 2),
            Node::new(1, NodeKind::Input, 1),
            Node::new(2, NodeKind::Addition, 2),
            Node::new(3, NodeKind::Output, 2),
            Node::new(4, NodeKind::Output, 3),
        ];
        let m = crate::linalg::Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let edges = vec![
            Edge::new(0, 2, id(2)),
            Edge::new(1, 2, ArcFunction::linear(m)),
            Edge::new(2, 3, id(2)),
            Edge::new(2, 4, ArcFunction::linear(crate::linalg::Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap())),
        ];
        let spec = NetworkSpec::new(nodes, edges);
        let g = normalize_io(&spec).unwrap();
        assert_eq!(g.dim(g.input()), 3);
        assert_eq!(g.dim(g.output()), 5);
        let y = g.apply(&[1.0, 2.0, 10.0]).unwrap();
        assert_eq!(y, vec![11.0, -8.0, 11.0, -8.0, 3.0]);
    }

    #[test]
    fn normalized_graph_rejects_jumps() {
        let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Compute, 1), Node::new(2, NodeKind::Addition, 1), Node::new(3, NodeKind::Output, 1)];
        let edges = vec![Edge::new(0, 1, id(1)), Edge::new(1, 2, id(1)), Edge::new(0, 2, id(1)), Edge::new(2, 3, id(1))];
        let g = Graph::new(nodes, edges).unwrap();
        assert!(matches!(LevelGraph::new(g), Err(NormalizeError::NotNormalized(_))));
    }
}
