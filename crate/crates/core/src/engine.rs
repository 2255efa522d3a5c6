//! Numeric evaluation through the lifting recursion `x^{(n+1)} = B_{n+1,n} x^{(n)}`,
//! sub-graph functions and complete sub-graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{AlgebraError, FuncMatrix};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::lifting::{factorize_levels, Factorization, LiftError, LiftingMatrix};
use crate::linalg::add_assign;
use crate::passes::LevelGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("state is at level {state} but the lifting matrix starts at level {matrix}")]
    LevelMismatch { state: usize, matrix: usize },
    #[error("node {from} does not reach node {to}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Block state `x^{(n)}` in level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub ids: Vec<NodeId>,
    pub node_levels: Vec<usize>,
    pub blocks: Vec<Vec<f64>>,
    /// Highest lifted level.
    pub level: usize,
}

impl StateVec {
    pub fn block(&self, id: NodeId) -> Option<&[f64]> {
        self.ids.iter().position(|&i| i == id).map(|k| self.blocks[k].as_slice())
    }

    /// Total dimension `Σ d_i`.
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Blocks of the nodes up to level `n`.
    pub fn restrict(&self, n: usize) -> Vec<Vec<f64>> {
        self.blocks.iter().zip(&self.node_levels).filter(|(_, &l)| l <= n).map(|(b, _)| b.clone()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }
}

/// `x^{(0)}`: the input block is `x`, every other block is zero.
pub fn init_state(f: &Factorization, x: &[f64]) -> Result<StateVec, EngineError> {
    let ids: Vec<NodeId> = f.nodes.iter().map(|n| n.id).collect();
    let node_levels = f.nodes.iter().map(|n| n.level).collect();
    let mut blocks: Vec<Vec<f64>> = f.nodes.iter().map(|n| vec![0.0; n.dim]).collect();
    let k = ids.iter().position(|&i| i == f.input).expect("input listed");
    if x.len() != blocks[k].len() {
        return Err(EngineError::DimMismatch { expected: blocks[k].len(), found: x.len() });
    }
    blocks[k] = x.to_vec();
    Ok(StateVec { ids, node_levels, blocks, level: 0 })
}

/// `x^{(n+1)} = B_{n+1,n} x^{(n)}`.
pub fn lift_state(s: &StateVec, b: &LiftingMatrix) -> Result<StateVec, EngineError> {
    if s.level != b.n {
        return Err(EngineError::LevelMismatch { state: s.level, matrix: b.n });
    }
    let blocks = b.apply(&s.blocks)?;
    Ok(StateVec { ids: s.ids.clone(), node_levels: s.node_levels.clone(), blocks, level: s.level + 1 })
}

/// States `x^{(0)}, …, x^{(L)}` and bookkeeping of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub states: Vec<StateVec>,
    /// Value of each node at its own level.
    pub node_values: BTreeMap<NodeId, Vec<f64>>,
    pub wall_time_us: u128,
    /// Arc functions applied.
    pub arc_evals: usize,
    /// Block additions performed at addition nodes.
    pub block_adds: usize,
}

/// A normalized graph with its lifting sequence, ready for evaluation.
#[derive(Debug, Clone)]
pub struct Engine {
    lg: LevelGraph,
    fact: Factorization,
}

impl Engine {
    pub fn new(g: &Graph) -> Result<Self, EngineError> {
        let lg = LevelGraph::new(g.clone()).map_err(LiftError::from)?;
        Self::from_levels(lg)
    }

    pub fn from_levels(lg: LevelGraph) -> Result<Self, EngineError> {
        let fact = factorize_levels(&lg)?;
        Ok(Self { lg, fact })
    }

    pub fn graph(&self) -> &Graph {
        self.lg.graph()
    }

    pub fn level_graph(&self) -> &LevelGraph {
        &self.lg
    }

    pub fn factorization(&self) -> &Factorization {
        &self.fact
    }

    /// Output block of `B_{L,L-1} ⋯ B_{1,0} x^{(0)}`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, EngineError> {
        let mut s = init_state(&self.fact, x)?;
        for b in &self.fact.matrices {
            s = lift_state(&s, b)?;
        }
        Ok(s.block(self.fact.output).expect("output listed").to_vec())
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, EvalTrace), EngineError> {
        let start = Instant::now();
        let mut s = init_state(&self.fact, x)?;
        let mut states = vec![s.clone()];
        let mut arc_evals = 0;
        let mut block_adds = 0;
        for b in &self.fact.matrices {
            for &i in self.lg.levels().nodes_at(b.n + 1) {
                let d = self.lg.graph().in_degree(i);
                arc_evals += d;
                block_adds += d.saturating_sub(1);
            }
            s = lift_state(&s, b)?;
            states.push(s.clone());
        }
        let node_values = s.ids.iter().cloned().zip(s.blocks.iter().cloned()).collect();
        let y = s.block(self.fact.output).expect("output listed").to_vec();
        let trace = EvalTrace { states, node_values, wall_time_us: start.elapsed().as_micros(), arc_evals, block_adds };
        Ok((y, trace))
    }

    pub fn subgraph_eval(&self, i: NodeId, j: NodeId, z: &[f64]) -> Result<Vec<f64>, EngineError> {
        subgraph_eval(self.lg.graph(), i, j, z)
    }
}

/// Forward evaluation of a normalized graph through its lifting sequence.
pub fn forward(g: &Graph, x: &[f64]) -> Result<(Vec<f64>, EvalTrace), EngineError> {
    Engine::new(g)?.forward_traced(x)
}

/// Nodes on paths `j → i`: forward-reachable from `j` and backward-reachable from `i`.
pub fn path_union(g: &Graph, i: NodeId, j: NodeId) -> BTreeSet<NodeId> {
    let down = g.descendants(j);
    g.ancestors(i).into_iter().filter(|v| down.contains(v)).collect()
}

/// `f[i,j](z)`: the sub-graph from `j` to `i` evaluated with inputs from
/// outside the sub-graph left out of every addition.
pub fn subgraph_eval(g: &Graph, i: NodeId, j: NodeId, z: &[f64]) -> Result<Vec<f64>, EngineError> {
    for id in [i, j] {
        if !g.contains(id) {
            return Err(EngineError::UnknownNode(id));
        }
    }
    if z.len() != g.dim(j) {
        return Err(EngineError::DimMismatch { expected: g.dim(j), found: z.len() });
    }
    let nodes = path_union(g, i, j);
    if !nodes.contains(&i) {
        return Err(EngineError::Unreachable { from: j, to: i });
    }
    let mut values: BTreeMap<NodeId, Vec<f64>> = BTreeMap::from([(j, z.to_vec())]);
    for &v in g.topological_order() {
        if v == j || !nodes.contains(&v) {
            continue;
        }
        let mut acc: Option<Vec<f64>> = None;
        for e in g.in_edges(v).filter(|e| nodes.contains(&e.src)) {
            let y = e.func.apply(&values[&e.src]);
            match &mut acc {
                Some(a) if g.kind(v).concatenates() => a.extend(y),
                Some(a) => add_assign(a, &y),
                None => acc = Some(y),
            }
        }
        values.insert(v, acc.expect("node on a path has a predecessor on it"));
    }
    Ok(values.remove(&i).expect("target evaluated"))
}

/// Every addition node on a `j → i` path has all of its in-neighbours on
/// such paths. Unreachable pairs are not complete.
pub fn is_complete_subgraph(g: &Graph, i: NodeId, j: NodeId) -> bool {
    let nodes = path_union(g, i, j);
    if !nodes.contains(&i) {
        return false;
    }
    nodes
        .iter()
        .filter(|&&v| v != j && g.kind(v) == NodeKind::Addition)
        .all(|&v| g.parents(v).iter().all(|p| nodes.contains(p)))
}

/// Completeness of every ordered pair, rows and columns in level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessMatrix {
    pub nodes: Vec<NodeId>,
    /// `complete[r][c]` for the pair (row node, column node).
    pub complete: Vec<Vec<bool>>,
}

pub fn completeness(lg: &LevelGraph) -> CompletenessMatrix {
    let nodes = lg.levels().order();
    let complete = nodes
        .iter()
        .map(|&i| nodes.iter().map(|&j| is_complete_subgraph(lg.graph(), i, j)).collect())
        .collect();
    CompletenessMatrix { nodes, complete }
}

/// Masks every non-Zero entry of `c` whose sub-graph is incomplete.
pub fn mask_incomplete(g: &Graph, c: &FuncMatrix) -> FuncMatrix {
    let mut out = c.clone();
    let cells: Vec<(NodeId, NodeId)> = c.nonzeros().map(|(i, j, _)| (i, j)).collect();
    for (i, j) in cells {
        if !is_complete_subgraph(g, i, j) {
            out.mask(i, j);
        }
    }
    out
}
