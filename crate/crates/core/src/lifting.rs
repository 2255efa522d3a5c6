//! Lower-triangular lifting factorization of the all-pair function matrix.
//!
//! For a normalized graph with levels `0..=L`, `B_{n+1,n}` is the identity
//! except for the block `E_{n+1,≤n}` holding the arc functions into level
//! `n+1`. The all-pair matrix is `C_{≤L} = B_{L,L-1} ⋯ B_{1,0} · I`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{compose_simple, sum_simple, AlgebraError, ArcExpr, FuncMatrix};
use crate::function::ArcFunction;
use crate::graph::{selection, Edge, Graph, GraphError, Node, NodeId, NodeKind, SCHEMA};
use crate::passes::{LevelGraph, NormalizeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("level {n} out of range for depth {depth}")]
    LevelOutOfRange { n: usize, depth: usize },
    #[error("graph is not normalized: {0}")]
    NotNormalized(String),
    #[error("malformed lifting sequence: {0}")]
    MalformedSequence(String),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<NormalizeError> for LiftError {
    fn from(e: NormalizeError) -> Self {
        match e {
            NormalizeError::Graph(g) => LiftError::Graph(g),
            NormalizeError::NotNormalized(s) => LiftError::NotNormalized(s),
        }
    }
}

/// Node metadata carried alongside the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub kind: NodeKind,
    pub dim: usize,
    pub level: usize,
}

/// `B_{n+1,n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftingMatrix {
    /// Source level.
    pub n: usize,
    pub matrix: FuncMatrix,
}

impl LiftingMatrix {
    /// Off-diagonal entries, i.e. the `E` block, as `(row, col, expr)`.
    pub fn e_entries(&self) -> Vec<(NodeId, NodeId, ArcExpr)> {
        self.matrix.nonzeros().filter(|(i, j, _)| i != j).map(|(i, j, e)| (i, j, e.clone())).collect()
    }

    /// `B x` on a fully present block state.
    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgebraError> {
        self.matrix.eval_dense(x)
    }
}

fn labels(lg: &LevelGraph) -> Vec<(NodeId, usize)> {
    lg.levels().order().into_iter().map(|id| (id, lg.graph().dim(id))).collect()
}

/// `E_{n+1,≤n}`: rows are the level-`n+1` nodes, columns the nodes up to level `n`.
pub fn build_e(lg: &LevelGraph, n: usize) -> Result<FuncMatrix, LiftError> {
    let depth = lg.depth();
    if n >= depth {
        return Err(LiftError::LevelOutOfRange { n, depth });
    }
    let g = lg.graph();
    let lm = lg.levels();
    let rows = lm.nodes_at(n + 1).iter().map(|&id| (id, g.dim(id))).collect();
    let cols = labels(lg).into_iter().take(lm.upto(n)).collect();
    let mut e = FuncMatrix::zeros(rows, cols);
    for &i in lm.nodes_at(n + 1) {
        for arc in g.in_edges(i) {
            e.set(i, arc.src, ArcExpr::base(arc.func.clone()))?;
        }
    }
    Ok(e)
}

/// `B_{n+1,n}` over all nodes in level order.
pub fn build_b(lg: &LevelGraph, n: usize) -> Result<LiftingMatrix, LiftError> {
    let e = build_e(lg, n)?;
    let mut b = FuncMatrix::identity(labels(lg));
    for (i, j, expr) in e.nonzeros() {
        b.set(i, j, expr.clone())?;
    }
    Ok(LiftingMatrix { n, matrix: b })
}

/// The lifting sequence of a normalized graph, with node metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorization {
    pub schema: String,
    pub kind: String,
    pub input: NodeId,
    pub output: NodeId,
    pub nodes: Vec<NodeInfo>,
    /// `B_{1,0}, …, B_{L,L-1}`.
    pub matrices: Vec<LiftingMatrix>,
}

impl Factorization {
    pub fn depth(&self) -> usize {
        self.matrices.len()
    }

    pub fn labels(&self) -> Vec<(NodeId, usize)> {
        self.nodes.iter().map(|n| (n.id, n.dim)).collect()
    }

    pub fn level_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.level)
    }

    /// Inverses `B_{n+1,n}^{-1}` in application order `B_{L,L-1}^{-1}, …, B_{1,0}^{-1}`.
    pub fn inverses(&self) -> Vec<LiftingMatrix> {
        self.matrices.iter().rev().map(inverse_b).collect()
    }
}

/// Builds `B_{1,0}, …, B_{L,L-1}` for a graph in normalized form.
pub fn factorize(g: &Graph) -> Result<Factorization, LiftError> {
    let lg = LevelGraph::new(g.clone())?;
    factorize_levels(&lg)
}

pub fn factorize_levels(lg: &LevelGraph) -> Result<Factorization, LiftError> {
    let g = lg.graph();
    let lm = lg.levels();
    let nodes = lm
        .order()
        .into_iter()
        .map(|id| NodeInfo { id, kind: g.kind(id), dim: g.dim(id), level: lm.level(id) })
        .collect();
    let matrices = (0..lg.depth()).map(|n| build_b(lg, n)).collect::<Result<_, _>>()?;
    Ok(Factorization { schema: SCHEMA.into(), kind: "lifting".into(), input: g.input(), output: g.output(), nodes, matrices })
}

/// `C_{≤n} = B_{n,n-1} ⋯ B_{1,0} · I`, multiplied right to left.
pub fn allpair_upto(f: &Factorization, n: usize) -> Result<FuncMatrix, LiftError> {
    if n > f.depth() {
        return Err(LiftError::LevelOutOfRange { n, depth: f.depth() });
    }
    let mut c = FuncMatrix::identity(f.labels());
    for b in &f.matrices[..n] {
        c = b.matrix.mat_mul(&c)?;
    }
    Ok(c)
}

/// `C_{≤L}` from the product form.
pub fn allpair_product(f: &Factorization) -> Result<FuncMatrix, LiftError> {
    allpair_upto(f, f.depth())
}

/// All-pair matrix by induction over levels: `f[a,a] = I` and
/// `f[a,c] = Σ_{b → a} arc[a,b] ∘ f[b,c]`.
pub fn allpair_inductive(g: &Graph) -> Result<FuncMatrix, LiftError> {
    let lg = LevelGraph::new(g.clone())?;
    let lm = lg.levels();
    let order = lm.order();
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut c = FuncMatrix::identity(labels(&lg));
    for &a in &order {
        let mut arcs: Vec<&Edge> = g.in_edges(a).collect();
        arcs.sort_by_key(|e| pos[&e.src]);
        let mut terms: BTreeMap<NodeId, Vec<ArcExpr>> = BTreeMap::new();
        for arc in arcs {
            let head = ArcExpr::base(arc.func.clone());
            for &src in &order[..=pos[&arc.src]] {
                let tail = c.get(arc.src, src);
                if !tail.is_zero() {
                    terms.entry(src).or_default().push(compose_simple(&head, &tail)?);
                }
            }
        }
        for (src, ts) in terms {
            let e = sum_simple(g.dim(src), g.dim(a), ts)?;
            c.set(a, src, e)?;
        }
    }
    Ok(c)
}

/// `B^{-1}`: the `E` block negated by composition with `-I` on the left.
pub fn inverse_b(b: &LiftingMatrix) -> LiftingMatrix {
    let mut m = b.matrix.clone();
    for (i, j, e) in b.e_entries() {
        let neg = ArcExpr::base(ArcFunction::scale(e.out_dim(), -1.0));
        m.set(i, j, ArcExpr::compose(&neg, &e).expect("dims agree")).expect("same cell");
    }
    LiftingMatrix { n: b.n, matrix: m }
}

fn check_sequence(f: &Factorization) -> Result<(), LiftError> {
    let bad = |s: String| Err(LiftError::MalformedSequence(s));
    let labels = f.labels();
    let ids: BTreeSet<NodeId> = labels.iter().map(|l| l.0).collect();
    if ids.len() != labels.len() {
        return bad("duplicate node ids".into());
    }
    if !ids.contains(&f.input) || !ids.contains(&f.output) {
        return bad("input or output missing from node list".into());
    }
    let level: BTreeMap<NodeId, usize> = f.nodes.iter().map(|n| (n.id, n.level)).collect();
    if f.nodes.windows(2).any(|w| w[0].level > w[1].level) {
        return bad("nodes not in level order".into());
    }
    for (k, b) in f.matrices.iter().enumerate() {
        if b.n != k {
            return bad(format!("matrix {k} is annotated with level {}", b.n));
        }
        if b.matrix.row_labels() != labels.as_slice() || b.matrix.col_labels() != labels.as_slice() {
            return bad(format!("matrix {k} labels differ from the node list"));
        }
        for (pos, &(id, _)) in labels.iter().enumerate() {
            if !b.matrix.at(pos, pos).is_identity() {
                return bad(format!("matrix {k} diagonal at {id} is not the identity"));
            }
        }
        for (i, j, e) in b.e_entries() {
            if level[&i] != k + 1 || level[&j] > k {
                return bad(format!("matrix {k} has an entry ({i}, {j}) outside its E block"));
            }
            if e.as_base().is_none() {
                return bad(format!("matrix {k} entry ({i}, {j}) is not an arc function"));
            }
        }
    }
    Ok(())
}

/// Reads the arcs back from the `E` blocks and keeps the nodes on paths from
/// the input to the output. Nodes are relabelled `0..m` in level order.
///
/// With `fold_relays`, straight chains of relay nodes joined by Identity are
/// collapsed back into single arcs.
pub fn reconstruct_graph(f: &Factorization, fold_relays: bool) -> Result<Graph, LiftError> {
    check_sequence(f)?;
    let mut edges: Vec<Edge> = Vec::new();
    for b in &f.matrices {
        for (i, j, e) in b.e_entries() {
            edges.push(Edge { src: j, dst: i, func: e.as_base().expect("checked").clone() });
        }
    }
    // back-track from the output, then forward from the input
    let mut keep: BTreeSet<NodeId> = BTreeSet::from([f.output]);
    for b in f.matrices.iter().rev() {
        for (i, j, _) in b.e_entries() {
            if keep.contains(&i) {
                keep.insert(j);
            }
        }
    }
    let mut reach: BTreeSet<NodeId> = BTreeSet::from([f.input]);
    for b in &f.matrices {
        for (i, j, _) in b.e_entries() {
            if reach.contains(&j) {
                reach.insert(i);
            }
        }
    }
    keep.retain(|id| reach.contains(id));
    edges.retain(|e| keep.contains(&e.src) && keep.contains(&e.dst));
    let mut infos: Vec<&NodeInfo> = f.nodes.iter().filter(|n| keep.contains(&n.id)).collect();

    if fold_relays {
        loop {
            let relay = infos.iter().map(|n| n.id).find(|&r| {
                let ins = edges.iter().filter(|e| e.dst == r).count();
                let outs: Vec<&Edge> = edges.iter().filter(|e| e.src == r).collect();
                f.nodes.iter().any(|n| n.id == r && n.kind == NodeKind::Relay)
                    && ins == 1
                    && outs.len() == 1
                    && matches!(outs[0].func, ArcFunction::Identity { .. })
            });
            let Some(r) = relay else { break };
            let out_pos = edges.iter().position(|e| e.src == r).unwrap();
            let dst = edges.remove(out_pos).dst;
            edges.iter_mut().filter(|e| e.dst == r).for_each(|e| e.dst = dst);
            infos.retain(|n| n.id != r);
        }
    }

    let relabel: BTreeMap<NodeId, NodeId> = infos.iter().enumerate().map(|(k, n)| (n.id, NodeId(k))).collect();
    let nodes = infos.iter().map(|n| Node { id: relabel[&n.id], kind: n.kind, dim: n.dim }).collect();
    let edges = edges
        .into_iter()
        .map(|e| Edge { src: relabel[&e.src], dst: relabel[&e.dst], func: e.func })
        .collect();
    Ok(Graph::new(nodes, edges)?)
}

/// Companion network `(x, y) ↦ (x, y + sign·F(x))` of the network `F`.
///
/// With `sign = -1` this is the block network `[[I, 0], [-F, I]]`; its
/// composition with the `sign = +1` network is the identity.
pub fn companion(g: &Graph, sign: f64) -> Result<Graph, LiftError> {
    let dx = g.dim(g.input());
    let dy = g.dim(g.output());
    let total = dx + dy;
    let base = g.max_id() + 1;
    let (inp, sum, out) = (NodeId(base), NodeId(base + 1), NodeId(base + 2));
    let x = g.input();
    let mut nodes: Vec<Node> = g
        .nodes()
        .iter()
        .map(|n| {
            let kind = match n.kind {
                NodeKind::Input => NodeKind::Compute,
                NodeKind::Output if g.in_degree(n.id) > 1 => NodeKind::Concat,
                NodeKind::Output => NodeKind::Compute,
                k => k,
            };
            Node { id: n.id, kind, dim: n.dim }
        })
        .collect();
    nodes.push(Node { id: inp, kind: NodeKind::Input, dim: total });
    nodes.push(Node { id: sum, kind: NodeKind::Addition, dim: dy });
    nodes.push(Node { id: out, kind: NodeKind::Output, dim: total });
    let mut edges = vec![Edge { src: inp, dst: x, func: selection(0, dx, total) }];
    edges.extend(g.edges().iter().cloned());
    edges.push(Edge { src: inp, dst: sum, func: selection(dx, dy, total) });
    edges.push(Edge { src: g.output(), dst: sum, func: ArcFunction::scale(dy, sign) });
    edges.push(Edge { src: x, dst: out, func: ArcFunction::Identity { dim: dx } });
    edges.push(Edge { src: sum, dst: out, func: ArcFunction::Identity { dim: dy } });
    Ok(Graph::new(nodes, edges)?)
}

/// Result of [`verify_inverse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseReport {
    pub trials: usize,
    /// Worst `max |B^{-1} B x - x|` over single matrices.
    pub max_single_error: f64,
    /// Worst error of the full chain `C^{-1} C x^{(0)}` against `x^{(0)}`.
    pub max_chain_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `B^{-1}(B x) = x` on random full states and that the inverse chain
/// recovers `x^{(0)}` from the lifted state.
pub fn verify_inverse(f: &Factorization, trials: usize, seed: u64, tolerance: f64) -> Result<InverseReport, LiftError> {
    check_sequence(f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = f.labels();
    let inverses = f.inverses();
    let input_pos = labels.iter().position(|l| l.0 == f.input).unwrap();
    let mut single: f64 = 0.0;
    let mut chain: f64 = 0.0;
    let random_state = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        labels.iter().map(|&(_, d)| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    for _ in 0..trials {
        for (b, binv) in f.matrices.iter().zip(inverses.iter().rev()) {
            let x = random_state(&mut rng);
            let back = binv.apply(&b.apply(&x)?)?;
            single = single.max(max_diff(&x, &back));
        }
        let mut x0: Vec<Vec<f64>> = labels.iter().map(|&(_, d)| vec![0.0; d]).collect();
        x0[input_pos] = random_state(&mut rng).swap_remove(input_pos);
        let mut state = x0.clone();
        for b in &f.matrices {
            state = b.apply(&state)?;
        }
        for binv in &inverses {
            state = binv.apply(&state)?;
        }
        chain = chain.max(max_diff(&x0, &state));
    }
    let passed = single <= tolerance && chain <= tolerance;
    Ok(InverseReport { trials, max_single_error: single, max_chain_error: chain, tolerance, passed })
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
