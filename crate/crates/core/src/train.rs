//! Full-batch gradient descent on normalized graphs.
//!
//! Loss is `fidelity + λ·|θ|` with fidelity the mean over samples of the
//! squared error summed over output components. Every accepted step is
//! found by halving the step size until the loss does not increase.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::function::{ArcCache, ArcFunction, FunctionError};
use crate::graph::{Graph, NetworkSpec, NodeId, SCHEMA};
use crate::linalg::add_assign;
use crate::passes::{LevelGraph, NormalizeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {inputs} inputs but {targets} targets")]
    RaggedDataset { inputs: usize, targets: usize },
    #[error("sample {index}: expected dimension {expected}, found {found}")]
    SampleDim { index: usize, expected: usize, found: usize },
    #[error("loss became non-finite at step {0}")]
    DivergedLoss(usize),
    #[error("arc {src}->{dst} is not differentiable: {source}")]
    NonDifferentiableArc { src: NodeId, dst: NodeId, source: FunctionError },
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
}

/// Training pairs `(u_i, v_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check(&self, g: &Graph) -> Result<(), TrainError> {
        if self.inputs.len() != self.targets.len() {
            return Err(TrainError::RaggedDataset { inputs: self.inputs.len(), targets: self.targets.len() });
        }
        let (din, dout) = (g.dim(g.input()), g.dim(g.output()));
        for (index, (u, v)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if u.len() != din {
                return Err(TrainError::SampleDim { index, expected: din, found: u.len() });
            }
            if v.len() != dout {
                return Err(TrainError::SampleDim { index, expected: dout, found: v.len() });
            }
        }
        Ok(())
    }
}

/// Trainable parameters keyed by arc `(src, dst)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(with = "arc_keyed")]
    pub arcs: BTreeMap<(NodeId, NodeId), Vec<f64>>,
}

mod arc_keyed {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        src: NodeId,
        dst: NodeId,
        values: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<(NodeId, NodeId), Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m.iter().map(|(&(src, dst), values)| Entry { src, dst, values: values.clone() }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(NodeId, NodeId), Vec<f64>>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| ((e.src, e.dst), e.values)).collect())
    }
}

impl ParamSet {
    /// Parameters of every trainable arc of `g`.
    pub fn from_graph(g: &Graph) -> Self {
        let arcs = g
            .edges()
            .iter()
            .filter(|e| e.func.is_trainable())
            .map(|e| ((e.src, e.dst), e.func.params()))
            .collect();
        Self { arcs }
    }

    /// `|θ|`: number of scalar parameters.
    pub fn len(&self) -> usize {
        self.arcs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arcs.values().flatten().copied().collect()
    }

    /// Inverse of [`ParamSet::flatten`] with the same layout as `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut k = 0;
        let arcs = self
            .arcs
            .iter()
            .map(|(key, v)| {
                let part = flat[k..k + v.len()].to_vec();
                k += v.len();
                (*key, part)
            })
            .collect();
        Self { arcs }
    }

    /// Writes the parameters into the arcs of `g`. Keys without a matching
    /// trainable arc are ignored.
    pub fn apply(&self, g: &Graph) -> Graph {
        let (nodes, mut edges) = g.clone().into_parts();
        for e in &mut edges {
            if let Some(p) = self.arcs.get(&(e.src, e.dst)) {
                if e.func.param_count() == p.len() {
                    e.func.set_params(p);
                }
            }
        }
        Graph::from_parts_unchecked(nodes, edges)
    }

    /// `true` when every arc of `other` is an arc of `self` with equal values.
    pub fn is_subset_of(&self, other: &ParamSet) -> bool {
        self.arcs.iter().all(|(k, v)| other.arcs.get(k) == Some(v))
    }

    fn axpy(&self, a: f64, dir: &ParamSet) -> ParamSet {
        let arcs = self
            .arcs
            .iter()
            .map(|(k, v)| {
                let d = &dir.arcs[k];
                (*k, v.iter().zip(d).map(|(x, g)| x + a * g).collect())
            })
            .collect();
        ParamSet { arcs }
    }
}

/// `R(θ) = λ·|θ|`.
pub fn regularizer(lambda: f64, param_count: usize) -> f64 {
    lambda * param_count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub loss: f64,
    pub fidelity: f64,
    pub regularizer: f64,
}

/// Evaluation plan of a normalized graph: nodes in level order, incoming arcs
/// in level order of their sources.
struct Plan<'a> {
    g: &'a Graph,
    order: Vec<usize>,
    incoming: Vec<Vec<usize>>,
    input: usize,
    output: usize,
}

impl<'a> Plan<'a> {
    fn new(lg: &'a LevelGraph) -> Self {
        let g = lg.graph();
        let order_ids = lg.levels().order();
        let rank: BTreeMap<NodeId, usize> = order_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut incoming = vec![Vec::new(); g.len()];
        for (k, e) in g.edges().iter().enumerate() {
            incoming[g.index_of(e.dst)].push(k);
        }
        for list in &mut incoming {
            list.sort_by_key(|&k| rank[&g.edges()[k].src]);
        }
        let order = order_ids.iter().map(|&id| g.index_of(id)).collect();
        Plan { g, order, incoming, input: g.index_of(g.input()), output: g.index_of(g.output()) }
    }

    /// Node values in the same summation order as the lifting recursion.
    fn forward(&self, x: &[f64], caches: Option<&mut Vec<ArcCache>>) -> Vec<Vec<f64>> {
        let edges = self.g.edges();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); self.g.len()];
        values[self.input] = x.to_vec();
        let mut store = caches;
        for &v in &self.order {
            if v == self.input {
                continue;
            }
            let mut acc: Option<Vec<f64>> = None;
            for &k in &self.incoming[v] {
                let e = &edges[k];
                let cache = e.func.forward_cached(&values[self.g.index_of(e.src)]);
                match &mut acc {
                    Some(a) => add_assign(a, &cache.out),
                    None => acc = Some(cache.out.clone()),
                }
                if let Some(c) = store.as_deref_mut() {
                    c[k] = cache;
                }
            }
            values[v] = acc.expect("normalized node has an incoming arc");
        }
        values
    }
}

/// Output of `g` at `x`, evaluated level by level.
pub fn predict(lg: &LevelGraph, x: &[f64]) -> Vec<f64> {
    let plan = Plan::new(lg);
    plan.forward(x, None).swap_remove(plan.output)
}

/// Values of every node at every training input.
pub fn node_values(lg: &LevelGraph, data: &Dataset) -> Vec<BTreeMap<NodeId, Vec<f64>>> {
    let plan = Plan::new(lg);
    let g = lg.graph();
    data.inputs
        .iter()
        .map(|u| plan.forward(u, None).into_iter().enumerate().map(|(k, v)| (g.nodes()[k].id, v)).collect())
        .collect()
}

fn fidelity_of(plan: &Plan, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for (u, v) in data.inputs.iter().zip(&data.targets) {
        let y = plan.forward(u, None).swap_remove(plan.output);
        total += y.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / data.len() as f64
}

/// Loss of the graph with its current arc parameters.
pub fn loss(lg: &LevelGraph, data: &Dataset, lambda: f64) -> Result<LossValue, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    data.check(lg.graph())?;
    let fidelity = fidelity_of(&Plan::new(lg), data);
    let regularizer = regularizer(lambda, lg.graph().param_count());
    Ok(LossValue { loss: fidelity + regularizer, fidelity, regularizer })
}

/// Loss with parameters `theta` written into the graph first.
pub fn loss_at(lg: &LevelGraph, theta: &ParamSet, data: &Dataset, lambda: f64) -> Result<LossValue, TrainError> {
    loss(&with_params(lg, theta), data, lambda)
}

pub fn with_params(lg: &LevelGraph, theta: &ParamSet) -> LevelGraph {
    LevelGraph::new(theta.apply(lg.graph())).expect("parameters do not change structure")
}

/// Gradient of the fidelity term; the regularizer does not depend on values.
/// An empty dataset has zero gradient.
pub fn grad(lg: &LevelGraph, data: &Dataset) -> Result<ParamSet, TrainError> {
    let g = lg.graph();
    let mut out = ParamSet::from_graph(g);
    for v in out.arcs.values_mut() {
        v.iter_mut().for_each(|p| *p = 0.0);
    }
    if data.is_empty() {
        return Ok(out);
    }
    data.check(g)?;
    let plan = Plan::new(lg);
    let edges = g.edges();
    let n = data.len() as f64;
    let mut caches = vec![ArcCache::default(); edges.len()];
    for (u, v) in data.inputs.iter().zip(&data.targets) {
        let values = plan.forward(u, Some(&mut caches));
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; g.len()];
        adj[plan.output] = Some(values[plan.output].iter().zip(v).map(|(y, t)| 2.0 * (y - t) / n).collect());
        for &node in plan.order.iter().rev() {
            let Some(gy) = adj[node].take() else { continue };
            for &k in &plan.incoming[node] {
                let e = &edges[k];
                let src = g.index_of(e.src);
                let (gx, gp) = e
                    .func
                    .vjp(&values[src], &caches[k], &gy)
                    .map_err(|source| TrainError::NonDifferentiableArc { src: e.src, dst: e.dst, source })?;
                if let Some(acc) = out.arcs.get_mut(&(e.src, e.dst)) {
                    add_assign(acc, &gp);
                }
                match &mut adj[src] {
                    Some(a) => add_assign(a, &gx),
                    slot => *slot = Some(gx),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Use the parameters stored in the graph.
    #[default]
    Graph,
    /// Draw fresh parameters from the seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
}

fn default_halvings() -> usize {
    30
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.1, lambda: 1e-4, seed: 0, checkpoint_every: 50, init: InitMode::Graph, max_halvings: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub loss: f64,
    pub fidelity: f64,
    pub params: ParamSet,
}

/// Where a pruned network came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rewind_step: usize,
    pub parent_loss_at_rewind: f64,
    pub parent_fidelity_at_rewind: f64,
    pub parent_best_loss: f64,
    pub parent_best_fidelity: f64,
    pub parent_param_count: usize,
    pub parent_iterations: usize,
    pub pruned_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub schema: String,
    pub kind: String,
    pub config: TrainConfig,
    /// The network with its initial parameters `θ(0)`.
    pub graph: NetworkSpec,
    pub data: Dataset,
    pub param_count: usize,
    pub loss_trace: Vec<f64>,
    pub fidelity_trace: Vec<f64>,
    pub accepted_steps: usize,
    pub best_loss: f64,
    pub best_fidelity: f64,
    pub best_step: usize,
    pub iterations: usize,
    pub checkpoints: Vec<Checkpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl TrainRun {
    pub fn checkpoint(&self, step: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn final_params(&self) -> &ParamSet {
        &self.checkpoints.last().expect("final checkpoint").params
    }

    pub fn final_fidelity(&self) -> f64 {
        *self.fidelity_trace.last().expect("non-empty trace")
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("non-empty trace")
    }

    /// The run's network as a normalized graph with the parameters of `params`.
    pub fn level_graph(&self, params: &ParamSet) -> Result<LevelGraph, TrainError> {
        let g = Graph::from_spec(self.graph.clone()).map_err(NormalizeError::from)?;
        Ok(LevelGraph::new(params.apply(&g))?)
    }
}

fn random_params(g: &Graph, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ParamSet::from_graph(g);
    for e in g.edges().iter().filter(|e| e.func.is_trainable()) {
        let fan_in = e.func.in_dim() as f64;
        let rows = e.func.param_count() / (e.func.in_dim() + usize::from(!matches!(e.func, ArcFunction::Linear { .. })));
        let weights = rows * e.func.in_dim();
        let bound = 1.0 / fan_in.sqrt();
        let p = theta.arcs.get_mut(&(e.src, e.dst)).unwrap();
        for (k, x) in p.iter_mut().enumerate() {
            *x = if k < weights { rng.gen_range(-bound..bound) } else { 0.0 };
        }
    }
    theta
}

/// Gradient descent with backtracking halving.
pub fn train(lg: &LevelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    let mut theta = match cfg.init {
        InitMode::Graph => ParamSet::from_graph(lg.graph()),
        InitMode::Random => random_params(lg.graph(), cfg.seed),
    };
    let start = with_params(lg, &theta);
    let mut current = loss(&start, data, cfg.lambda)?;
    if !current.loss.is_finite() {
        return Err(TrainError::DivergedLoss(0));
    }
    let mut loss_trace = vec![current.loss];
    let mut fidelity_trace = vec![current.fidelity];
    let mut checkpoints = vec![Checkpoint { step: 0, loss: current.loss, fidelity: current.fidelity, params: theta.clone() }];
    let mut accepted = 0;
    let mut net = start.clone();
    for step in 1..=cfg.steps {
        let gr = grad(&net, data)?;
        if gr.flatten().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::DivergedLoss(step));
        }
        let mut eta = cfg.lr;
        for _ in 0..=cfg.max_halvings {
            let cand = theta.axpy(-eta, &gr);
            let cand_net = with_params(lg, &cand);
            let l = loss(&cand_net, data, cfg.lambda)?;
            if l.loss.is_finite() && l.loss <= current.loss {
                theta = cand;
                net = cand_net;
                current = l;
                accepted += 1;
                break;
            }
            eta *= 0.5;
        }
        loss_trace.push(current.loss);
        fidelity_trace.push(current.fidelity);
        if step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            checkpoints.push(Checkpoint { step, loss: current.loss, fidelity: current.fidelity, params: theta.clone() });
        }
    }
    let (best_step, best_loss) = loss_trace
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, l)| if l < acc.1 { (k, l) } else { acc });
    Ok(TrainRun {
        schema: SCHEMA.into(),
        kind: "train_run".into(),
        config: cfg.clone(),
        graph: start.graph().to_spec(),
        data: data.clone(),
        param_count: theta.len(),
        best_fidelity: fidelity_trace[best_step],
        best_loss,
        best_step,
        loss_trace,
        fidelity_trace,
        accepted_steps: accepted,
        iterations: cfg.steps,
        checkpoints,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_series, single_node};
    use crate::linalg::Matrix;

    fn regression() -> (LevelGraph, Dataset) {
        let g = apply_series(&single_node(2), ArcFunction::affine(Matrix::zeros(1, 2), vec![0.0])).unwrap();
        let inputs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]];
        let targets = vec![vec![1.0], vec![2.0], vec![2.5], vec![0.5]];
        (LevelGraph::new(g).unwrap(), Dataset::new(inputs, targets))
    }

    #[test]
    fn zero_network_loss() {
        let (lg, data) = regression();
        let l = loss(&lg, &data, 0.0).unwrap();
        let expect = data.targets.iter().map(|v| v[0] * v[0]).sum::<f64>() / 4.0;
        assert!((l.loss - expect).abs() < 1e-15);
        assert!(matches!(loss(&lg, &Dataset::new(vec![], vec![]), 0.0), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn gradient_of_affine_regression() {
        let (lg, data) = regression();
        let w = [0.3, -0.2];
        let b = 0.1;
        let theta = ParamSet::from_graph(lg.graph()).with_flat(&[w[0], w[1], b]);
        let net = with_params(&lg, &theta);
        let gr = grad(&net, &data).unwrap().flatten();
        let mut expect = [0.0; 3];
        for (u, v) in data.inputs.iter().zip(&data.targets) {
            let r = w[0] * u[0] + w[1] * u[1] + b - v[0];
            expect[0] += 2.0 * r * u[0] / 4.0;
            expect[1] += 2.0 * r * u[1] / 4.0;
            expect[2] += 2.0 * r / 4.0;
        }
        for (a, e) in gr.iter().zip(expect) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn descent_and_determinism() {
        let (lg, data) = regression();
        let cfg = TrainConfig { steps: 50, lr: 0.5, lambda: 1e-4, checkpoint_every: 10, ..Default::default() };
        let run = train(&lg, &data, &cfg).unwrap();
        assert!(run.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40, 50]);
        let again = train(&lg, &data, &cfg).unwrap();
        assert_eq!(run.loss_trace, again.loss_trace);
    }

    #[test]
    fn stationary_start_stays() {
        let g = apply_series(&single_node(1), ArcFunction::affine(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![1.0])).unwrap();
        let lg = LevelGraph::new(g).unwrap();
        let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![3.0]]);
        let run = train(&lg, &data, &TrainConfig { steps: 5, ..Default::default() }).unwrap();
        assert!(run.loss_trace.iter().all(|l| *l == run.loss_trace[0]));
        assert_eq!(run.final_params(), &run.checkpoints[0].params);
    }

    #[test]
    fn empty_data_gradient_is_zero() {
        let (lg, _) = regression();
        let gr = grad(&lg, &Dataset::new(vec![], vec![])).unwrap();
        assert!(gr.flatten().iter().all(|v| *v == 0.0));
    }
}
