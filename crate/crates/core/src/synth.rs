//! Seeded generators for random networks, CPWL functions and the pruning
//! fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpwl::CpwlSpec;
use crate::function::ArcFunction;
use crate::graph::{apply_concat, apply_series, single_node, Edge, Graph, Node, NodeId, NodeKind};
use crate::linalg::Matrix;
use crate::passes::LevelGraph;
use crate::train::{predict, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagConfig {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_dim: usize,
    /// Inclusive range for the number of concatenation nodes.
    pub concats: (usize, usize),
    /// Chance that an internal node is a two-input addition node.
    pub addition_prob: f64,
}

impl Default for DagConfig {
    fn default() -> Self {
        Self { min_nodes: 5, max_nodes: 25, max_dim: 8, concats: (0, 3), addition_prob: 0.0 }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let s = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s) * 1.5).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn random_vec(rng: &mut impl Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

/// One of Affine, ReLU∘Affine, sigmoid∘Affine, or Identity when the
/// dimensions agree.
pub fn random_function(rng: &mut impl Rng, din: usize, dout: usize) -> ArcFunction {
    let choices = if din == dout { 4 } else { 3 };
    let m = random_matrix(rng, dout, din);
    let b = random_vec(rng, dout, 0.5);
    match rng.gen_range(0..choices) {
        0 => ArcFunction::affine(m, b),
        1 => ArcFunction::relu_affine(m, b),
        2 => ArcFunction::sigmoid_affine(m, b),
        _ => ArcFunction::Identity { dim: din },
    }
}

/// A random single-input single-output DAG-DNN. Internal nodes are compute,
/// addition or concatenation nodes; all sinks feed the output node, which
/// concatenates when there is more than one.
pub fn random_dag(seed: u64, cfg: &DagConfig) -> Graph {
    let mut rng = rng(seed);
    let n = rng.gen_range(cfg.min_nodes.max(3)..=cfg.max_nodes.max(cfg.min_nodes.max(3)));
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..=cfg.max_dim);
    let mut nodes = vec![Node::new(0, NodeKind::Input, dim(&mut rng))];
    let mut edges: Vec<Edge> = Vec::new();
    let slots: Vec<usize> = (2..n - 1).collect();
    let want = rng.gen_range(cfg.concats.0..=cfg.concats.1).min(slots.len());
    let concat_at: Vec<usize> = slots.choose_multiple(&mut rng, want).copied().collect();
    let pick_parent = |rng: &mut ChaCha8Rng, k: usize| {
        if k > 3 && rng.gen_bool(0.6) {
            rng.gen_range(k - 3..k)
        } else {
            rng.gen_range(0..k)
        }
    };
    for k in 1..n - 1 {
        if concat_at.contains(&k) {
            let count = rng.gen_range(2..=3.min(k));
            let parents: Vec<usize> = (0..k).collect::<Vec<_>>().choose_multiple(&mut rng, count).copied().collect();
            let mut total = 0;
            for p in parents {
                let d = rng.gen_range(1..=cfg.max_dim.div_ceil(2));
                total += d;
                let f = random_function(&mut rng, nodes[p].dim, d);
                edges.push(Edge::new(p, k, f));
            }
            nodes.push(Node::new(k, NodeKind::Concat, total));
        } else if k >= 2 && rng.gen_bool(cfg.addition_prob) {
            let d = dim(&mut rng);
            let parents: Vec<usize> = (0..k).collect::<Vec<_>>().choose_multiple(&mut rng, 2).copied().collect();
            for p in parents {
                let f = random_function(&mut rng, nodes[p].dim, d);
                edges.push(Edge::new(p, k, f));
            }
            nodes.push(Node::new(k, NodeKind::Addition, d));
        } else {
            let p = pick_parent(&mut rng, k);
            let d = if rng.gen_bool(0.3) { nodes[p].dim } else { dim(&mut rng) };
            let f = random_function(&mut rng, nodes[p].dim, d);
            edges.push(Edge::new(p, k, f));
            nodes.push(Node::new(k, NodeKind::Compute, d));
        }
    }
    let out = n - 1;
    let sinks: Vec<usize> = (0..out).filter(|&k| !edges.iter().any(|e| e.src.0 == k)).collect();
    let mut total = 0;
    if let [s] = sinks[..] {
        total = dim(&mut rng);
        let f = random_function(&mut rng, nodes[s].dim, total);
        edges.push(Edge::new(s, out, f));
    } else {
        for s in sinks {
            let d = rng.gen_range(1..=3);
            total += d;
            let f = random_function(&mut rng, nodes[s].dim, d);
            edges.push(Edge::new(s, out, f));
        }
    }
    nodes.push(Node::new(out, NodeKind::Output, total));
    Graph::new(nodes, edges).expect("generator builds valid graphs")
}

/// Random CPWL function with at most `max_pieces` pieces.
pub fn random_cpwl(seed: u64, max_pieces: usize) -> CpwlSpec {
    let mut rng = rng(seed);
    let pieces = rng.gen_range(1..=max_pieces.max(1));
    let mut bps: Vec<f64> = (0..pieces - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let slopes = random_vec(&mut rng, bps.len() + 1, 2.0);
    let anchor = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    CpwlSpec::new(bps, slopes, anchor).expect("valid random spec")
}

/// Chain of dense layers: ReLU∘Affine between consecutive widths and an
/// Affine map into the output.
pub fn random_layered(seed: u64, widths: &[usize]) -> LevelGraph {
    assert!(widths.len() >= 2);
    let mut rng = rng(seed);
    let mut g = single_node(widths[0]);
    for (k, w) in widths.windows(2).enumerate() {
        let m = random_matrix(&mut rng, w[1], w[0]);
        let b = random_vec(&mut rng, w[1], 0.5);
        let f = if k + 2 == widths.len() { ArcFunction::affine(m, b) } else { ArcFunction::relu_affine(m, b) };
        g = apply_series(&g, f).expect("dims chain");
    }
    LevelGraph::new(g).expect("a chain is normalized")
}

/// Two single-arc networks on a shared input joined by concatenation.
pub fn fig8() -> Graph {
    let f1 = ArcFunction::relu_affine(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 1.0]]).unwrap(), vec![0.25, -0.5]);
    let f2 = ArcFunction::affine(Matrix::from_rows(&[vec![-1.0, 3.0]]).unwrap(), vec![1.0]);
    let a = apply_series(&single_node(2), f1).unwrap();
    let b = apply_series(&single_node(2), f2).unwrap();
    apply_concat(&[a, b]).unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| random_vec(rng, d, 1.0)).collect()
}

/// Targets are the network's own outputs plus small uniform noise.
fn teacher_data(rng: &mut ChaCha8Rng, lg: &LevelGraph, us: Vec<Vec<f64>>, noise: f64) -> Dataset {
    let targets = us.iter().map(|u| predict(lg, u).into_iter().map(|y| y + rng.gen_range(-noise..noise)).collect()).collect();
    Dataset::new(us, targets)
}

fn dead_bias(w: &Matrix, us: &[Vec<f64>]) -> f64 {
    let peak = us.iter().map(|u| w.mul_vec(u)[0].abs()).fold(0.0, f64::max);
    -peak - 0.5
}

fn live_unit(rng: &mut ChaCha8Rng, din: usize) -> ArcFunction {
    ArcFunction::relu_affine(random_matrix(rng, 1, din), vec![rng.gen_range(0.2..0.6)])
}

const SAMPLES: usize = 64;
const NOISE: f64 = 0.005;

/// Input (2) → four ReLU units → addition node → output. Unit 2 has its
/// bias below the negated peak pre-activation over the dataset, so it is
/// zero on every sample. Returns the network, data and the dead unit.
pub fn dead_unit_fixture(seed: u64) -> (LevelGraph, Dataset, NodeId) {
    let mut rng = rng(seed);
    let us = inputs(&mut rng, SAMPLES, 2);
    let dead = 2;
    let mut nodes = vec![Node::new(0, NodeKind::Input, 2)];
    let mut edges = Vec::new();
    for k in 1..=4 {
        nodes.push(Node::new(k, NodeKind::Compute, 1));
        let f = if k == dead {
            let w = random_matrix(&mut rng, 1, 2);
            let b = dead_bias(&w, &us);
            ArcFunction::relu_affine(w, vec![b])
        } else {
            live_unit(&mut rng, 2)
        };
        edges.push(Edge::new(0, k, f));
        edges.push(Edge::new(k, 5, ArcFunction::linear(random_matrix(&mut rng, 1, 1))));
    }
    nodes.push(Node::new(5, NodeKind::Addition, 1));
    nodes.push(Node::new(6, NodeKind::Output, 1));
    edges.push(Edge::new(5, 6, ArcFunction::affine(Matrix::identity(1), vec![0.0])));
    let lg = LevelGraph::new(Graph::new(nodes, edges).unwrap()).unwrap();
    let data = teacher_data(&mut rng, &lg, us, NOISE);
    (lg, data, NodeId(dead))
}

/// Input (2) → four ReLU units stacked into a 4-dim addition node → three
/// ReLU units → addition node → output. Unit 2 of the first layer and unit
/// 7 of the second are dead on the dataset. Returns `[first, second]`.
pub fn two_dead_unit_fixture(seed: u64) -> (LevelGraph, Dataset, [NodeId; 2]) {
    let mut rng = rng(seed);
    let us = inputs(&mut rng, SAMPLES, 2);
    let (h_dead, g_dead) = (2, 7);
    let mut nodes = vec![Node::new(0, NodeKind::Input, 2)];
    let mut edges = Vec::new();
    for k in 1..=4 {
        nodes.push(Node::new(k, NodeKind::Compute, 1));
        let f = if k == h_dead {
            let w = random_matrix(&mut rng, 1, 2);
            let b = dead_bias(&w, &us);
            ArcFunction::relu_affine(w, vec![b])
        } else {
            live_unit(&mut rng, 2)
        };
        edges.push(Edge::new(0, k, f));
        edges.push(Edge::new(k, 5, ArcFunction::RestrictedIdentity { offset: k - 1, width: 1, dim: 4 }));
    }
    nodes.push(Node::new(5, NodeKind::Addition, 4));
    // Values at node 5 for the dead-bias bound of the second layer.
    let first = LevelGraph::new(
        Graph::new(
            [nodes.clone(), vec![Node::new(6, NodeKind::Output, 4)]].concat(),
            [edges.clone(), vec![Edge::new(5, 6, ArcFunction::Identity { dim: 4 })]].concat(),
        )
        .unwrap(),
    )
    .unwrap();
    let hidden: Vec<Vec<f64>> = us.iter().map(|u| predict(&first, u)).collect();
    for k in 6..=8 {
        nodes.push(Node::new(k, NodeKind::Compute, 1));
        let f = if k == g_dead {
            let w = random_matrix(&mut rng, 1, 4);
            let b = dead_bias(&w, &hidden);
            ArcFunction::relu_affine(w, vec![b])
        } else {
            live_unit(&mut rng, 4)
        };
        edges.push(Edge::new(5, k, f));
        edges.push(Edge::new(k, 9, ArcFunction::linear(random_matrix(&mut rng, 1, 1))));
    }
    nodes.push(Node::new(9, NodeKind::Addition, 1));
    nodes.push(Node::new(10, NodeKind::Output, 1));
    edges.push(Edge::new(9, 10, ArcFunction::affine(Matrix::identity(1), vec![0.0])));
    let lg = LevelGraph::new(Graph::new(nodes, edges).unwrap()).unwrap();
    let data = teacher_data(&mut rng, &lg, us, NOISE);
    (lg, data, [NodeId(h_dead), NodeId(g_dead)])
}
