//! Zero-set detection, structural pruning, rewinding and ticket checks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{init_state, lift_state, EngineError};
use crate::graph::{Graph, GraphError, NetworkSpec, NodeId, NodeKind, SCHEMA};
use crate::lifting::factorize_levels;
use crate::linalg::max_abs;
use crate::passes::{normalize, LevelGraph, NormalizeError};
use crate::train::{loss, Dataset, ParamSet, Provenance, TrainError, TrainRun};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("level {n} has no successor level (depth {depth})")]
    LevelOutOfRange { n: usize, depth: usize },
    #[error("zero set is empty")]
    EmptyZ,
    #[error("pruning would disconnect the output node")]
    WouldDisconnectOutput,
    #[error("run has no checkpoint at step {0}")]
    NoCheckpoint(usize),
    #[error("no scanned level has a nonempty zero set")]
    ConditionsUnsatisfied,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
}

impl From<GraphError> for PruneError {
    fn from(e: GraphError) -> Self {
        PruneError::Normalize(e.into())
    }
}

/// Level-`(n+1)` nodes whose values vanish on every training input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZReport {
    /// Source level `n`; listed nodes sit at level `n+1`.
    pub level: usize,
    pub nodes: Vec<NodeId>,
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    /// Set when `tol > 0`: removal then only approximately preserves the loss.
    pub approximate: bool,
}

impl ZReport {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Lifts every training input to level `n+1` and lists the level-`(n+1)`
/// nodes whose blocks stay within `tol` in max-norm.
pub fn detect_z(lg: &LevelGraph, data: &Dataset, n: usize, tol: f64) -> Result<ZReport, PruneError> {
    let depth = lg.depth();
    if n >= depth {
        return Err(PruneError::LevelOutOfRange { n, depth });
    }
    let fact = factorize_levels(lg).map_err(EngineError::from)?;
    let row = lg.levels().nodes_at(n + 1);
    let mut peak = vec![0.0f64; row.len()];
    for u in &data.inputs {
        let mut s = init_state(&fact, u)?;
        for b in &fact.matrices[..=n] {
            s = lift_state(&s, b)?;
        }
        for (p, id) in peak.iter_mut().zip(row) {
            let m = max_abs(s.block(*id).expect("listed"));
            *p = if m.is_nan() { f64::INFINITY } else { p.max(m) };
        }
    }
    let nodes = row.iter().zip(&peak).filter(|(_, &p)| p <= tol).map(|(id, _)| *id).collect();
    Ok(ZReport { level: n, nodes, tol, step: None, approximate: tol > 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub graph: LevelGraph,
    pub removed_nodes: Vec<NodeId>,
    pub removed_arcs: Vec<(NodeId, NodeId)>,
    /// Every arc leaving a removed node maps zero to zero, so surviving
    /// nodes see exactly the same sums.
    pub zero_preserving: bool,
}

/// Removes the nodes of `z`, nodes left without inputs, and nodes that no
/// longer reach the output; the result is renormalized.
pub fn prune(lg: &LevelGraph, z: &ZReport) -> Result<Pruned, PruneError> {
    if z.is_empty() {
        return Err(PruneError::EmptyZ);
    }
    let g = lg.graph();
    let mut removed: BTreeSet<NodeId> = z.nodes.iter().copied().collect();
    let mut zero_preserving = true;
    // Downstream: a non-addition node fed by a removed node loses its only
    // input; an addition node is dropped once every input is gone.
    for &id in g.topological_order() {
        if removed.contains(&id) || id == g.input() {
            continue;
        }
        let parents = g.parents(id);
        let lost = parents.iter().filter(|p| removed.contains(p)).count();
        let dead = match g.kind(id) {
            NodeKind::Addition => lost == parents.len(),
            _ => lost > 0,
        };
        if dead {
            removed.insert(id);
        }
    }
    for e in g.edges() {
        if removed.contains(&e.src) && !e.func.maps_zero_to_zero() {
            zero_preserving = false;
        }
    }
    // Upstream: drop nodes that no longer reach the output.
    loop {
        let alive = |id: &NodeId| !removed.contains(id);
        let stuck: Vec<NodeId> = g
            .nodes()
            .iter()
            .map(|n| n.id)
            .filter(|id| alive(id) && *id != g.output())
            .filter(|id| !g.children(*id).iter().any(alive))
            .collect();
        if stuck.is_empty() {
            break;
        }
        removed.extend(stuck);
    }
    if removed.contains(&g.output()) || removed.contains(&g.input()) {
        return Err(PruneError::WouldDisconnectOutput);
    }
    let nodes = g.nodes().iter().filter(|n| !removed.contains(&n.id)).cloned().collect();
    let (kept, dropped): (Vec<_>, Vec<_>) =
        g.edges().iter().cloned().partition(|e| !removed.contains(&e.src) && !removed.contains(&e.dst));
    let g1 = Graph::new(nodes, kept)?;
    Ok(Pruned {
        graph: normalize(&g1)?,
        removed_nodes: removed.into_iter().collect(),
        removed_arcs: dropped.iter().map(|e| (e.src, e.dst)).collect(),
        zero_preserving,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewindOptions {
    pub tol: f64,
    /// Only scan this source level.
    pub level: Option<usize>,
    /// Prune every nonempty level instead of the first one found.
    pub scan_all: bool,
    /// Rescan the pruned network until no zero set remains.
    pub rescan: bool,
}

impl Default for RewindOptions {
    fn default() -> Self {
        Self { tol: 0.0, level: None, scan_all: false, rescan: false }
    }
}

/// A pruned network initialized from a checkpoint of its parent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub schema: String,
    pub kind: String,
    pub graph: NetworkSpec,
    pub param_count: usize,
    pub z_reports: Vec<ZReport>,
    pub removed_nodes: Vec<NodeId>,
    pub zero_preserving: bool,
    pub parent_loss: f64,
    pub parent_fidelity: f64,
    pub loss: f64,
    pub fidelity: f64,
    /// `L(θ₁(t)) ≤ L(θ₀(t))`.
    pub condition_holds: bool,
    pub provenance: Provenance,
}

fn scan_once(lg: &LevelGraph, data: &Dataset, opts: &RewindOptions) -> Result<Option<(Pruned, Vec<ZReport>)>, PruneError> {
    let levels: Vec<usize> = match opts.level {
        Some(n) => vec![n],
        None => (0..lg.depth()).rev().collect(),
    };
    let mut current: Option<(Pruned, Vec<ZReport>)> = None;
    for n in levels {
        let base = current.as_ref().map(|(p, _)| &p.graph).unwrap_or(lg);
        if n >= base.depth() {
            continue;
        }
        let z = detect_z(base, data, n, opts.tol)?;
        if z.is_empty() {
            continue;
        }
        let p = match prune(base, &z) {
            Ok(p) => p,
            Err(PruneError::WouldDisconnectOutput) => continue,
            Err(e) => return Err(e),
        };
        current = Some(match current {
            None => (p, vec![z]),
            Some((prev, mut zs)) => {
                zs.push(z);
                let mut removed: BTreeSet<NodeId> = prev.removed_nodes.into_iter().collect();
                removed.extend(p.removed_nodes);
                let mut arcs = prev.removed_arcs;
                arcs.extend(p.removed_arcs);
                let merged = Pruned {
                    graph: p.graph,
                    removed_nodes: removed.into_iter().collect(),
                    removed_arcs: arcs,
                    zero_preserving: prev.zero_preserving && p.zero_preserving,
                };
                (merged, zs)
            }
        });
        if !opts.scan_all {
            break;
        }
    }
    Ok(current)
}

/// Detects and prunes at checkpoint `t` of `run`, returning the pruned
/// network carrying the rewound parameters `θ₁(t)`.
pub fn rewind_prune(run: &TrainRun, t: usize, opts: &RewindOptions) -> Result<Ticket, PruneError> {
    let cp = run.checkpoint(t).ok_or(PruneError::NoCheckpoint(t))?;
    let lg = run.level_graph(&cp.params)?;
    let mut found = scan_once(&lg, &run.data, opts)?.ok_or(PruneError::ConditionsUnsatisfied)?;
    while opts.rescan {
        match scan_once(&found.0.graph, &run.data, opts)? {
            None => break,
            Some((next, zs)) => {
                let mut removed: BTreeSet<NodeId> = found.0.removed_nodes.iter().copied().collect();
                removed.extend(next.removed_nodes);
                found.1.extend(zs);
                found.0 = Pruned {
                    graph: next.graph,
                    removed_nodes: removed.into_iter().collect(),
                    removed_arcs: [found.0.removed_arcs, next.removed_arcs].concat(),
                    zero_preserving: found.0.zero_preserving && next.zero_preserving,
                };
            }
        }
    }
    let (pruned, mut z_reports) = found;
    for z in &mut z_reports {
        z.step = Some(t);
    }
    let lambda = run.config.lambda;
    let parent = loss(&lg, &run.data, lambda)?;
    let child = loss(&pruned.graph, &run.data, lambda)?;
    Ok(Ticket {
        schema: SCHEMA.into(),
        kind: "ticket".into(),
        graph: pruned.graph.graph().to_spec(),
        param_count: pruned.graph.graph().param_count(),
        z_reports,
        removed_nodes: pruned.removed_nodes.clone(),
        zero_preserving: pruned.zero_preserving,
        parent_loss: parent.loss,
        parent_fidelity: parent.fidelity,
        loss: child.loss,
        fidelity: child.fidelity,
        condition_holds: child.loss <= parent.loss,
        provenance: Provenance {
            rewind_step: t,
            parent_loss_at_rewind: parent.loss,
            parent_fidelity_at_rewind: parent.fidelity,
            parent_best_loss: run.best_loss,
            parent_best_fidelity: run.best_fidelity,
            parent_param_count: run.param_count,
            parent_iterations: run.iterations,
            pruned_nodes: pruned.removed_nodes,
        },
    })
}

impl Ticket {
    pub fn level_graph(&self) -> Result<LevelGraph, PruneError> {
        Ok(LevelGraph::new(Graph::from_spec(self.graph.clone())?)?)
    }

    pub fn params(&self) -> Result<ParamSet, PruneError> {
        Ok(ParamSet::from_graph(self.level_graph()?.graph()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketReport {
    /// `false` when nothing was pruned; no checks are made then.
    pub applicable: bool,
    pub lambda: f64,
    pub best_fidelity: f64,
    pub r0: f64,
    pub r1: f64,
    pub c: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Compares a pruned run against its parent. The pruned run must carry
/// provenance from [`rewind_prune`].
pub fn verify_ticket(run0: &TrainRun, run1: &TrainRun) -> TicketReport {
    let lambda = run0.config.lambda;
    let eps = run0.best_fidelity;
    let r0 = lambda * run0.param_count as f64;
    let r1 = lambda * run1.param_count as f64;
    let applicable = run1.provenance.as_ref().is_some_and(|p| !p.pruned_nodes.is_empty());
    let c = if eps > 0.0 {
        (r0 - r1) / eps
    } else if r0 > r1 {
        f64::INFINITY
    } else {
        0.0
    };
    if !applicable {
        return TicketReport { applicable, lambda, best_fidelity: eps, r0, r1, c, checks: Vec::new(), passed: false };
    }
    let mk = |name: &str, lhs: f64, rhs: f64| Check { name: name.into(), lhs, rhs, passed: lhs <= rhs };
    let checks = vec![
        mk("rewound loss <= best parent loss", run1.loss_trace[0], run0.best_loss),
        mk("final fidelity <= (c+1) * best parent fidelity", run1.final_fidelity(), eps + (r0 - r1)),
        mk("iterations <= parent iterations", run1.iterations as f64, run0.iterations as f64),
    ];
    let passed = checks.iter().all(|c| c.passed);
    TicketReport { applicable, lambda, best_fidelity: eps, r0, r1, c, checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{dead_unit_fixture, two_dead_unit_fixture};
    use crate::train::{predict, train, TrainConfig};

    #[test]
    fn dead_unit_is_detected_and_pruned_exactly() {
        let (lg, data, dead) = dead_unit_fixture(7);
        let z = detect_z(&lg, &data, 0, 0.0).unwrap();
        assert_eq!(z.nodes, vec![dead]);
        let p = prune(&lg, &z).unwrap();
        assert!(p.zero_preserving);
        assert!(p.graph.graph().param_count() < lg.graph().param_count());
        for u in &data.inputs {
            let (a, b) = (predict(&lg, u), predict(&p.graph, u));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn infinite_tolerance_lists_everything() {
        let (lg, data, _) = dead_unit_fixture(1);
        let z = detect_z(&lg, &data, 0, f64::INFINITY).unwrap();
        assert_eq!(z.nodes, lg.levels().nodes_at(1));
        assert!(z.approximate);
        assert!(matches!(prune(&lg, &z), Err(PruneError::WouldDisconnectOutput)));
    }

    #[test]
    fn missing_checkpoint() {
        let (lg, data, _) = dead_unit_fixture(2);
        let run = train(&lg, &data, &TrainConfig { steps: 3, checkpoint_every: 2, ..Default::default() }).unwrap();
        assert!(matches!(rewind_prune(&run, 1, &RewindOptions::default()), Err(PruneError::NoCheckpoint(1))));
        assert!(rewind_prune(&run, 0, &RewindOptions::default()).is_ok());
    }

    #[test]
    fn unpruned_run_is_not_applicable() {
        let (lg, data, _) = dead_unit_fixture(3);
        let run = train(&lg, &data, &TrainConfig { steps: 2, ..Default::default() }).unwrap();
        let r = verify_ticket(&run, &run);
        assert!(!r.applicable && r.checks.is_empty());
    }

    #[test]
    fn two_dead_units_scan_from_the_top() {
        let (lg, data, dead) = two_dead_unit_fixture(5);
        let run = train(&lg, &data, &TrainConfig { steps: 2, ..Default::default() }).unwrap();
        let t = rewind_prune(&run, 0, &RewindOptions::default()).unwrap();
        assert_eq!(t.z_reports[0].nodes, vec![dead[1]]);
        let all = rewind_prune(&run, 0, &RewindOptions { scan_all: true, ..Default::default() }).unwrap();
        assert!(all.removed_nodes.contains(&dead[0]) && all.removed_nodes.contains(&dead[1]));
        assert!(all.param_count < t.param_count);
    }
}
