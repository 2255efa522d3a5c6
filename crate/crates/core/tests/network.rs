mod common;

use dagdnn::graph::{reachability, Edge, Node, NetworkSpec};
use dagdnn::passes::{assign_levels, check_oplus_invariants, normalize, normalize_spec, run_pass, Pass};
use dagdnn::synth::{random_dag, DagConfig};
use dagdnn::{ArcFunction, Graph, GraphError, NodeId, NodeKind};
use proptest::prelude::*;

fn input(g: &Graph, seed: u64) -> Vec<f64> {
    (0..g.dim(g.input())).map(|k| ((seed as f64 + 1.0) * 0.37 * (k as f64 + 1.0)).sin()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn json_round_trip(seed in 0u64..10_000) {
        let g = random_dag(seed, &DagConfig::default());
        let text = serde_json::to_string(&g.to_spec()).unwrap();
        let back = Graph::from_spec(serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn normalization_preserves_the_function(seed in 0u64..10_000) {
        let g = random_dag(seed, &DagConfig { concats: (0, 4), ..Default::default() });
        let lg = normalize(&g).unwrap();
        let x = input(&g, seed);
        prop_assert!(common::rel_close(&common::interpret(lg.graph(), &x), &common::interpret(&g, &x), 1e-12));
        prop_assert!(check_oplus_invariants(lg.graph()).is_ok());
        let lm = lg.levels();
        for e in lg.graph().edges() {
            prop_assert_eq!(lm.level(e.dst), lm.level(e.src) + 1);
        }
        prop_assert_eq!(lm.nodes_at(0), &[lg.graph().input()]);
        prop_assert_eq!(lm.nodes_at(lm.depth()), &[lg.graph().output()]);
    }

    #[test]
    fn levels_are_longest_paths(seed in 0u64..10_000) {
        let g = random_dag(seed, &DagConfig::default());
        let lm = assign_levels(&g);
        for e in g.edges() {
            prop_assert!(lm.level(e.dst) > lm.level(e.src));
        }
        for n in g.nodes().iter().filter(|n| n.id != g.input()) {
            let best = g.parents(n.id).iter().map(|p| lm.level(*p) + 1).max().unwrap();
            prop_assert_eq!(lm.level(n.id), best);
        }
    }

    #[test]
    fn reachability_matches_dfs(seed in 0u64..10_000) {
        let g = random_dag(seed, &DagConfig::default());
        let r = reachability(&g);
        let closure = common::dfs_closure(&g);
        for a in g.nodes() {
            for b in g.nodes() {
                prop_assert_eq!(r.get(a.id, b.id), closure.contains(&(a.id, b.id)));
            }
        }
    }
}

#[test]
fn cycle_is_rejected() {
    let nodes = vec![Node::new(0, NodeKind::Input, 1), Node::new(1, NodeKind::Compute, 1), Node::new(2, NodeKind::Addition, 1), Node::new(3, NodeKind::Output, 1)];
    let id = || ArcFunction::Identity { dim: 1 };
    let edges = vec![Edge::new(0, 2, id()), Edge::new(2, 1, id()), Edge::new(1, 2, id()), Edge::new(1, 3, id())];
    assert!(matches!(Graph::new(nodes, edges), Err(GraphError::CycleDetected(_))));
}

#[test]
fn multi_terminal_spec_is_stacked() {
    let nodes = vec![
        Node::new(0, NodeKind::Input, 1),
        Node::new(1, NodeKind::Input, 1),
        Node::new(2, NodeKind::Compute, 1),
        Node::new(3, NodeKind::Output, 1),
        Node::new(4, NodeKind::Output, 1),
    ];
    let s = |c: f64| ArcFunction::scale(1, c);
    let mut spec = NetworkSpec::new(nodes, vec![Edge::new(0, 2, s(2.0)), Edge::new(1, 2, s(3.0)), Edge::new(2, 3, s(1.0)), Edge::new(1, 4, s(-1.0))]);
    spec.nodes[2].kind = NodeKind::Addition;
    let lg = normalize_spec(&spec).unwrap();
    let y = common::interpret(lg.graph(), &[1.0, 10.0]);
    assert_eq!(y, vec![32.0, -10.0]);
    let io = run_pass(&spec, Pass::Io).unwrap();
    assert_eq!(io.dim(io.input()), 2);
    assert_eq!(io.dim(io.output()), 2);
    assert!(io.contains(NodeId(2)));
}
