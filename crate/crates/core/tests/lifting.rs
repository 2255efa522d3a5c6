mod common;

use dagdnn::algebra::{eval_expr, Evaluator};
use dagdnn::engine::{forward, is_complete_subgraph, subgraph_eval, Engine};
use dagdnn::lifting::{allpair_product, allpair_upto, companion, factorize_levels, inverse_b, Factorization};
use dagdnn::passes::normalize;
use dagdnn::synth::{self, random_dag, DagConfig};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn each_lifting_matrix_inverts(seed in 0u64..10_000) {
        let lg = normalize(&random_dag(seed, &DagConfig::default())).unwrap();
        let f = factorize_levels(&lg).unwrap();
        let mut rng = synth::rng(seed);
        for b in &f.matrices {
            prop_assert!(b.matrix.is_lower_triangular());
            let x: Vec<Vec<f64>> = f.labels().iter().map(|&(_, d)| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let back = inverse_b(b).apply(&b.apply(&x).unwrap()).unwrap();
            prop_assert!(common::max_abs_diff(&back.concat(), &x.concat()) <= 1e-12);
        }
    }

    #[test]
    fn partial_products_vanish_above_their_level(seed in 0u64..10_000) {
        let lg = normalize(&random_dag(seed, &DagConfig::default())).unwrap();
        let f = factorize_levels(&lg).unwrap();
        for n in 0..=f.depth() {
            let c = allpair_upto(&f, n).unwrap();
            for (i, j, _) in c.nonzeros() {
                prop_assert!(i == j || f.level_of(i).unwrap() <= n);
            }
        }
    }

    #[test]
    fn complete_cells_are_subgraph_functions(seed in 0u64..10_000) {
        let lg = normalize(&random_dag(seed, &DagConfig { max_nodes: 14, ..Default::default() })).unwrap();
        let g = lg.graph();
        let c = allpair_product(&factorize_levels(&lg).unwrap()).unwrap();
        let mut rng = synth::rng(seed);
        for &(j, dj) in c.col_labels() {
            let z: Vec<f64> = (0..dj).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ev = Evaluator::new(&z);
            for &(i, _) in c.row_labels() {
                if c.get(i, j).is_zero() || !is_complete_subgraph(g, i, j) {
                    continue;
                }
                let a = ev.eval(&c.get(i, j)).unwrap();
                let b = subgraph_eval(g, i, j, &z).unwrap();
                prop_assert!(common::rel_close(&a, &b, 1e-12), "cell ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn factorization_json_round_trip(seed in 0u64..10_000) {
        let lg = normalize(&random_dag(seed, &DagConfig { max_nodes: 10, ..Default::default() })).unwrap();
        let f = factorize_levels(&lg).unwrap();
        let back: Factorization = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        let x = vec![0.5; lg.graph().dim(lg.graph().input())];
        let c0 = allpair_product(&f).unwrap();
        let c1 = allpair_product(&back).unwrap();
        let (o, i) = (f.output, f.input);
        prop_assert_eq!(eval_expr(&c0.get(o, i), &x).unwrap(), eval_expr(&c1.get(o, i), &x).unwrap());
    }
}

#[test]
fn companion_networks_cancel() {
    for seed in 0..20 {
        let g = random_dag(seed, &DagConfig { max_nodes: 10, ..Default::default() });
        let plus = normalize(&companion(&g, 1.0).unwrap()).unwrap();
        let minus = normalize(&companion(&g, -1.0).unwrap()).unwrap();
        let d = plus.graph().dim(plus.graph().input());
        let x: Vec<f64> = (0..d).map(|k| (k as f64 * 0.7).cos()).collect();
        let y = Engine::from_levels(plus).unwrap().forward(&x).unwrap();
        let back = Engine::from_levels(minus).unwrap().forward(&y).unwrap();
        assert!(common::max_abs_diff(&back, &x) <= 1e-12);
    }
}

#[test]
fn trace_counts_arcs() {
    let lg = normalize(&synth::fig8()).unwrap();
    let (y, trace) = forward(lg.graph(), &[0.5, -1.0]).unwrap();
    assert_eq!(trace.arc_evals, lg.graph().edges().len());
    assert_eq!(trace.states.len(), lg.depth() + 1);
    assert_eq!(y, common::interpret(&synth::fig8(), &[0.5, -1.0]));
}
