mod common;

use dagdnn::function::ArcFunction;
use dagdnn::graph::{apply_series, single_node};
use dagdnn::passes::LevelGraph;
use dagdnn::prune::{rewind_prune, verify_ticket, RewindOptions};
use dagdnn::synth::{self, dead_unit_fixture, random_layered};
use dagdnn::train::{loss, train, Dataset, TrainConfig, TrainError};
use dagdnn::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn regression(seed: u64, n: usize, d: usize) -> (LevelGraph, Dataset) {
    let mut rng = synth::rng(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x.iter().sum::<f64>() * 0.7 - 0.2 + rng.gen_range(-0.3..0.3)]).collect();
    let g = apply_series(&single_node(d), ArcFunction::affine(Matrix::zeros(1, d), vec![0.0])).unwrap();
    (LevelGraph::new(g).unwrap(), Dataset::new(xs, ys))
}

#[test]
fn converges_to_least_squares() {
    let (lg, data) = regression(3, 40, 3);
    let ys: Vec<f64> = data.targets.iter().map(|v| v[0]).collect();
    let (w, b) = common::least_squares(&data.inputs, &ys);
    let best = common::mse(&data.inputs, &ys, &w, b);
    let run = train(&lg, &data, &TrainConfig { steps: 2000, lr: 0.5, lambda: 0.0, ..Default::default() }).unwrap();
    assert!((run.final_fidelity() - best).abs() <= 1e-6, "{} vs {best}", run.final_fidelity());
}

#[test]
fn perfect_fit_has_zero_loss() {
    let g = apply_series(&single_node(1), ArcFunction::affine(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![1.0])).unwrap();
    let lg = LevelGraph::new(g).unwrap();
    let data = Dataset::new(vec![vec![0.0], vec![2.0]], vec![vec![1.0], vec![5.0]]);
    assert_eq!(loss(&lg, &data, 0.0).unwrap().loss, 0.0);
}

#[test]
fn non_finite_start_diverges() {
    let (lg, mut data) = regression(1, 4, 2);
    data.targets[0][0] = f64::NAN;
    assert!(matches!(train(&lg, &data, &TrainConfig { steps: 2, ..Default::default() }), Err(TrainError::DivergedLoss(0))));
}

#[test]
fn zero_lambda_ticket_has_zero_c() {
    let (lg, data, _) = dead_unit_fixture(4);
    let cfg = TrainConfig { steps: 30, lambda: 0.0, ..Default::default() };
    let run0 = train(&lg, &data, &cfg).unwrap();
    let ticket = rewind_prune(&run0, 0, &RewindOptions::default()).unwrap();
    let mut run1 = train(&ticket.level_graph().unwrap(), &data, &cfg).unwrap();
    run1.provenance = Some(ticket.provenance);
    let r = verify_ticket(&run0, &run1);
    assert!(r.applicable);
    assert_eq!(r.c, 0.0);
    assert!(r.checks[1].rhs == r.best_fidelity);
}

#[test]
fn rewinding_to_the_last_step() {
    let (lg, data, dead) = dead_unit_fixture(5);
    let run0 = train(&lg, &data, &TrainConfig { steps: 40, checkpoint_every: 20, ..Default::default() }).unwrap();
    let ticket = rewind_prune(&run0, 40, &RewindOptions::default()).unwrap();
    assert!(ticket.removed_nodes.contains(&dead));
    assert!(ticket.condition_holds);
    assert!((ticket.fidelity - run0.final_fidelity()).abs() <= 1e-12);
}

#[test]
fn run_json_round_trip() {
    let (lg, data, _) = dead_unit_fixture(6);
    let run = train(&lg, &data, &TrainConfig { steps: 5, ..Default::default() }).unwrap();
    let text = serde_json::to_string(&run).unwrap();
    assert_eq!(serde_json::from_str::<dagdnn::train::TrainRun>(&text).unwrap(), run);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_never_increases(seed in 0u64..1000) {
        let lg = random_layered(seed, &[2, 3, 3, 1]);
        let mut rng = synth::rng(seed + 1);
        let xs: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let ys = xs.iter().map(|x| vec![(x[0] * 3.0).sin() + x[1]]).collect();
        let run = train(&lg, &Dataset::new(xs, ys), &TrainConfig { steps: 40, lr: 0.3, ..Default::default() }).unwrap();
        prop_assert!(run.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(run.best_loss <= run.loss_trace[0]);
    }
}
