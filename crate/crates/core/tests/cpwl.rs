mod common;

use dagdnn::cpwl::{decompose, CpwlError, CpwlSpec};
use proptest::prelude::*;

proptest! {
    #[test]
    fn decomposition_matches_pieces(
        mut bps in prop::collection::vec(-4.0f64..4.0, 0..6),
        slopes_seed in prop::collection::vec(-3.0f64..3.0, 7),
        ax in -1.0f64..1.0,
        ay in -1.0f64..1.0,
        x in -6.0f64..6.0,
    ) {
        bps.sort_by(f64::total_cmp);
        bps.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let slopes = slopes_seed[..bps.len() + 1].to_vec();
        let spec = CpwlSpec::new(bps.clone(), slopes.clone(), (ax, ay)).unwrap();
        let want = common::cpwl_direct(&bps, &slopes, (ax, ay), x);
        prop_assert!((decompose(&spec).eval(x) - want).abs() <= 1e-12);
        prop_assert!((spec.eval(x) - want).abs() <= 1e-12);
    }
}

#[test]
fn rejects_bad_specs() {
    assert!(matches!(CpwlSpec::new(vec![1.0, 0.0], vec![0.0; 3], (0.0, 0.0)), Err(CpwlError::NonIncreasingBreakpoints(_))));
    assert!(matches!(CpwlSpec::new(vec![0.0], vec![1.0], (0.0, 0.0)), Err(CpwlError::SlopeCount { .. })));
}
