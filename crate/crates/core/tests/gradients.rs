use std::time::{Duration, Instant};

use sarnas_core::gradcheck::{composition_cases, primitive_cases, run_suite, TOLERANCE, TOLERANCE_TRAIN_BN};
use sarnas_core::OpKind;

#[test]
fn full_suite_within_tolerance_and_budget() {
    let start = Instant::now();
    let reports = run_suite(0).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(elapsed < Duration::from_secs(120), "suite took {elapsed:?}");
    for r in &reports {
        assert!(r.tolerance == TOLERANCE || r.tolerance == TOLERANCE_TRAIN_BN);
        assert!(r.coordinates > 0, "{}", r.name);
    }
}

#[test]
fn suite_covers_every_operator_in_both_modes() {
    let names: Vec<String> = composition_cases(0).unwrap().into_iter().map(|c| c.name).collect();
    for kind in OpKind::ALL {
        for stride in [1, 2] {
            for mode in ["train", "eval"] {
                let want = format!("{kind} stride {stride} {mode}");
                assert!(names.contains(&want), "missing {want}");
            }
        }
    }
    let prims: Vec<String> = primitive_cases(0).into_iter().map(|c| c.name).collect();
    for p in ["batchnorm train", "batchnorm eval", "cross_entropy", "softmax_row", "weighted_sum", "shift_crop"] {
        assert!(prims.iter().any(|n| n == p), "missing {p}");
    }
}

#[test]
fn train_mode_bn_cases_get_the_looser_tolerance() {
    for c in composition_cases(1).unwrap() {
        if c.name.starts_with("Conv3") && c.name.ends_with("train") {
            assert_eq!(c.tolerance, TOLERANCE_TRAIN_BN);
        }
        if c.name.ends_with("eval") || c.name.starts_with("MaxPool3") {
            assert_eq!(c.tolerance, TOLERANCE, "{}", c.name);
        }
    }
}
