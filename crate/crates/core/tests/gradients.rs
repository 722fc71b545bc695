//! Finite-difference checks of every differentiable primitive and of the
//! complete training objectives.

use sgan_core::gradcheck::{run_suite, SUITE_TOLERANCE};

#[test]
fn every_case_in_the_suite_is_within_tolerance() {
    let cases = run_suite().unwrap();
    for c in &cases {
        assert!(c.report.checked > 0, "{}: nothing checked", c.name);
        assert!(
            c.report.max_rel_error < SUITE_TOLERANCE,
            "{}: max relative error {} at {:?}",
            c.name,
            c.report.max_rel_error,
            c.report.worst
        );
    }
}

#[test]
fn suite_covers_every_primitive() {
    let names: Vec<String> = run_suite().unwrap().into_iter().map(|c| c.name).collect();
    for p in [
        "conv2d",
        "max_pool2d",
        "global_avg_pool",
        "matmul",
        "transpose",
        "reshape",
        "add",
        "sub",
        "mul",
        "scale",
        "scalar_mul",
        "relu",
        "sigmoid",
        "softmax",
        "log",
        "clamp_min",
        "sum",
        "mean",
        "masked_row_normalize",
    ] {
        assert!(names.iter().any(|n| n.starts_with(p)), "no check for {p}");
    }
}

#[test]
fn objectives_check_most_parameters() {
    for c in run_suite().unwrap().iter().filter(|c| c.name.contains("objective")) {
        assert!(c.report.checked > c.inputs / 2, "{}: only {} of {} checked", c.name, c.report.checked, c.inputs);
    }
}
