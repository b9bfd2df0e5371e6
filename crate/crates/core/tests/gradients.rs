use std::time::{Duration, Instant};

use mgan_core::gradsuite::{run_gradient_suite, CASES, DEFAULT_TRIALS, GRADCHECK_TOLERANCE};
use mgan_core::tensor::{finite_diff_check, Tensor};

#[test]
fn every_op_and_loss_matches_central_differences() {
    let start = Instant::now();
    let entries = run_gradient_suite(DEFAULT_TRIALS, 2024).unwrap();
    assert_eq!(entries.len(), CASES.len());
    for e in &entries {
        println!("{:<20} trials {:>3}  max rel err {:.2e}", e.name, e.trials, e.max_rel_error);
        assert!(e.trials >= 20);
        assert!(e.passed && e.max_rel_error < GRADCHECK_TOLERANCE, "{} failed: {:e}", e.name, e.max_rel_error);
    }
    assert!(start.elapsed() < Duration::from_secs(120));
}

#[test]
fn suite_is_reproducible() {
    assert_eq!(run_gradient_suite(2, 9).unwrap(), run_gradient_suite(2, 9).unwrap());
}

#[test]
fn forward_values_and_gradients_are_bit_identical_across_runs() {
    let x = Tensor::from_fn(&[2, 6, 6, 2], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
    let w = Tensor::from_fn(&[3, 3, 2, 3], |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
    let b = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
    let run = || {
        let mut g = mgan_core::tensor::Graph::new();
        let (vx, vw, vb) = (g.param(&x), g.param(&w), g.param(&b));
        let y = g.conv2d(vx, vw, vb, 2, 1).unwrap();
        let y = g.sigmoid(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.value(y).to_vec(), g.grad(vx).unwrap().to_vec(), g.grad(vw).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn a_broken_gradient_is_detected() {
    let x = Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5);
    let report = finite_diff_check(
        |g, v| {
            let s = g.sum(v[0]);
            let value = g.scalar(s)?;
            g.reduce(v[0], value, vec![1.1; 4])
        },
        &[x],
        1e-6,
        GRADCHECK_TOLERANCE,
    )
    .unwrap();
    assert!(!report.passed());
}
