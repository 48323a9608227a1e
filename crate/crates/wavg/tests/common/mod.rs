//! Helpers shared by the integration tests.
#![allow(dead_code)]

use wavg::store::{Checkpoint, TensorBlock};
use wavg::workloads::{Batch, Workload};

pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn assert_rel_close(a: f64, b: f64, rtol: f64, what: &str) {
    assert!(
        rel_close(a, b, rtol),
        "{what}: {a} vs {b} (rel err {})",
        ((a - b) / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)).abs()
    );
}

pub fn vec_ckpt(step: u64, values: &[f64]) -> Checkpoint {
    let mut c = Checkpoint::new(step);
    c.push_block(TensorBlock::from_f64("w", vec![values.len()], values.to_vec()).unwrap())
        .unwrap();
    c
}

/// Central-difference gradient check of `loss_and_grad` against its own loss,
/// exhaustively over every coordinate. Returns the worst relative error.
pub fn finite_diff_check(
    workload: &dyn Workload,
    params: &Checkpoint,
    batch: &Batch,
    rtol: f64,
) -> f64 {
    let (_, analytic) = workload.loss_and_grad(params, batch);
    let mut worst = 0.0f64;
    let names: Vec<String> = params.blocks().map(|b| b.name().to_string()).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let x = params.get(&name).unwrap().data().get_f64(i);
            let h = f64::EPSILON.cbrt() * x.abs().max(1.0);

            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut().set_f64(i, x + h);
            let (loss_plus, _) = workload.loss_and_grad(&plus, batch);

            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut().set_f64(i, x - h);
            let (loss_minus, _) = workload.loss_and_grad(&minus, batch);

            let span = (x + h) - (x - h);
            let fd = (loss_plus - loss_minus) / span;
            let g = analytic.get(&name).unwrap().data().get_f64(i);
            let denom = g.abs().max(fd.abs()).max(1e-4);
            let rel = (g - fd).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel <= rtol,
                "gradient mismatch on {}[{i}] of {}: analytic {g}, finite-diff {fd} (rel {rel})",
                name,
                workload.name(),
            );
        }
    }
    worst
}
