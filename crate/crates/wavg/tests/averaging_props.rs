//! Property tests for the averaging buffers: offline replay reproduces the
//! online buffers bitwise, means and EMA states stay inside the convex hull
//! of their inputs, and the LAWA mean ignores the order of queue contents.

mod common;

use proptest::prelude::*;

use wavg::averaging::{offline_average, Averager, AveragingConfig, LawaBuffer};
use wavg::scalar::Dtype;
use wavg::store::{checkpoint_file_name, save_checkpoint, Checkpoint, TensorBlock, TensorData};

/// A synthetic trajectory: deterministic pseudo-random values per step, in
/// either storage dtype, over a couple of blocks.
fn trajectory_checkpoint(step: u64, case: u64, dtype: Dtype, blocks: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::new(step);
    for b in 0..blocks {
        let len = 1 + (b * 3 + case as usize) % 5;
        let values: Vec<f64> = (0..len)
            .map(|i| {
                // Cheap splitmix-style hash, mapped into [-100, 100].
                let mut z = step
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(case << 32)
                    .wrapping_add((b * 31 + i) as u64);
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                ((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 200.0
            })
            .collect();
        let data = TensorData::from_f64_values(values, dtype);
        ckpt.push_block(TensorBlock::new(format!("block{b}"), vec![len], data).unwrap())
            .unwrap();
    }
    ckpt
}

fn online_offline_case(
    case: u64,
    dtype: Dtype,
    cfg: &AveragingConfig,
    save_interval: u64,
    total_steps: u64,
) {
    let dir = tempfile::tempdir().unwrap();
    let mut online = Averager::from_config(cfg);
    for step in 0..=total_steps {
        let ckpt = trajectory_checkpoint(step, case, dtype, 2);
        online.offer(&ckpt).unwrap();
        if step % save_interval == 0 {
            save_checkpoint(&ckpt, &dir.path().join(checkpoint_file_name(step))).unwrap();
        }
    }
    let expected = online.current().unwrap().unwrap();
    let at_step = (total_steps / save_interval) * save_interval;
    let offline = offline_average(dir.path(), cfg, at_step).unwrap();
    assert!(
        offline.bits_eq(&expected),
        "offline replay diverged from the online buffer (case {case}, {cfg:?})"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn offline_replay_equals_online_buffer(
        case in 0u64..1_000_000,
        use_f32 in any::<bool>(),
        save_interval in 1u64..4,
        nu_mult in 1u64..4,
        window in 1usize..6,
        decay in 0.0f64..=1.0,
        lawa in any::<bool>(),
        total in 20u64..200,
    ) {
        let dtype = if use_f32 { Dtype::F32 } else { Dtype::F64 };
        let nu = save_interval * nu_mult;
        let cfg = if lawa {
            AveragingConfig::Lawa { sample_every: nu, window }
        } else {
            AveragingConfig::Ema { sample_every: nu, decay }
        };
        online_offline_case(case, dtype, &cfg, save_interval, total);
    }

    #[test]
    fn lawa_mean_is_inside_hull_and_order_free(
        rows in prop::collection::vec(
            prop::collection::vec(-1.0e6f64..1.0e6, 4),
            1..8,
        ),
    ) {
        let mut buf = LawaBuffer::new(rows.len(), 1);
        for (step, row) in rows.iter().enumerate() {
            buf.offer(&common::vec_ckpt(step as u64, row)).unwrap();
        }
        let avg = buf.average().unwrap();
        let avg_values: Vec<f64> = avg.get("w").unwrap().data().iter_f64().collect();

        // Element-wise hull bound, up to one unit of rounding slack.
        for i in 0..4 {
            let lo = rows.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
            let slack = 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0);
            prop_assert!(avg_values[i] >= lo - slack && avg_values[i] <= hi + slack,
                "mean {} outside [{lo}, {hi}]", avg_values[i]);
        }

        // Reversed offer order: same contents, same mean up to rounding.
        let mut reversed = LawaBuffer::new(rows.len(), 1);
        for (step, row) in rows.iter().rev().enumerate() {
            reversed.offer(&common::vec_ckpt(step as u64, row)).unwrap();
        }
        let rev_values: Vec<f64> = reversed
            .average()
            .unwrap()
            .get("w")
            .unwrap()
            .data()
            .iter_f64()
            .collect();
        for i in 0..4 {
            // Reordering a rounded sum moves it by at most n*eps of the
            // largest summand.
            let magnitude = rows.iter().map(|r| r[i].abs()).fold(1.0, f64::max);
            let slack = rows.len() as f64 * f64::EPSILON * magnitude;
            prop_assert!((avg_values[i] - rev_values[i]).abs() <= slack,
                "order sensitivity beyond rounding: {} vs {}", avg_values[i], rev_values[i]);
        }
    }

    #[test]
    fn ema_state_stays_in_convex_hull(
        rows in prop::collection::vec(
            prop::collection::vec(-1.0e6f64..1.0e6, 3),
            2..10,
        ),
        decay in 0.0f64..=1.0,
        nu in 1u64..3,
    ) {
        let mut buf = wavg::EmaBuffer::new(decay, nu);
        for (step, row) in rows.iter().enumerate() {
            buf.offer(&common::vec_ckpt(step as u64, row)).unwrap();
        }
        let state: Vec<f64> = buf.read().unwrap().get("w").unwrap().data().iter_f64().collect();
        for i in 0..3 {
            let lo = rows.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
            let slack = 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0);
            prop_assert!(state[i] >= lo - slack && state[i] <= hi + slack);
        }
    }
}

#[test]
fn scheme_none_reproduces_raw_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    for step in 0..=10u64 {
        let ckpt = trajectory_checkpoint(step, 42, Dtype::F64, 2);
        save_checkpoint(&ckpt, &dir.path().join(checkpoint_file_name(step))).unwrap();
    }
    for step in [0u64, 3, 7, 10] {
        let got = offline_average(dir.path(), &AveragingConfig::None, step).unwrap();
        assert!(got.bits_eq(&trajectory_checkpoint(step, 42, Dtype::F64, 2)));
    }
}
