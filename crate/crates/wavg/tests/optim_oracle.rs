//! Optimizer correctness against an independent scalar oracle.
//!
//! The oracle below re-implements the update recurrences as straight-line
//! scalar f64 code, sharing nothing with the block kernels. Trajectory
//! values are additionally pinned to constants computed once with 50-digit
//! arithmetic from the same recurrences.

mod common;

use common::{assert_rel_close, vec_ckpt};
use proptest::prelude::*;

use wavg::optim::{clip_gradients, OptimConfig, OptimKind, Optimizer};

#[derive(Clone, Copy)]
struct OracleHyper {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    lr: f64,
}

const DEFAULT_HYPER: OracleHyper = OracleHyper {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
    weight_decay: 0.0,
    lr: 0.01,
};

/// Scalar reference implementation of one parameter under AdamW / NadamW.
struct ScalarOracle {
    h: OracleHyper,
    nadam: bool,
    p: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarOracle {
    fn new(p0: f64, h: OracleHyper, nadam: bool) -> ScalarOracle {
        ScalarOracle {
            h,
            nadam,
            p: p0,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    fn step(&mut self, g: f64) -> f64 {
        let h = self.h;
        self.t += 1;
        self.m = h.beta1 * self.m + (1.0 - h.beta1) * g;
        self.v = h.beta2 * self.v + (1.0 - h.beta2) * g * g;
        let bias1 = 1.0 - h.beta1.powi(self.t);
        let bias2 = 1.0 - h.beta2.powi(self.t);
        let m_hat = self.m / bias1;
        let v_hat = self.v / bias2;
        let numerator = if self.nadam {
            h.beta1 * m_hat + (1.0 - h.beta1) * g / bias1
        } else {
            m_hat
        };
        self.p -= h.lr * (numerator / (v_hat.sqrt() + h.eps) + h.weight_decay * self.p);
        self.p
    }
}

/// Drive the block implementation over a single scalar parameter.
fn impl_trajectory(kind: OptimKind, p0: f64, h: OracleHyper, grads: &[f64]) -> Vec<f64> {
    let config = OptimConfig {
        kind,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
        weight_decay: h.weight_decay,
        clip: None,
    };
    let mut params = vec_ckpt(0, &[p0]);
    let mut opt = Optimizer::new(config, &params);
    grads
        .iter()
        .map(|&g| {
            opt.apply_update(&mut params, &vec_ckpt(0, &[g]), h.lr).unwrap();
            params.get("w").unwrap().data().get_f64(0)
        })
        .collect()
}

/// Gradient sequence g_t = t/4 - 1 (exactly representable), t = 1..=n.
fn ramp_gradients(n: usize) -> Vec<f64> {
    (1..=n).map(|t| t as f64 / 4.0 - 1.0).collect()
}

// Reference values computed at 50-digit precision from the recurrences.
const ADAMW_UNIT_ONE_STEP: f64 = 0.90000000099999999;
const ADAMW_RAMP_T1: f64 = 1.009999999866666668444;
const ADAMW_RAMP_T10: f64 = 1.021712466667486583281;
const ADAMW_RAMP_WD_T10: f64 = 1.020684924220789156943;
const NADAMW_RAMP_T1: f64 = 1.018999999746666670044;
const NADAMW_RAMP_T10: f64 = 1.019915147547740968649;
const NADAMW_RAMP_WD_T10: f64 = 1.018880330714316921131;

#[test]
fn adamw_single_step_unit_gradient() {
    let h = OracleHyper {
        lr: 0.1,
        ..DEFAULT_HYPER
    };
    let mut oracle = ScalarOracle::new(1.0, h, false);
    let expected = oracle.step(1.0);
    assert_rel_close(expected, ADAMW_UNIT_ONE_STEP, 1e-13, "oracle vs pinned");
    let got = impl_trajectory(OptimKind::AdamW, 1.0, h, &[1.0]);
    assert_rel_close(got[0], expected, 1e-12, "impl vs oracle");
    assert_rel_close(got[0], ADAMW_UNIT_ONE_STEP, 1e-12, "impl vs pinned");
}

#[test]
fn adamw_trajectories_match_oracle_to_1e12() {
    for (wd, t1_pin, t10_pin) in [
        (0.0, Some(ADAMW_RAMP_T1), ADAMW_RAMP_T10),
        (0.01, None, ADAMW_RAMP_WD_T10),
    ] {
        let h = OracleHyper {
            weight_decay: wd,
            ..DEFAULT_HYPER
        };
        let grads = ramp_gradients(10);
        let mut oracle = ScalarOracle::new(1.0, h, false);
        let oracle_traj: Vec<f64> = grads.iter().map(|&g| oracle.step(g)).collect();
        let impl_traj = impl_trajectory(OptimKind::AdamW, 1.0, h, &grads);
        for (step, (a, b)) in impl_traj.iter().zip(&oracle_traj).enumerate() {
            assert_rel_close(*a, *b, 1e-12, &format!("adamw wd={wd} step {}", step + 1));
        }
        if let Some(pin) = t1_pin {
            assert_rel_close(oracle_traj[0], pin, 1e-13, "oracle t1 vs pinned");
        }
        assert_rel_close(oracle_traj[9], t10_pin, 1e-13, "oracle t10 vs pinned");
        assert_rel_close(impl_traj[9], t10_pin, 1e-12, "impl t10 vs pinned");
    }
}

#[test]
fn nadamw_trajectories_match_oracle_to_1e12() {
    for (wd, t1_pin, t10_pin) in [
        (0.0, Some(NADAMW_RAMP_T1), NADAMW_RAMP_T10),
        (0.01, None, NADAMW_RAMP_WD_T10),
    ] {
        let h = OracleHyper {
            weight_decay: wd,
            ..DEFAULT_HYPER
        };
        let grads = ramp_gradients(10);
        let mut oracle = ScalarOracle::new(1.0, h, true);
        let oracle_traj: Vec<f64> = grads.iter().map(|&g| oracle.step(g)).collect();
        let impl_traj = impl_trajectory(OptimKind::NadamW, 1.0, h, &grads);
        for (step, (a, b)) in impl_traj.iter().zip(&oracle_traj).enumerate() {
            assert_rel_close(*a, *b, 1e-12, &format!("nadamw wd={wd} step {}", step + 1));
        }
        if let Some(pin) = t1_pin {
            assert_rel_close(oracle_traj[0], pin, 1e-13, "oracle t1 vs pinned");
        }
        assert_rel_close(oracle_traj[9], t10_pin, 1e-13, "oracle t10 vs pinned");
        assert_rel_close(impl_traj[9], t10_pin, 1e-12, "impl t10 vs pinned");
    }
}

#[test]
fn decoupled_decay_contracts_geometrically_and_exactly() {
    // Dyadic hyperparameters keep every operation exact in binary floating
    // point: lr * wd = 0.125, so p_k = p_0 * 0.875^k bitwise.
    let h = OracleHyper {
        beta1: 0.5,
        beta2: 0.75,
        eps: 0.0078125,
        weight_decay: 0.5,
        lr: 0.25,
    };
    let config = OptimConfig {
        kind: OptimKind::AdamW,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
        weight_decay: h.weight_decay,
        clip: None,
    };
    let mut params = vec_ckpt(0, &[1.0, -4.0]);
    let mut opt = Optimizer::new(config, &params);
    let mut expected = [1.0f64, -4.0];
    for step in 1..=10 {
        opt.apply_update(&mut params, &vec_ckpt(0, &[0.0, 0.0]), h.lr).unwrap();
        for e in expected.iter_mut() {
            *e *= 1.0 - h.lr * h.weight_decay;
        }
        for i in 0..2 {
            let got = params.get("w").unwrap().data().get_f64(i);
            assert_eq!(
                got.to_bits(),
                expected[i].to_bits(),
                "decay drifted at step {step} index {i}: {got} vs {}",
                expected[i]
            );
        }
        // Moments remain exactly zero under zero gradients.
        assert_eq!(opt.first_moment().get("w").unwrap().data().get_f64(0), 0.0);
        assert_eq!(opt.second_moment().get("w").unwrap().data().get_f64(0), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clipping_is_idempotent_bitwise(
        values in prop::collection::vec(-1.0e8f64..1.0e8, 1..20),
        threshold in 1.0e-3f64..1.0e3,
    ) {
        let g = vec_ckpt(0, &values);
        let once = clip_gradients(&g, threshold).unwrap();
        let twice = clip_gradients(&once, threshold).unwrap();
        prop_assert!(once.bits_eq(&twice));
    }

    #[test]
    fn second_moment_never_goes_negative(
        grads in prop::collection::vec(-1.0e3f64..1.0e3, 1..30),
    ) {
        let mut params = vec_ckpt(0, &[0.5]);
        let mut opt = Optimizer::new(OptimConfig::adamw(), &params);
        for g in grads {
            opt.apply_update(&mut params, &vec_ckpt(0, &[g]), 1e-3).unwrap();
            prop_assert!(opt.second_moment().get("w").unwrap().data().get_f64(0) >= 0.0);
        }
    }
}
