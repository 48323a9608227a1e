//! AdamW and NadamW with decoupled weight decay, global gradient-norm
//! clipping, and warmup + cosine learning-rate schedules.
//!
//! Moment estimates live in checkpoint-shaped buffers matching the parameter
//! layout; the element-wise update kernels are generic over the block's
//! scalar type. Weight decay is decoupled: it shrinks the parameters
//! directly and never flows through the moment estimates.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::store::{Checkpoint, TensorData};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("gradient checkpoint is not shape-compatible with the parameters")]
    ShapeMismatch,
    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },
    #[error("step {step} outside the schedule domain [0, {budget}]")]
    StepOutOfRange { step: u64, budget: u64 },
    #[error("invalid schedule: {reason}")]
    InvalidSchedule { reason: String },
}

impl OptimError {
    /// Non-finite errors mark divergence, a recorded outcome rather than a
    /// configuration failure.
    pub fn is_divergence(&self) -> bool {
        matches!(self, OptimError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, OptimError>;

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup to `peak_lr` over `round(warmup_frac * total_steps)` steps,
/// then cosine annealing down to `final_lr_frac * peak_lr` at the budget.
///
/// `final_lr_frac` values of 0, 0.5 and 1 select the decay-to-zero,
/// decay-to-half and constant (no annealing) variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(
        peak_lr: f64,
        warmup_frac: f64,
        final_lr_frac: f64,
        total_steps: u64,
    ) -> Result<ScheduleSpec> {
        let invalid = |reason: &str| OptimError::InvalidSchedule {
            reason: reason.to_string(),
        };
        if !(peak_lr.is_finite() && peak_lr > 0.0) {
            return Err(invalid("peak_lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(invalid("warmup_frac must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&final_lr_frac) {
            return Err(invalid("final_lr_frac must lie in [0, 1]"));
        }
        if total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        let spec = ScheduleSpec {
            peak_lr,
            warmup_frac,
            final_lr_frac,
            total_steps,
        };
        if spec.warmup_steps() >= total_steps {
            return Err(invalid("warmup covers the whole budget"));
        }
        Ok(spec)
    }

    /// Number of warmup steps, `round(warmup_frac * total_steps)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    /// Learning rate at step `t` within `[0, total_steps]`.
    ///
    /// During warmup the rate rises linearly from 0 (at t = 0) to `peak_lr`
    /// at the warmup boundary; from there the cosine takes over, continuous
    /// at the boundary and ending exactly at `final_lr_frac * peak_lr`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step: t,
                budget: self.total_steps,
            });
        }
        let warmup = self.warmup_steps();
        if t < warmup {
            return Ok(self.peak_lr * t as f64 / warmup as f64);
        }
        if t == warmup {
            return Ok(self.peak_lr);
        }
        let final_lr = self.final_lr_frac * self.peak_lr;
        let progress = (t - warmup) as f64 / (self.total_steps - warmup) as f64;
        Ok(final_lr
            + 0.5 * (self.peak_lr - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

// ---------------------------------------------------------------------------
// Gradient clipping
// ---------------------------------------------------------------------------

/// Global L2 norm across every block, accumulated in f64.
pub fn global_grad_norm(grads: &Checkpoint) -> f64 {
    let mut sum_sq = 0.0f64;
    for block in grads.blocks() {
        for x in block.data().iter_f64() {
            sum_sq += x * x;
        }
    }
    sum_sq.sqrt()
}

fn scale_block_in_place<T: Scalar>(values: &mut [T], scale: f64) -> bool {
    let mut changed = false;
    for v in values.iter_mut() {
        let scaled = T::from_f64(v.to_f64() * scale);
        if scaled.to_f64().to_bits() != v.to_f64().to_bits() {
            changed = true;
        }
        *v = scaled;
    }
    changed
}

/// Clip `grads` so the global L2 norm does not exceed `threshold`. Gradients
/// under the threshold pass through untouched; otherwise every element is
/// scaled by `threshold / norm`, re-measuring until the norm is within the
/// threshold so that clipping an already-clipped gradient is a no-op.
///
/// A non-finite norm is reported as a divergence marker.
pub fn clip_gradients(grads: &Checkpoint, threshold: f64) -> Result<Checkpoint> {
    assert!(
        threshold.is_finite() && threshold > 0.0,
        "clip threshold must be positive and finite"
    );
    let mut out = grads.clone();
    loop {
        let norm = global_grad_norm(&out);
        if !norm.is_finite() {
            return Err(OptimError::NonFinite {
                context: format!("gradient norm is {norm}"),
            });
        }
        if norm <= threshold {
            return Ok(out);
        }
        let scale = threshold / norm;
        if scale >= 1.0 {
            // Rounding left the measured norm a hair above the threshold;
            // scaling cannot improve it further.
            return Ok(out);
        }
        let mut changed = false;
        for block in out.blocks_mut() {
            changed |= match block.data_mut() {
                TensorData::F32(v) => scale_block_in_place(v, scale),
                TensorData::F64(v) => scale_block_in_place(v, scale),
            };
        }
        if !changed {
            return Ok(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    AdamW,
    NadamW,
}

impl OptimKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::AdamW => "adamw",
            OptimKind::NadamW => "nadamw",
        }
    }
}

/// Optimizer hyperparameters shared by AdamW and NadamW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl OptimConfig {
    pub fn adamw() -> OptimConfig {
        OptimConfig {
            kind: OptimKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: None,
        }
    }

    pub fn nadamw() -> OptimConfig {
        OptimConfig {
            kind: OptimKind::NadamW,
            ..OptimConfig::adamw()
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    first_moment: Checkpoint,
    second_moment: Checkpoint,
    step: u64,
}

struct StepFactors {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    lr: f64,
    bias1: f64,
    bias2: f64,
    nadam: bool,
}

fn update_block<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    f: &StepFactors,
) -> bool {
    let b1 = T::from_f64(f.beta1);
    let b2 = T::from_f64(f.beta2);
    let one = T::one();
    let eps = T::from_f64(f.eps);
    let lr = T::from_f64(f.lr);
    let lambda = T::from_f64(f.weight_decay);
    let bias1 = T::from_f64(f.bias1);
    let bias2 = T::from_f64(f.bias2);
    let mut finite = true;
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        let numerator = if f.nadam {
            b1 * m_hat + (one - b1) * g / bias1
        } else {
            m_hat
        };
        let p = params[i] - lr * (numerator / (v_hat.sqrt() + eps) + lambda * params[i]);
        finite &= p.is_finite();
        params[i] = p;
    }
    finite
}

impl Optimizer {
    /// Moments start at zero with the same block layout as `template`.
    pub fn new(config: OptimConfig, template: &Checkpoint) -> Optimizer {
        Optimizer {
            config,
            first_moment: template.zeros_like(),
            second_moment: template.zeros_like(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Checkpoint {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Checkpoint {
        &self.second_moment
    }

    /// One optimizer step at learning rate `lr`, mutating `params` and the
    /// internal moments. The step counter advances by exactly one.
    ///
    /// A non-finite updated parameter is a divergence marker; the counter
    /// does not advance on shape mismatch.
    pub fn apply_update(&mut self, params: &mut Checkpoint, grads: &Checkpoint, lr: f64) -> Result<()> {
        if !params.shape_compatible(grads) || !params.shape_compatible(&self.first_moment) {
            return Err(OptimError::ShapeMismatch);
        }
        self.step += 1;
        let factors = StepFactors {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
            lr,
            bias1: 1.0 - self.config.beta1.powi(self.step as i32),
            bias2: 1.0 - self.config.beta2.powi(self.step as i32),
            nadam: self.config.kind == OptimKind::NadamW,
        };
        let mut finite = true;
        for block in params.blocks_mut() {
            let name = block.name().to_string();
            let g = grads.get(&name).expect("shape-compatible").data();
            let m = self.first_moment.get_mut(&name).expect("layout matches");
            // Split borrows: data vectors are disjoint per block.
            match (block.data_mut(), g) {
                (TensorData::F32(p), TensorData::F32(g)) => {
                    let TensorData::F32(m) = m.data_mut() else { unreachable!() };
                    let Some(TensorData::F32(v)) = self
                        .second_moment
                        .get_mut(&name)
                        .map(|b| b.data_mut()) else { unreachable!() };
                    finite &= update_block(p, g, m, v, &factors);
                }
                (TensorData::F64(p), TensorData::F64(g)) => {
                    let TensorData::F64(m) = m.data_mut() else { unreachable!() };
                    let Some(TensorData::F64(v)) = self
                        .second_moment
                        .get_mut(&name)
                        .map(|b| b.data_mut()) else { unreachable!() };
                    finite &= update_block(p, g, m, v, &factors);
                }
                _ => return Err(OptimError::ShapeMismatch),
            }
        }
        if !finite {
            return Err(OptimError::NonFinite {
                context: format!("parameter update at optimizer step {}", self.step),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TensorBlock;

    fn params(values: &[f64]) -> Checkpoint {
        let mut c = Checkpoint::new(0);
        c.push_block(TensorBlock::from_f64("w", vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        c
    }

    fn values(c: &Checkpoint) -> Vec<f64> {
        c.get("w").unwrap().data().iter_f64().collect()
    }

    fn close(a: f64, b: f64, rtol: f64) -> bool {
        (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn schedule_hits_peak_at_warmup_boundary() {
        let s = ScheduleSpec::new(0.02, 0.1, 0.0, 1000).unwrap();
        assert_eq!(s.warmup_steps(), 100);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 0.02);
        assert!(s.lr_at(50).unwrap() > 0.0 && s.lr_at(50).unwrap() < 0.02);
    }

    #[test]
    fn schedule_decay_to_zero_ends_at_zero() {
        let s = ScheduleSpec::new(0.02, 0.1, 0.0, 1000).unwrap();
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
    }

    #[test]
    fn schedule_half_decay_midpoint() {
        // Halfway through the cosine with final fraction 0.5 the rate sits at
        // 0.75 * peak; checked against a direct evaluation of the formula.
        let peak = 0.004;
        let s = ScheduleSpec::new(peak, 0.0, 0.5, 1000).unwrap();
        let mid = s.lr_at(500).unwrap();
        let direct = 0.5 * peak
            + 0.5 * (peak - 0.5 * peak) * (1.0 + (std::f64::consts::PI * 0.5).cos());
        assert_eq!(mid, direct);
        assert!(close(mid, 0.75 * peak, 1e-12));
    }

    #[test]
    fn schedule_constant_variant_stays_at_peak() {
        let s = ScheduleSpec::new(0.01, 0.0, 1.0, 100).unwrap();
        for t in [0u64, 1, 50, 100] {
            assert_eq!(s.lr_at(t).unwrap(), 0.01);
        }
    }

    #[test]
    fn schedule_monotone_up_then_down() {
        let s = ScheduleSpec::new(0.1, 0.25, 0.1, 400).unwrap();
        let w = s.warmup_steps();
        for t in 1..=w {
            assert!(s.lr_at(t).unwrap() >= s.lr_at(t - 1).unwrap());
        }
        for t in (w + 1)..=400 {
            assert!(s.lr_at(t).unwrap() <= s.lr_at(t - 1).unwrap());
        }
    }

    #[test]
    fn schedule_domain_and_validation() {
        let s = ScheduleSpec::new(0.1, 0.1, 0.0, 100).unwrap();
        assert!(matches!(
            s.lr_at(101),
            Err(OptimError::StepOutOfRange { step: 101, .. })
        ));
        assert!(ScheduleSpec::new(0.0, 0.1, 0.0, 100).is_err());
        assert!(ScheduleSpec::new(0.1, 1.0, 0.0, 100).is_err());
        assert!(ScheduleSpec::new(0.1, 0.0, 1.5, 100).is_err());
        assert!(ScheduleSpec::new(0.1, 0.999, 0.0, 1).is_err());
    }

    #[test]
    fn clip_below_threshold_is_untouched() {
        let g = params(&[3.0, 4.0]);
        let clipped = clip_gradients(&g, 10.0).unwrap();
        assert!(clipped.bits_eq(&g));
    }

    #[test]
    fn clip_scales_to_threshold() {
        let g = params(&[3.0, 4.0]);
        let clipped = clip_gradients(&g, 1.0).unwrap();
        let got = values(&clipped);
        assert!(close(got[0], 0.6, 1e-12));
        assert!(close(got[1], 0.8, 1e-12));
        assert!(global_grad_norm(&clipped) <= 1.0 + 1e-9);
    }

    #[test]
    fn clip_norm_is_global_across_blocks() {
        let mut g = Checkpoint::new(0);
        g.push_block(TensorBlock::from_f64("a", vec![1], vec![3.0]).unwrap())
            .unwrap();
        g.push_block(TensorBlock::from_f64("b", vec![1], vec![4.0]).unwrap())
            .unwrap();
        assert!(close(global_grad_norm(&g), 5.0, 1e-15));
        let clipped = clip_gradients(&g, 1.0).unwrap();
        assert!(close(clipped.get("a").unwrap().data().get_f64(0), 0.6, 1e-12));
        assert!(close(clipped.get("b").unwrap().data().get_f64(0), 0.8, 1e-12));
    }

    #[test]
    fn clip_flags_non_finite_gradients() {
        let g = params(&[f64::NAN, 1.0]);
        let err = clip_gradients(&g, 1.0).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn clip_is_idempotent() {
        let g = params(&[0.1, -2.7, 3.33, 1e-3, 9.0]);
        let once = clip_gradients(&g, 0.7).unwrap();
        let twice = clip_gradients(&once, 0.7).unwrap();
        assert!(once.bits_eq(&twice));
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = params(&[1.0, -2.0]);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimConfig::adamw(), &p);
        for _ in 0..5 {
            opt.apply_update(&mut p, &params(&[0.0, 0.0]), 0.1).unwrap();
        }
        assert!(p.bits_eq(&before));
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn decay_only_step_shrinks_parameters() {
        let mut cfg = OptimConfig::adamw();
        cfg.weight_decay = 0.1;
        let mut p = params(&[1.0]);
        let mut opt = Optimizer::new(cfg, &p);
        opt.apply_update(&mut p, &params(&[0.0]), 0.1).unwrap();
        assert!(close(values(&p)[0], 0.99, 1e-15));
        // Moments stay exactly zero under zero gradients.
        assert_eq!(values(opt.first_moment()), vec![0.0]);
        assert_eq!(values(opt.second_moment()), vec![0.0]);
    }

    #[test]
    fn adamw_single_step_matches_recurrence() {
        // m = 0.1, v = 0.001, both bias corrections cancel, so the update is
        // lr / (1 + eps).
        let mut p = params(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::adamw(), &p);
        opt.apply_update(&mut p, &params(&[1.0]), 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!(close(values(&p)[0], expected, 1e-15));
    }

    #[test]
    fn nadamw_with_zero_beta1_equals_adamw_bitwise() {
        let mut cfg_a = OptimConfig::adamw();
        cfg_a.beta1 = 0.0;
        let mut cfg_n = OptimConfig::nadamw();
        cfg_n.beta1 = 0.0;

        let mut pa = params(&[1.0, -0.5, 2.25]);
        let mut pn = pa.clone();
        let mut oa = Optimizer::new(cfg_a, &pa);
        let mut on = Optimizer::new(cfg_n, &pn);
        for t in 1..=10 {
            let g = params(&[0.3 * t as f64, -1.0, 0.125]);
            oa.apply_update(&mut pa, &g, 0.01).unwrap();
            on.apply_update(&mut pn, &g, 0.01).unwrap();
            assert!(pa.bits_eq(&pn), "diverged at step {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_error_and_does_not_advance() {
        let mut p = params(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimConfig::adamw(), &p);
        let bad = params(&[1.0]);
        assert!(matches!(
            opt.apply_update(&mut p, &bad, 0.1),
            Err(OptimError::ShapeMismatch)
        ));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn non_finite_update_is_divergence() {
        let mut p = params(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::adamw(), &p);
        let err = opt
            .apply_update(&mut p, &params(&[f64::INFINITY]), 0.1)
            .unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn f32_blocks_update_too() {
        let mut p = Checkpoint::new(0);
        p.push_block(TensorBlock::from_f32("w", vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Checkpoint::new(0);
        g.push_block(TensorBlock::from_f32("w", vec![2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let mut opt = Optimizer::new(OptimConfig::adamw(), &p);
        opt.apply_update(&mut p, &g, 0.1).unwrap();
        let got: Vec<f64> = p.get("w").unwrap().data().iter_f64().collect();
        assert!(got[0] < 1.0 && got[1] > 2.0);
    }
}
