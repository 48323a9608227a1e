//! Noisy quadratic objective, the classical testbed for iterate averaging.

use crate::store::{Checkpoint, TensorBlock};

use super::{
    normal_vec, stream_rng, Batch, Direction, Result, SyntheticSpec, Workload, STREAM_BATCH_BASE,
    STREAM_INIT,
};

/// Objective `0.5 * x' H x` with a fixed diagonal `H` whose eigenvalues are
/// log-spaced in [1e-2, 1]. The stochastic gradient is `H x + noise` with
/// Gaussian noise drawn from a counter-based generator, so the sample at
/// step `t` is a pure function of (seed, t). Validation returns the exact
/// noiseless loss.
pub struct QuadraticWorkload {
    spec: SyntheticSpec,
    curvature: Vec<f64>,
    template: Checkpoint,
}

impl QuadraticWorkload {
    pub fn new(spec: &SyntheticSpec) -> Result<QuadraticWorkload> {
        spec.validate(1, "quadratic")?;
        let curvature = log_spaced_curvature(spec.dims);
        let mut template = Checkpoint::new(0);
        template
            .push_block(TensorBlock::from_f64("x", vec![spec.dims], vec![0.0; spec.dims]).unwrap())
            .unwrap();
        Ok(QuadraticWorkload {
            spec: *spec,
            curvature,
            template,
        })
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    fn point<'a>(&self, params: &'a Checkpoint) -> &'a crate::store::TensorData {
        params.get("x").expect("quadratic params have block x").data()
    }
}

/// Eigenvalues 1 down to 1e-2, log-spaced; a single dimension keeps the
/// unit eigenvalue.
fn log_spaced_curvature(dims: usize) -> Vec<f64> {
    if dims == 1 {
        return vec![1.0];
    }
    (0..dims)
        .map(|i| 10f64.powf(-2.0 * i as f64 / (dims - 1) as f64))
        .collect()
}

impl Workload for QuadraticWorkload {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn param_template(&self) -> &Checkpoint {
        &self.template
    }

    fn init_params(&self, seed: u64) -> Checkpoint {
        let mut rng = stream_rng(seed, STREAM_INIT);
        let x = normal_vec(&mut rng, self.spec.dims, 1.0);
        let mut params = Checkpoint::new(0);
        params
            .push_block(TensorBlock::from_f64("x", vec![self.spec.dims], x).unwrap())
            .unwrap();
        params
    }

    /// The "batch" is the gradient-noise draw for this step.
    fn train_batch(&self, seed: u64, step: u64) -> Batch {
        let mut rng = stream_rng(seed, STREAM_BATCH_BASE + step);
        Batch {
            inputs: normal_vec(&mut rng, self.spec.dims, self.spec.noise_scale),
            targets: Vec::new(),
            count: 1,
        }
    }

    /// Sampled loss `0.5 x'Hx + noise . x`, whose gradient is `Hx + noise`.
    fn loss_and_grad(&self, params: &Checkpoint, batch: &Batch) -> (f64, Checkpoint) {
        let x = self.point(params);
        let mut loss = 0.0;
        let mut grad = vec![0.0f64; self.spec.dims];
        for i in 0..self.spec.dims {
            let xi = x.get_f64(i);
            let noise = batch.inputs[i];
            loss += 0.5 * self.curvature[i] * xi * xi + noise * xi;
            grad[i] = self.curvature[i] * xi + noise;
        }
        let mut g = Checkpoint::new(params.step());
        g.push_block(TensorBlock::from_f64("x", vec![self.spec.dims], grad).unwrap())
            .unwrap();
        (loss, g)
    }

    /// Exact loss `0.5 x'Hx`.
    fn validate(&self, params: &Checkpoint) -> f64 {
        let x = self.point(params);
        let mut loss = 0.0;
        for i in 0..self.spec.dims {
            let xi = x.get_f64(i);
            loss += 0.5 * self.curvature[i] * xi * xi;
        }
        loss
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }
}
