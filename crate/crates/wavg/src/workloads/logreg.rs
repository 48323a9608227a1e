//! Binary logistic regression on two Gaussian blobs.

use rand::Rng;

use crate::store::{Checkpoint, TensorBlock};

use super::{
    normal_vec, stream_rng, Batch, Direction, Result, SyntheticSpec, Workload, STREAM_BATCH_BASE,
    STREAM_DATA, STREAM_HELDOUT, STREAM_INIT,
};

/// Two-class Gaussian blobs with a linear-logit model (weights + bias).
/// The loss is mean cross-entropy with analytic gradients; validation is
/// cross-entropy on a fixed held-out set.
///
/// Class centers sit at +-1/sqrt(dims) per coordinate (unit separation) and
/// `noise_scale` is the blob standard deviation.
pub struct LogRegWorkload {
    spec: SyntheticSpec,
    template: Checkpoint,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    valid_x: Vec<f64>,
    valid_y: Vec<f64>,
}

fn make_blobs(spec: &SyntheticSpec, n: usize, stream: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(spec.seed, stream);
    let center = 1.0 / (spec.dims as f64).sqrt();
    let mut xs = Vec::with_capacity(n * spec.dims);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        for z in normal_vec(&mut rng, spec.dims, spec.noise_scale) {
            xs.push(sign * center + z);
        }
        ys.push(label);
    }
    (xs, ys)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl LogRegWorkload {
    pub fn new(spec: &SyntheticSpec) -> Result<LogRegWorkload> {
        spec.validate(2, "logreg")?;
        let (train_x, train_y) = make_blobs(spec, spec.n_train, STREAM_DATA);
        let (valid_x, valid_y) = make_blobs(spec, spec.n_valid, STREAM_HELDOUT);
        let mut template = Checkpoint::new(0);
        template
            .push_block(TensorBlock::from_f64("w", vec![spec.dims], vec![0.0; spec.dims]).unwrap())
            .unwrap();
        template
            .push_block(TensorBlock::from_f64("b", vec![], vec![0.0]).unwrap())
            .unwrap();
        Ok(LogRegWorkload {
            spec: *spec,
            template,
            train_x,
            train_y,
            valid_x,
            valid_y,
        })
    }

    fn logit(&self, params: &Checkpoint, x: &[f64]) -> f64 {
        let w = params.get("w").expect("logreg params have w").data();
        let b = params.get("b").expect("logreg params have b").data();
        let mut z = b.get_f64(0);
        for (i, &xi) in x.iter().enumerate() {
            z += w.get_f64(i) * xi;
        }
        z
    }

    fn mean_bce(&self, params: &Checkpoint, xs: &[f64], ys: &[f64]) -> f64 {
        let dims = self.spec.dims;
        let mut loss = 0.0;
        for (row, &y) in ys.iter().enumerate() {
            let z = self.logit(params, &xs[row * dims..(row + 1) * dims]);
            loss += bce_from_logit(z, y);
        }
        loss / ys.len() as f64
    }
}

impl Workload for LogRegWorkload {
    fn name(&self) -> &'static str {
        "logreg"
    }

    fn param_template(&self) -> &Checkpoint {
        &self.template
    }

    fn init_params(&self, seed: u64) -> Checkpoint {
        let mut rng = stream_rng(seed, STREAM_INIT);
        let scale = 0.1 / (self.spec.dims as f64).sqrt();
        let w = normal_vec(&mut rng, self.spec.dims, scale);
        let mut params = Checkpoint::new(0);
        params
            .push_block(TensorBlock::from_f64("w", vec![self.spec.dims], w).unwrap())
            .unwrap();
        params
            .push_block(TensorBlock::from_f64("b", vec![], vec![0.0]).unwrap())
            .unwrap();
        params
    }

    fn train_batch(&self, seed: u64, step: u64) -> Batch {
        let mut rng = stream_rng(seed, STREAM_BATCH_BASE + step);
        let dims = self.spec.dims;
        let mut inputs = Vec::with_capacity(self.spec.batch_size * dims);
        let mut targets = Vec::with_capacity(self.spec.batch_size);
        for _ in 0..self.spec.batch_size {
            let row = rng.random_range(0..self.spec.n_train);
            inputs.extend_from_slice(&self.train_x[row * dims..(row + 1) * dims]);
            targets.push(self.train_y[row]);
        }
        Batch {
            inputs,
            targets,
            count: self.spec.batch_size,
        }
    }

    fn loss_and_grad(&self, params: &Checkpoint, batch: &Batch) -> (f64, Checkpoint) {
        let dims = self.spec.dims;
        let count = batch.count as f64;
        let mut loss = 0.0;
        let mut grad_w = vec![0.0f64; dims];
        let mut grad_b = 0.0f64;
        for (row, &y) in batch.targets.iter().enumerate() {
            let x = &batch.inputs[row * dims..(row + 1) * dims];
            let z = self.logit(params, x);
            loss += bce_from_logit(z, y);
            let dz = sigmoid(z) - y;
            for i in 0..dims {
                grad_w[i] += dz * x[i] / count;
            }
            grad_b += dz / count;
        }
        let mut g = Checkpoint::new(params.step());
        g.push_block(TensorBlock::from_f64("w", vec![dims], grad_w).unwrap())
            .unwrap();
        g.push_block(TensorBlock::from_f64("b", vec![], vec![grad_b]).unwrap())
            .unwrap();
        (loss / count, g)
    }

    fn validate(&self, params: &Checkpoint) -> f64 {
        self.mean_bce(params, &self.valid_x, &self.valid_y)
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }
}
