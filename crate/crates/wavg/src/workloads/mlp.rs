//! One-hidden-layer tanh MLP regression against a fixed random teacher.

use rand::Rng;

use crate::store::{Checkpoint, TensorBlock, TensorData};

use super::{
    normal_vec, stream_rng, Batch, Direction, Result, SyntheticSpec, Workload, WorkloadError,
    STREAM_BATCH_BASE, STREAM_DATA, STREAM_HELDOUT, STREAM_INIT, STREAM_TEACHER,
};

/// Scalar regression `y = w2 . tanh(W1 x + b1) + b2` trained by manual
/// backprop on data labeled by a frozen teacher network of the same
/// architecture, plus Gaussian label noise of scale `noise_scale`.
/// Validation is mean squared error on a fixed held-out set.
pub struct MlpWorkload {
    spec: SyntheticSpec,
    hidden: usize,
    template: Checkpoint,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    valid_x: Vec<f64>,
    valid_y: Vec<f64>,
}

struct Layers<'a> {
    w1: &'a TensorData,
    b1: &'a TensorData,
    w2: &'a TensorData,
    b2: &'a TensorData,
}

fn layers(params: &Checkpoint) -> Layers<'_> {
    Layers {
        w1: params.get("w1").expect("mlp params have w1").data(),
        b1: params.get("b1").expect("mlp params have b1").data(),
        w2: params.get("w2").expect("mlp params have w2").data(),
        b2: params.get("b2").expect("mlp params have b2").data(),
    }
}

impl MlpWorkload {
    pub fn new(spec: &SyntheticSpec, hidden: usize) -> Result<MlpWorkload> {
        spec.validate(1, "mlp")?;
        if hidden == 0 {
            return Err(WorkloadError::InvalidSpec {
                reason: "mlp requires hidden >= 1".into(),
            });
        }
        let teacher = teacher_params(spec, hidden);

        let gen_split = |n: usize, stream: u64| {
            let mut rng = stream_rng(spec.seed, stream);
            let mut xs = Vec::with_capacity(n * spec.dims);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x = normal_vec(&mut rng, spec.dims, 1.0);
                let noise: f64 = spec.noise_scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
                ys.push(forward(&layers(&teacher), &x, hidden).1 + noise);
                xs.extend_from_slice(&x);
            }
            (xs, ys)
        };
        let (train_x, train_y) = gen_split(spec.n_train, STREAM_DATA);
        let (valid_x, valid_y) = gen_split(spec.n_valid, STREAM_HELDOUT);

        let mut template = Checkpoint::new(0);
        for (name, shape) in [
            ("w1", vec![hidden, spec.dims]),
            ("b1", vec![hidden]),
            ("w2", vec![hidden]),
            ("b2", vec![]),
        ] {
            let len: usize = shape.iter().product();
            template
                .push_block(TensorBlock::from_f64(name, shape, vec![0.0; len]).unwrap())
                .unwrap();
        }
        Ok(MlpWorkload {
            spec: *spec,
            hidden,
            template,
            train_x,
            train_y,
            valid_x,
            valid_y,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn mse(&self, params: &Checkpoint, xs: &[f64], ys: &[f64]) -> f64 {
        let l = layers(params);
        let dims = self.spec.dims;
        let mut loss = 0.0;
        for (row, &y) in ys.iter().enumerate() {
            let (_, yhat) = forward(&l, &xs[row * dims..(row + 1) * dims], self.hidden);
            let e = yhat - y;
            loss += e * e;
        }
        loss / ys.len() as f64
    }
}

/// Hidden activations and prediction for one input row.
fn forward(l: &Layers<'_>, x: &[f64], hidden: usize) -> (Vec<f64>, f64) {
    let dims = x.len();
    let mut h = vec![0.0f64; hidden];
    for j in 0..hidden {
        let mut pre = l.b1.get_f64(j);
        for (d, &xd) in x.iter().enumerate().take(dims) {
            pre += l.w1.get_f64(j * dims + d) * xd;
        }
        h[j] = pre.tanh();
    }
    let mut yhat = l.b2.get_f64(0);
    for j in 0..hidden {
        yhat += l.w2.get_f64(j) * h[j];
    }
    (h, yhat)
}

fn teacher_params(spec: &SyntheticSpec, hidden: usize) -> Checkpoint {
    let mut rng = stream_rng(spec.seed, STREAM_TEACHER);
    build_params(
        spec.dims,
        hidden,
        normal_vec(&mut rng, hidden * spec.dims, 1.0 / (spec.dims as f64).sqrt()),
        normal_vec(&mut rng, hidden, 0.5),
        normal_vec(&mut rng, hidden, 1.0 / (hidden as f64).sqrt()),
        normal_vec(&mut rng, 1, 0.1),
    )
}

fn build_params(
    dims: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
) -> Checkpoint {
    let mut c = Checkpoint::new(0);
    c.push_block(TensorBlock::from_f64("w1", vec![hidden, dims], w1).unwrap())
        .unwrap();
    c.push_block(TensorBlock::from_f64("b1", vec![hidden], b1).unwrap())
        .unwrap();
    c.push_block(TensorBlock::from_f64("w2", vec![hidden], w2).unwrap())
        .unwrap();
    c.push_block(TensorBlock::from_f64("b2", vec![], b2).unwrap())
        .unwrap();
    c
}

impl Workload for MlpWorkload {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn param_template(&self) -> &Checkpoint {
        &self.template
    }

    fn init_params(&self, seed: u64) -> Checkpoint {
        let mut rng = stream_rng(seed, STREAM_INIT);
        build_params(
            self.spec.dims,
            self.hidden,
            normal_vec(
                &mut rng,
                self.hidden * self.spec.dims,
                1.0 / (self.spec.dims as f64).sqrt(),
            ),
            vec![0.0; self.hidden],
            normal_vec(&mut rng, self.hidden, 1.0 / (self.hidden as f64).sqrt()),
            vec![0.0],
        )
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
        let l = layers(params);
        let dims = self.spec.dims;
        let hidden = self.hidden;
        let count = batch.count as f64;

        let mut loss = 0.0;
        let mut gw1 = vec![0.0f64; hidden * dims];
        let mut gb1 = vec![0.0f64; hidden];
        let mut gw2 = vec![0.0f64; hidden];
        let mut gb2 = 0.0f64;

        for (row, &y) in batch.targets.iter().enumerate() {
            let x = &batch.inputs[row * dims..(row + 1) * dims];
            let (h, yhat) = forward(&l, x, hidden);
            let e = yhat - y;
            loss += e * e / count;
            let dyhat = 2.0 * e / count;
            gb2 += dyhat;
            for j in 0..hidden {
                gw2[j] += dyhat * h[j];
                let dpre = dyhat * l.w2.get_f64(j) * (1.0 - h[j] * h[j]);
                gb1[j] += dpre;
                for (d, &xd) in x.iter().enumerate() {
                    gw1[j * dims + d] += dpre * xd;
                }
            }
        }
        let g = build_params(dims, hidden, gw1, gb1, gw2, vec![gb2]);
        (loss, g)
    }

    fn validate(&self, params: &Checkpoint) -> f64 {
        self.mse(params, &self.valid_x, &self.valid_y)
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }
}
