//! Classification probe on frozen encoder rates: a
//! four-layer ReLU perceptron trained with plain SGD.

use rand_distr::{Distribution, StandardNormal};

use crate::data::batches;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::sgd_step;
use crate::rng::{derive_indexed, derive_seed, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::reconstruct;

/// Hidden widths between the latent input and the 10 classes.
pub const HIDDEN: [usize; 3] = [512, 256, 128];
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Mean training cross-entropy of the last epoch.
    pub final_loss: f64,
}

/// Posterior rates `[n, latent]` of the frozen encoder.
pub fn encode_rates(model: &mut Model, images: &Tensor, batch_size: usize, seed: u64) -> Result<Tensor> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let n = images.shape()[0];
    let d = model.config().latent_dim;
    let mut rates = Vec::with_capacity(n * d);
    for (b, start) in (0..n).step_by(batch_size).enumerate() {
        let x = images.slice_rows(start, (start + batch_size).min(n));
        let r = reconstruct(model, &x, derive_indexed(seed, "recon", b as u64))?;
        rates.extend_from_slice(r.posterior.rates());
    }
    Tensor::new([n, d], rates)
}

struct Mlp {
    /// Alternating weight `[in, out]` and bias `[out]`.
    params: Vec<Tensor>,
}

impl Mlp {
    fn new(input: usize, seed: u64) -> Self {
        let mut rng = stream(seed);
        let mut widths = vec![input];
        widths.extend(HIDDEN);
        widths.push(CLASSES);
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt() as f32;
            params.push(Tensor::from_fn([w[0], w[1]], |_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * std
            }));
            params.push(Tensor::zeros([w[1]]));
        }
        Mlp { params }
    }

    /// Logits of `x`; returns the tape, the parameter vars and the logits var.
    fn forward(&self, x: &Tensor, trainable: bool) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<_> = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let mut h = tape.constant(x.clone());
        let layers = vars.len() / 2;
        for l in 0..layers {
            h = tape.matmul(h, vars[2 * l])?;
            h = tape.add_bias(h, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok((tape, vars, h))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (tape, _, logits) = self.forward(x, false)?;
        Ok(tape
            .value(logits)
            .data()
            .chunks(CLASSES)
            .map(|row| row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best }))
            .collect())
    }
}

fn check_labels(x: &Tensor, y: &[u8], what: &str) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != y.len() {
        return Err(Error::Validation(format!("{what}: {} labels for features of shape {:?}", y.len(), x.shape())));
    }
    if let Some(bad) = y.iter().find(|&&c| c as usize >= CLASSES) {
        return Err(Error::Validation(format!("{what}: label {bad} outside 0..{CLASSES}")));
    }
    Ok(())
}

/// Trains the probe on `(train_x, train_y)` and returns its accuracy on the
/// test split.
pub fn probe_train_eval(train_x: &Tensor, train_y: &[u8], test_x: &Tensor, test_y: &[u8], cfg: ProbeConfig) -> Result<ProbeReport> {
    check_labels(train_x, train_y, "probe training set")?;
    check_labels(test_x, test_y, "probe test set")?;
    if train_x.shape()[1] != test_x.shape()[1] {
        return Err(Error::dim("probe", format!("train width {} vs test width {}", train_x.shape()[1], test_x.shape()[1])));
    }
    let mut mlp = Mlp::new(train_x.shape()[1], derive_seed(cfg.seed, "probe-init"));
    let d = train_x.shape()[1];
    let mut final_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let order = batches(train_y.len(), cfg.batch_size, derive_indexed(cfg.seed, "probe-order", epoch as u64))?;
        let mut total = 0.0;
        for idx in &order {
            let mut rows = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                rows.extend_from_slice(&train_x.data()[i * d..(i + 1) * d]);
            }
            let x = Tensor::new([idx.len(), d], rows)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_y[i] as usize).collect();
            let (mut tape, vars, logits) = mlp.forward(&x, true)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            total += tape.value(loss).item() as f64 * idx.len() as f64;
            tape.backward(loss)?;
            for (p, &v) in mlp.params.iter_mut().zip(&vars) {
                if let Some(g) = tape.grad(v) {
                    sgd_step(p.data_mut(), g.data(), cfg.lr)?;
                }
            }
        }
        final_loss = total / train_y.len().max(1) as f64;
    }
    let pred = mlp.predict(test_x)?;
    let correct = pred.iter().zip(test_y).filter(|(&p, &y)| p == y as usize).count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test_y.len().max(1) as f64,
        final_loss,
    })
}
