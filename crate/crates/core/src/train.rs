//! Training loop, reconstruction and generation.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::latent::{poisson_sample, sample_spikes, RateVector, SamplerDraw};
use crate::loss::{total_loss, Bandwidth, LossReport};
use crate::model::{Model, ParamGroup, Pass};
use crate::optim::{adamw_step, clip_global_norm, AdamHyper, AdamState};
use crate::rng::derive_indexed;
use crate::snn::{BnMode, SpikeTrain};
use crate::tensor::{Tape, Tensor, Var};

/// Phases of one training step, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Rate,
    Prior,
    Sample,
    Decoder,
    Loss,
    Update,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    /// Mean posterior firing rate of the batch.
    pub mean_rate: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mse: f64,
    pub mmd2: f64,
    pub total: f64,
    pub mean_rate: f64,
    pub batches: usize,
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
}

/// Encoder → rate → (prior) → sample → decoder on one batch. The prior
/// rates are computed only when `noise` is given.
#[allow(clippy::too_many_arguments)]
fn forward(
    model: &mut Model,
    tape: &mut Tape,
    vars: &[Var],
    images: Var,
    noise: Option<Var>,
    draw: &SamplerDraw,
    mode: BnMode,
    stages: &mut Vec<Stage>,
) -> Result<(Pass, Option<Var>)> {
    let steps = model.config().steps;
    stages.push(Stage::Encoder);
    let encoded = model.encode(tape, vars, images, mode)?;
    stages.push(Stage::Rate);
    let posterior = tape.mean_time(encoded, steps)?;
    let prior = match noise {
        Some(z) => {
            stages.push(Stage::Prior);
            Some(model.prior(tape, vars, z)?)
        }
        None => None,
    };
    stages.push(Stage::Sample);
    let latent = poisson_sample(tape, posterior, draw, model.config().alpha)?;
    stages.push(Stage::Decoder);
    let recon = model.decode(tape, vars, latent, mode)?;
    let pass = Pass {
        encoded,
        posterior,
        latent,
        recon,
    };
    Ok((pass, prior))
}

fn finite(batch: usize, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            batch,
            term,
            value: value as f32,
        })
    }
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(model.params().iter().map(|p| p.value.numel()));
        Trainer { model, adam, epoch: 0 }
    }

    fn root(&self) -> u64 {
        self.model.config().seed
    }

    /// One optimization step on `images`. `batch` only labels diagnostics.
    pub fn step(&mut self, images: &Tensor, batch: usize) -> Result<StepReport> {
        let cfg = self.model.config().clone();
        let n = images.shape().first().copied().unwrap_or(0);
        let step = self.adam.step;
        let mut stages = Vec::with_capacity(7);
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let x = tape.constant(images.clone());

        let draw = SamplerDraw::generate(n, cfg.latent_dim, cfg.steps, derive_indexed(self.root(), "sampler", step));
        let noise = tape.constant(self.model.noise(n, derive_indexed(self.root(), "prior-noise", step)));
        let (pass, prior) = forward(&mut self.model, &mut tape, &vars, x, Some(noise), &draw, BnMode::Train, &mut stages)?;
        let prior = prior.expect("noise was given");

        stages.push(Stage::Loss);
        let (total, report) = total_loss(&mut tape, pass.recon, x, pass.posterior, prior, cfg.lambda_mmd, Bandwidth::Median)?;
        finite(batch, "mse", report.mse)?;
        finite(batch, "mmd2", report.mmd2)?;
        tape.backward(total)?;

        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| match tape.grad(v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect();
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        finite(batch, "gradient norm", grad_norm)?;

        stages.push(Stage::Update);
        self.adam.step += 1;
        let t = self.adam.step;
        for (i, p) in self.model.params_mut().iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Body => cfg.lr,
                ParamGroup::Bottleneck => cfg.bottleneck_lr,
            };
            let h = AdamHyper::new(lr, cfg.weight_decay);
            adamw_step(p.value.data_mut(), &grads[i], &mut self.adam.m[i], &mut self.adam.v[i], t, h)?;
        }
        // tdBN can keep the loss finite while weights or running variances overflow.
        let mut params = self.model.params().iter().flat_map(|p| p.value.data().iter());
        finite(batch, "parameters", params.find(|v| !v.is_finite()).map_or(0.0, |&v| v as f64))?;
        let mut stats = self.model.stats().iter().flat_map(|(_, s)| s.mean.iter().chain(&s.var));
        finite(batch, "running statistics", stats.find(|v| !v.is_finite()).map_or(0.0, |&v| v as f64))?;
        let rates = tape.value(pass.posterior).data();
        let mean_rate = rates.iter().map(|&r| r as f64).sum::<f64>() / rates.len().max(1) as f64;
        Ok(StepReport {
            loss: report,
            mean_rate,
            grad_norm,
            stages,
        })
    }

    /// One pass over `data` in a seeded order; metrics are sample-weighted means.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let order = batches(data.len(), self.model.config().batch_size, derive_indexed(self.root(), "epoch-order", self.epoch))?;
        let (mut mse, mut mmd2, mut total, mut rate) = (0.0, 0.0, 0.0, 0.0);
        for (b, idx) in order.iter().enumerate() {
            let r = self.step(&data.gather(idx), b)?;
            let w = idx.len() as f64;
            mse += w * r.loss.mse;
            mmd2 += w * r.loss.mmd2;
            total += w * r.loss.total;
            rate += w * r.mean_rate;
        }
        self.epoch += 1;
        let n = data.len().max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mse: mse / n,
            mmd2: mmd2 / n,
            total: total / n,
            mean_rate: rate / n,
            batches: order.len(),
        })
    }
}

/// Training loss of `images` without touching the model: batch statistics on
/// a copy, sampler and prior noise seeded by `seed`.
pub fn evaluate(model: &Model, images: &Tensor, seed: u64) -> Result<LossReport> {
    let mut m = model.clone();
    let cfg = m.config().clone();
    let n = images.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let draw = SamplerDraw::generate(n, cfg.latent_dim, cfg.steps, derive_indexed(seed, "sampler", 0));
    let noise = tape.constant(m.noise(n, derive_indexed(seed, "prior-noise", 0)));
    let (pass, prior) = forward(&mut m, &mut tape, &vars, x, Some(noise), &draw, BnMode::Train, &mut Vec::new())?;
    let (_, report) = total_loss(&mut tape, pass.recon, x, pass.posterior, prior.expect("noise was given"), cfg.lambda_mmd, Bandwidth::Median)?;
    Ok(report)
}

/// Outputs of a reconstruction pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub recon: Tensor,
    pub posterior: RateVector,
    pub latent: SpikeTrain,
    /// Mean firing rate of each layer during this pass, aligned with [`Model::layers`].
    pub layer_rates: Vec<Option<f64>>,
}

/// Runs `f` with running statistics when every tdBN layer has them,
/// otherwise with batch statistics on a throwaway copy so the model's own
/// statistics stay untouched.
fn with_inference<T>(model: &mut Model, f: impl FnOnce(&mut Model, BnMode) -> Result<T>) -> Result<T> {
    if model.stats_ready() {
        f(model, BnMode::Eval)
    } else {
        f(&mut model.clone(), BnMode::Train)
    }
}

/// Inference-mode reconstruction with the latent draw seeded by `seed`.
pub fn reconstruct(model: &mut Model, images: &Tensor, seed: u64) -> Result<Reconstruction> {
    with_inference(model, |m, mode| {
        let cfg = m.config().clone();
        let n = images.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let draw = SamplerDraw::generate(n, cfg.latent_dim, cfg.steps, seed);
        let (pass, _) = forward(m, &mut tape, &vars, x, None, &draw, mode, &mut Vec::new())?;
        Ok(Reconstruction {
            recon: tape.value(pass.recon).clone(),
            posterior: RateVector::from_tensor(tape.value(pass.posterior))?,
            latent: SpikeTrain::from_time_major(tape.value(pass.latent), cfg.steps)?,
            layer_rates: m.layer_rates().to_vec(),
        })
    })
}

/// Decodes a given latent spike train `(B, latent, T)` in inference mode.
pub fn decode_spikes(model: &mut Model, latent: &SpikeTrain) -> Result<Tensor> {
    with_inference(model, |m, mode| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let z = tape.constant(latent.to_time_major());
        let out = m.decode(&mut tape, &vars, z, mode)?;
        Ok(tape.value(out).clone())
    })
}

/// Prior rates for `n` noise vectors seeded by `seed`.
pub fn sample_prior(model: &Model, n: usize, seed: u64) -> Result<RateVector> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let noise = tape.constant(model.noise(n, derive_indexed(seed, "noise", 0)));
    let r = model.prior(&mut tape, &vars, noise)?;
    RateVector::from_tensor(tape.value(r))
}

/// Noise → prior rates → sampled spikes → decoder.
pub fn generate_images(model: &mut Model, n: usize, seed: u64) -> Result<Tensor> {
    let cfg = model.config().clone();
    if n == 0 {
        return Ok(Tensor::zeros([0, cfg.image_channels, cfg.image_size, cfg.image_size]));
    }
    let rates = sample_prior(model, n, seed)?;
    let draw = SamplerDraw::generate(n, cfg.latent_dim, cfg.steps, derive_indexed(seed, "draw", 0));
    let z = sample_spikes(&rates, &draw)?;
    decode_spikes(model, &z.spikes)
}
