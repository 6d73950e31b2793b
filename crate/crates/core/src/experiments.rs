//! Robustness, energy and firing-rate experiments on a trained model.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::latent::{perturb_spikes, shuffle_length, shuffle_time};
use crate::loss::mse_loss;
use crate::metrics::{energy_report, rate_histogram, EnergyReport, Histogram};
use crate::model::{LayerKind, Model};
use crate::rng::derive_indexed;
use crate::snn::SpikeTrain;
use crate::tensor::Tensor;
use crate::train::{decode_spikes, reconstruct, sample_prior, Reconstruction};

/// Latent axis permuted by the shuffle test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShuffleDim {
    /// Each neuron's spike times, counts kept.
    Time,
    /// The neuron order.
    Length,
}

impl FromStr for ShuffleDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(ShuffleDim::Time),
            "length" => Ok(ShuffleDim::Length),
            _ => Err(Error::Config(format!("unknown shuffle dimension {s:?} (expected time or length)"))),
        }
    }
}

/// Mean reconstruction losses of a latent perturbation, sample-weighted over batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbLoss {
    /// Perturbed decoding vs input images.
    pub vs_original: f64,
    /// Perturbed decoding vs the unperturbed reconstruction.
    pub vs_vanilla: f64,
    /// Unperturbed reconstruction vs input images.
    pub vanilla: f64,
}

fn chunks(images: &Tensor, batch_size: usize) -> Result<Vec<Tensor>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let n = images.shape()[0];
    Ok((0..n).step_by(batch_size).map(|s| images.slice_rows(s, (s + batch_size).min(n))).collect())
}

/// Reconstructs every batch once; the latent draw of batch `b` is seeded by
/// `derive_indexed(seed, "recon", b)`.
fn vanilla(model: &mut Model, images: &Tensor, batch_size: usize, seed: u64) -> Result<Vec<(Tensor, Reconstruction)>> {
    chunks(images, batch_size)?
        .into_iter()
        .enumerate()
        .map(|(b, x)| {
            let r = reconstruct(model, &x, derive_indexed(seed, "recon", b as u64))?;
            Ok((x, r))
        })
        .collect()
}

/// Decodes `perturb(z)` for every reconstructed batch and averages the losses.
fn perturbed_losses(
    model: &mut Model,
    recons: &[(Tensor, Reconstruction)],
    mut perturb: impl FnMut(usize, &Reconstruction) -> Result<SpikeTrain>,
) -> Result<PerturbLoss> {
    let (mut orig, mut van, mut base, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (b, (x, r)) in recons.iter().enumerate() {
        let z = perturb(b, r)?;
        let out = decode_spikes(model, &z)?;
        let w = x.shape()[0];
        orig += w as f64 * mse_loss(&out, x)?;
        van += w as f64 * mse_loss(&out, &r.recon)?;
        base += w as f64 * mse_loss(&r.recon, x)?;
        n += w;
    }
    let n = n.max(1) as f64;
    Ok(PerturbLoss {
        vs_original: orig / n,
        vs_vanilla: van / n,
        vanilla: base / n,
    })
}

/// Shuffles the posterior latent spikes along `dim` and decodes them.
pub fn shuffle_test(model: &mut Model, images: &Tensor, dim: ShuffleDim, batch_size: usize, seed: u64) -> Result<PerturbLoss> {
    let recons = vanilla(model, images, batch_size, seed)?;
    perturbed_losses(model, &recons, |b, r| {
        let s = derive_indexed(seed, "shuffle", b as u64);
        Ok(match dim {
            ShuffleDim::Time => shuffle_time(&r.latent, s),
            ShuffleDim::Length => shuffle_length(&r.latent, s),
        })
    })
}

/// One point of the flip-noise curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisePoint {
    pub prob: f64,
    pub loss: PerturbLoss,
}

/// Flips latent bits with each probability in `probs`. The flip stream of a
/// batch is the same for every probability, so flip sets are nested.
pub fn noise_curve(model: &mut Model, images: &Tensor, probs: &[f64], batch_size: usize, seed: u64) -> Result<Vec<NoisePoint>> {
    if probs.is_empty() {
        return Err(Error::Validation("noise test needs at least one flip probability".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("flip probability {bad} outside [0, 1]")));
    }
    let recons = vanilla(model, images, batch_size, seed)?;
    probs
        .iter()
        .map(|&a| {
            let loss = perturbed_losses(model, &recons, |b, r| perturb_spikes(&r.latent, a, derive_indexed(seed, "flip", b as u64)))?;
            Ok(NoisePoint { prob: a, loss })
        })
        .collect()
}

/// Operation count and energy of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub report: EnergyReport,
}

/// Per-layer and total energy of one inference through encoder and decoder
/// at average firing rate `avg_rate`.
pub fn energy_table(model: &Model, avg_rate: f64) -> Result<(Vec<LayerEnergy>, EnergyReport)> {
    if !(0.0..=1.0).contains(&avg_rate) {
        return Err(Error::Validation(format!("average firing rate {avg_rate} outside [0, 1]")));
    }
    let steps = model.config().steps;
    let mut rows = Vec::new();
    let (mut add, mut mul) = (0.0, 0.0);
    for layer in model.layers().iter().filter(|l| l.kind != LayerKind::Bottleneck) {
        let (a, m) = layer.flops();
        add += a as f64;
        mul += m as f64;
        rows.push(LayerEnergy {
            name: layer.name.clone(),
            report: energy_report(a as f64, m as f64, avg_rate, steps, true),
        });
    }
    Ok((rows, energy_report(add, mul, avg_rate, steps, true)))
}

/// Neuron-weighted mean firing rate of every LIF layer during reconstruction of `images`.
pub fn measured_rate(model: &mut Model, images: &Tensor, batch_size: usize, seed: u64) -> Result<f64> {
    let (mut spikes, mut neurons) = (0.0, 0.0);
    for (b, x) in chunks(images, batch_size)?.into_iter().enumerate() {
        let n = x.shape()[0] as f64;
        let r = reconstruct(model, &x, derive_indexed(seed, "recon", b as u64))?;
        for (layer, rate) in model.layers().iter().zip(&r.layer_rates) {
            if let Some(r) = rate {
                let size = (layer.c_out * layer.out_hw * layer.out_hw) as f64 * n;
                spikes += r * size;
                neurons += size;
            }
        }
    }
    if neurons == 0.0 {
        return Err(Error::Validation("no images to measure firing rates on".into()));
    }
    Ok(spikes / neurons)
}

/// Histograms of posterior rates on `images` and prior rates of `n_prior` noise draws.
pub fn rate_histograms(
    model: &mut Model,
    images: &Tensor,
    n_prior: usize,
    bins: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(Histogram, Histogram)> {
    let mut posterior = Vec::new();
    for (b, x) in chunks(images, batch_size)?.into_iter().enumerate() {
        let r = reconstruct(model, &x, derive_indexed(seed, "recon", b as u64))?;
        posterior.extend_from_slice(r.posterior.rates());
    }
    let prior = sample_prior(model, n_prior, derive_indexed(seed, "prior", 0))?;
    Ok((rate_histogram(&posterior, bins)?, rate_histogram(prior.rates(), bins)?))
}
