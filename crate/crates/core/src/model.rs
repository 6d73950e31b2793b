//! Encoder, decoder and prior bottleneck.
//!
//! Every encoder layer is a 3×3 stride-2 convolution followed by tdBN and a
//! LIF layer; a linear layer maps the flattened features to the latent
//! width. The decoder mirrors it with a linear layer and stride-2 transposed
//! convolutions, and ends in a stride-1 convolution whose current is averaged
//! over time and squashed by a sigmoid. The bottleneck maps Gaussian noise to
//! prior firing rates.

use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::prior_rates;
use crate::rng::{derive_seed, stream};
use crate::snn::{decode_output, encode_input, lif_sequence, tdbn_forward, BnMode, RunningStats};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Linear,
    /// Stride-1 convolution with bias producing the pixel current.
    Readout,
    /// Noise-to-rate linear layer with bias and sigmoid.
    Bottleneck,
}

/// Static description of one weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial side of the input and output maps; 1 for linear layers.
    pub in_hw: usize,
    pub out_hw: usize,
    /// Followed by tdBN and LIF.
    pub spiking: bool,
    /// Receives binary spikes rather than real values.
    pub spike_input: bool,
}

impl LayerSpec {
    /// Multiply-accumulates for one image at one time step.
    pub fn macs(&self) -> usize {
        match self.kind {
            LayerKind::Linear | LayerKind::Bottleneck => self.c_in * self.c_out,
            LayerKind::Conv | LayerKind::Readout => self.c_out * self.out_hw * self.out_hw * self.c_in * 9,
            // every input pixel scatters a c_out×3×3 patch
            LayerKind::ConvTranspose => self.c_in * self.in_hw * self.in_hw * self.c_out * 9,
        }
    }

    /// `(adds, muls)` per image per time step. Spike inputs turn every
    /// multiply-accumulate into a bare accumulate.
    pub fn flops(&self) -> (usize, usize) {
        let macs = self.macs();
        if self.spike_input {
            (macs, 0)
        } else {
            (macs, macs)
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear | LayerKind::Bottleneck => vec![self.c_in, self.c_out],
            LayerKind::Conv | LayerKind::Readout => vec![self.c_out, self.c_in, 3, 3],
            LayerKind::ConvTranspose => vec![self.c_in, self.c_out, 3, 3],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear | LayerKind::Bottleneck => self.c_in,
            _ => self.c_in * 9,
        }
    }
}

/// Layer list implied by a configuration, in parameter order.
pub fn layer_specs(cfg: &ModelConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let ch = cfg.encoder_channels();
    let n = ch.len();
    let mut specs = Vec::new();
    let mut hw = cfg.image_size;
    let mut c_in = cfg.image_channels;
    for (i, &c) in ch.iter().enumerate() {
        specs.push(LayerSpec {
            name: format!("enc.{i}"),
            kind: LayerKind::Conv,
            c_in,
            c_out: c,
            in_hw: hw,
            out_hw: hw / 2,
            spiking: true,
            spike_input: i > 0,
        });
        hw /= 2;
        c_in = c;
    }
    let flat = ch[n - 1] * hw * hw;
    let linear = |name: &str, c_in, c_out, kind| LayerSpec {
        name: name.to_string(),
        kind,
        c_in,
        c_out,
        in_hw: 1,
        out_hw: 1,
        spiking: kind == LayerKind::Linear,
        spike_input: kind == LayerKind::Linear,
    };
    specs.push(linear("enc.fc", flat, cfg.latent_dim, LayerKind::Linear));
    specs.push(linear("dec.fc", cfg.latent_dim, flat, LayerKind::Linear));
    let mut widths: Vec<usize> = ch.iter().rev().copied().collect();
    widths.push(ch[0]);
    for i in 0..n {
        specs.push(LayerSpec {
            name: format!("dec.{i}"),
            kind: LayerKind::ConvTranspose,
            c_in: widths[i],
            c_out: widths[i + 1],
            in_hw: hw,
            out_hw: hw * 2,
            spiking: true,
            spike_input: true,
        });
        hw *= 2;
    }
    specs.push(LayerSpec {
        name: "dec.readout".into(),
        kind: LayerKind::Readout,
        c_in: ch[0],
        c_out: cfg.image_channels,
        in_hw: hw,
        out_hw: hw,
        spiking: false,
        spike_input: true,
    });
    specs.push(linear("prior", cfg.latent_dim, cfg.latent_dim, LayerKind::Bottleneck));
    Ok(specs)
}

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Body,
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug)]
struct Slots {
    weight: usize,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    stats: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    slots: Vec<Slots>,
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
    /// Mean output firing rate of each layer in the latest pass; `None` for
    /// non-spiking layers and layers not yet run.
    rates: Vec<Option<f64>>,
}

/// Intermediates of one full pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    /// Encoder spikes `[T·B, latent]`.
    pub encoded: Var,
    /// Posterior rates `[B, latent]`.
    pub posterior: Var,
    /// Sampled latent spikes `[T·B, latent]`.
    pub latent: Var,
    /// Reconstruction `[B, C, H, W]`.
    pub recon: Var,
}

impl Model {
    /// Builds and initializes a model; weights are drawn from the stream
    /// derived from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let layers = layer_specs(cfg)?;
        let mut rng = stream(derive_seed(cfg.seed, "init"));
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut slots = Vec::new();
        for spec in &layers {
            let group = if spec.kind == LayerKind::Bottleneck {
                ParamGroup::Bottleneck
            } else {
                ParamGroup::Body
            };
            let std = (2.0 / spec.fan_in() as f64).sqrt() as f32;
            let weight = Tensor::from_fn(spec.weight_shape(), |_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * std
            });
            let mut push = |suffix: &str, value: Tensor| {
                params.push(Param {
                    name: format!("{}.{suffix}", spec.name),
                    value,
                    group,
                });
                params.len() - 1
            };
            let w = push("weight", weight);
            let mut slot = Slots {
                weight: w,
                bias: None,
                gamma: None,
                beta: None,
                stats: None,
            };
            if spec.spiking {
                slot.gamma = Some(push("bn.gamma", Tensor::full([spec.c_out], cfg.v_theta)));
                slot.beta = Some(push("bn.beta", Tensor::zeros([spec.c_out])));
                stats.push((format!("{}.bn", spec.name), RunningStats::new(spec.c_out)));
                slot.stats = Some(stats.len() - 1);
            } else {
                slot.bias = Some(push("bias", Tensor::zeros([spec.c_out])));
            }
            slots.push(slot);
        }
        Ok(Model {
            config: cfg.clone(),
            rates: vec![None; layers.len()],
            layers,
            slots,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on the tape, as a leaf when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn layer_index(&self, name: &str) -> usize {
        self.layers.iter().position(|l| l.name == name).expect("layer exists by construction")
    }

    /// tdBN followed by LIF over time.
    fn spiking_tail(&mut self, tape: &mut Tape, vars: &[Var], layer: usize, x: Var, mode: BnMode) -> Result<Var> {
        let s = self.slots[layer];
        let (gamma, beta, stats) = (s.gamma.unwrap(), s.beta.unwrap(), s.stats.unwrap());
        let y = tdbn_forward(tape, x, vars[gamma], vars[beta], &mut self.stats[stats].1, mode)?;
        let out = lif_sequence(tape, y, self.config.steps, self.config.lif())?;
        let spikes = tape.value(out).data();
        self.rates[layer] = Some(spikes.iter().map(|&v| v as f64).sum::<f64>() / spikes.len().max(1) as f64);
        Ok(out)
    }

    /// Per-layer mean firing rates of the latest pass, aligned with [`Model::layers`].
    pub fn layer_rates(&self) -> &[Option<f64>] {
        &self.rates
    }

    /// Whether every tdBN layer has running statistics.
    pub fn stats_ready(&self) -> bool {
        self.stats.iter().all(|(_, s)| s.initialized)
    }

    fn check_images(&self, tape: &Tape, images: Var) -> Result<()> {
        let c = &self.config;
        let want = [c.image_channels, c.image_size, c.image_size];
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::dim("encode", format!("expected [B, {}, {}, {}], got {shape:?}", want[0], want[1], want[2])));
        }
        Ok(())
    }

    /// Image batch `[B, C, H, W]` to encoder spikes `[T·B, latent]`.
    pub fn encode(&mut self, tape: &mut Tape, vars: &[Var], images: Var, mode: BnMode) -> Result<Var> {
        self.check_images(tape, images)?;
        let steps = self.config.steps;
        let mut x = encode_input(tape, images, steps)?;
        let convs = self.config.encoder_channels().len();
        for i in 0..convs {
            let y = tape.conv2d(x, vars[self.slots[i].weight], 2, 1)?;
            x = self.spiking_tail(tape, vars, i, y, mode)?;
        }
        let rows = tape.shape(x)[0];
        let flat = tape.reshape(x, &[rows, self.layers[convs].c_in])?;
        let y = tape.matmul(flat, vars[self.slots[convs].weight])?;
        self.spiking_tail(tape, vars, convs, y, mode)
    }

    /// Latent spikes `[T·B, latent]` to images `[B, C, H, W]` in `[0, 1]`.
    pub fn decode(&mut self, tape: &mut Tape, vars: &[Var], latent: Var, mode: BnMode) -> Result<Var> {
        let steps = self.config.steps;
        let fc = self.layer_index("dec.fc");
        let shape = tape.shape(latent).to_vec();
        if shape.len() != 2 || shape[1] != self.config.latent_dim || !shape[0].is_multiple_of(steps) {
            return Err(Error::dim(
                "decode",
                format!("expected [T·B, {}] with T = {steps}, got {shape:?}", self.config.latent_dim),
            ));
        }
        let y = tape.matmul(latent, vars[self.slots[fc].weight])?;
        let s = self.spiking_tail(tape, vars, fc, y, mode)?;
        let first = &self.layers[fc + 1];
        let mut x = tape.reshape(s, &[shape[0], first.c_in, first.in_hw, first.in_hw])?;
        let mut i = fc + 1;
        while self.layers[i].kind == LayerKind::ConvTranspose {
            let y = tape.conv2d_transpose(x, vars[self.slots[i].weight], 2, 1, 1)?;
            x = self.spiking_tail(tape, vars, i, y, mode)?;
            i += 1;
        }
        let s = self.slots[i];
        let y = tape.conv2d(x, vars[s.weight], 1, 1)?;
        let y = tape.add_bias(y, vars[s.bias.unwrap()])?;
        decode_output(tape, y, steps)
    }

    /// Noise `[B, latent]` to prior rates `[B, latent]`.
    pub fn prior(&self, tape: &mut Tape, vars: &[Var], noise: Var) -> Result<Var> {
        let s = self.slots[self.layer_index("prior")];
        prior_rates(tape, noise, vars[s.weight], vars[s.bias.unwrap()])
    }

    /// Standard-normal bottleneck input `[n, latent]`.
    pub fn noise(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed);
        Tensor::from_fn([n, self.config.latent_dim], |_| StandardNormal.sample(&mut rng))
    }
}
