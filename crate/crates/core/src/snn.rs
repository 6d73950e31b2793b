//! Spiking layer primitives: LIF neurons with a rectangular surrogate
//! gradient, threshold-dependent batch normalization, direct input coding and
//! the non-spiking image readout.
//!
//! Charging, firing and reset follow
//!
//! ```text
//! m[t] = decay · v[t-1] + I[t]
//! o[t] = H(m[t] − v_theta)
//! v[t] = m[t] · (1 − o[t]) + v_reset · o[t]
//! ```
//!
//! where `decay` is the membrane decay factor used as a plain multiplier
//! (0.25 by default). The backward pass replaces `dH/dm` with
//! `(1/alpha) · 1(|m − v_theta| < alpha/2)`.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Grads, Tape, Tensor, Var};

/// LIF neuron constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub v_theta: f32,
    pub decay: f32,
    pub v_reset: f32,
    /// Width of the rectangular surrogate window.
    pub alpha: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            v_theta: 0.2,
            decay: 0.25,
            v_reset: 0.0,
            alpha: 0.5,
        }
    }
}

impl LifParams {
    pub fn new(v_theta: f32, decay: f32, v_reset: f32, alpha: f32) -> Result<Self> {
        let p = LifParams {
            v_theta,
            decay,
            v_reset,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Validation(format!("decay {} must lie in (0, 1)", self.decay)));
        }
        if !(self.v_theta > 0.0) {
            return Err(Error::Validation(format!("threshold {} must be positive", self.v_theta)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Validation(format!("surrogate width {} must be positive", self.alpha)));
        }
        if !(self.v_reset < self.v_theta) {
            return Err(Error::Validation(format!(
                "reset potential {} must be below the threshold {}",
                self.v_reset, self.v_theta
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn fires(&self, m: f32) -> bool {
        m >= self.v_theta
    }

    /// Surrogate derivative of the spike w.r.t. the membrane potential.
    #[inline]
    pub fn surrogate(&self, m: f32) -> f32 {
        if (m - self.v_theta).abs() < self.alpha / 2.0 {
            1.0 / self.alpha
        } else {
            0.0
        }
    }
}

/// Membrane state of one layer between steps.
#[derive(Clone, Copy, Debug)]
pub struct LifState {
    /// Potential after reset.
    pub v: Var,
    /// Instantaneous potential before firing.
    pub m: Var,
}

impl LifState {
    pub fn zeros(tape: &mut Tape, shape: &[usize]) -> Self {
        let v = tape.constant(Tensor::zeros(shape.to_vec()));
        let m = tape.constant(Tensor::zeros(shape.to_vec()));
        LifState { v, m }
    }
}

struct SpikeRule {
    m: Var,
    params: LifParams,
}

impl Backward for SpikeRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let d = g
            .value(self.m)
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&m, &dy)| dy * self.params.surrogate(m))
            .collect();
        g.add(self.m, Tensor::new(grad.shape(), d).unwrap());
    }
}

/// Heaviside firing `H(m − v_theta)` with the rectangular surrogate backward.
pub fn spike(tape: &mut Tape, m: Var, params: LifParams) -> Var {
    let out = tape.value(m).map(|v| if params.fires(v) { 1.0 } else { 0.0 });
    tape.push(out, &[m], SpikeRule { m, params })
}

/// One LIF update. Returns the emitted spikes and the next state.
pub fn lif_step(tape: &mut Tape, input: Var, state: &LifState, params: LifParams) -> Result<(Var, LifState)> {
    if tape.shape(input) != tape.shape(state.v) {
        return Err(Error::shape("lif_step", tape.shape(input), tape.shape(state.v)));
    }
    let leak = tape.scale(state.v, params.decay);
    let m = tape.add(leak, input)?;
    let s = spike(tape, m, params);
    let keep = tape.affine(s, -1.0, 1.0);
    let held = tape.mul(m, keep)?;
    let reset = tape.scale(s, params.v_reset);
    let v = tape.add(held, reset)?;
    Ok((s, LifState { v, m }))
}

struct LifSequenceRule {
    input: Var,
    params: LifParams,
    steps: usize,
    /// Instantaneous potentials, same layout as the input.
    m: Vec<f32>,
}

impl Backward for LifSequenceRule {
    fn backward(&self, spikes: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let p = self.params;
        let per = grad.numel() / self.steps;
        let mut dv = vec![0.0f32; per];
        let mut dinput = vec![0.0f32; grad.numel()];
        for t in (0..self.steps).rev() {
            let r = t * per..(t + 1) * per;
            let (m, s, go, di) = (&self.m[r.clone()], &spikes.data()[r.clone()], &grad.data()[r.clone()], &mut dinput[r]);
            for j in 0..per {
                let sg = p.surrogate(m[j]);
                let ds = go[j] + dv[j] * (p.v_reset - m[j]);
                let dm = ds * sg + dv[j] * (1.0 - s[j]);
                di[j] = dm;
                dv[j] = dm * p.decay;
            }
        }
        g.add(self.input, Tensor::new(grad.shape(), dinput).unwrap());
    }
}

/// LIF layer over a time-stacked current `[steps·B, …]`, starting from rest.
///
/// Equivalent to chaining [`lif_step`] over the time slices, recorded as a
/// single node whose backward runs BPTT through the membrane state.
pub fn lif_sequence(tape: &mut Tape, input: Var, steps: usize, params: LifParams) -> Result<Var> {
    let x = tape.value(input);
    if steps == 0 || x.rank() == 0 || !x.shape()[0].is_multiple_of(steps) {
        return Err(Error::dim(
            "lif_sequence",
            format!("leading axis of {:?} not divisible by {steps} steps", x.shape()),
        ));
    }
    let per = x.numel() / steps;
    let mut v = vec![0.0f32; per];
    let mut m_all = vec![0.0f32; x.numel()];
    let mut out = vec![0.0f32; x.numel()];
    for t in 0..steps {
        let r = t * per..(t + 1) * per;
        let (cur, m, o) = (&x.data()[r.clone()], &mut m_all[r.clone()], &mut out[r]);
        for j in 0..per {
            let mj = params.decay * v[j] + cur[j];
            m[j] = mj;
            if params.fires(mj) {
                o[j] = 1.0;
                v[j] = params.v_reset;
            } else {
                v[j] = mj;
            }
        }
    }
    let out = Tensor::new(x.shape(), out).unwrap();
    Ok(tape.push(
        out,
        &[input],
        LifSequenceRule {
            input,
            params,
            steps,
            m: m_all,
        },
    ))
}

/// Normalization mode of [`tdbn_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel running statistics of a tdBN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

struct BnRule {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    channels: usize,
    inner: usize,
    /// Batch statistics participate in the gradient (train mode).
    batch_stats: bool,
}

impl Backward for BnRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let (c_n, inner) = (self.channels, self.inner);
        let dy = grad.data();
        let mut sum_dy = vec![0.0f64; c_n];
        let mut sum_dy_xhat = vec![0.0f64; c_n];
        for (i, (chunk, xh)) in dy.chunks(inner).zip(self.xhat.chunks(inner)).enumerate() {
            let c = i % c_n;
            for (&d, &h) in chunk.iter().zip(xh) {
                sum_dy[c] += d as f64;
                sum_dy_xhat[c] += (d * h) as f64;
            }
        }
        if g.needs(self.x) {
            let gamma = g.value(self.gamma).data().to_vec();
            let count = (dy.len() / c_n) as f64;
            let mut dx = vec![0.0f32; dy.len()];
            for (i, ((out, chunk), xh)) in dx.chunks_mut(inner).zip(dy.chunks(inner)).zip(self.xhat.chunks(inner)).enumerate() {
                let c = i % c_n;
                let scale = gamma[c] * self.inv_std[c];
                if self.batch_stats {
                    let mean_dy = (sum_dy[c] / count) as f32;
                    let mean_dy_xhat = (sum_dy_xhat[c] / count) as f32;
                    for ((o, &d), &h) in out.iter_mut().zip(chunk).zip(xh) {
                        *o = scale * (d - mean_dy - h * mean_dy_xhat);
                    }
                } else {
                    for (o, &d) in out.iter_mut().zip(chunk) {
                        *o = scale * d;
                    }
                }
            }
            g.add(self.x, Tensor::new(grad.shape(), dx).unwrap());
        }
        let to_tensor = |v: &[f64]| Tensor::new([c_n], v.iter().map(|&x| x as f32).collect()).unwrap();
        g.add(self.gamma, to_tensor(&sum_dy_xhat));
        g.add(self.beta, to_tensor(&sum_dy));
    }
}

/// Threshold-dependent batch normalization over a time-stacked tensor
/// `[steps·B, C, …]`. Statistics pool every axis except the channel axis 1,
/// so batch and time are normalized together.
pub fn tdbn_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::dim("tdbn", format!("need at least [N, C], got {shape:?}")));
    }
    let channels = shape[1];
    for p in [gamma, beta] {
        if tape.shape(p) != [channels] {
            return Err(Error::shape("tdbn", &shape, tape.shape(p)));
        }
    }
    if stats.channels() != channels {
        return Err(Error::dim("tdbn", format!("{} running channels for input {shape:?}", stats.channels())));
    }
    let inner: usize = shape[2..].iter().product();
    let data = tape.value(x).data();
    let count = data.len() / channels;

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut sum = vec![0.0f64; channels];
            for (i, chunk) in data.chunks(inner).enumerate() {
                sum[i % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; channels];
            for (i, chunk) in data.chunks(inner).enumerate() {
                let c = i % channels;
                sq[c] += chunk.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let mom = BN_MOMENTUM as f64;
            for c in 0..channels {
                stats.mean[c] = ((1.0 - mom) * stats.mean[c] as f64 + mom * mean[c]) as f32;
                stats.var[c] = ((1.0 - mom) * stats.var[c] as f64 + mom * var[c] * unbias) as f32;
            }
            stats.initialized = true;
            (mean, var)
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::UninitializedStats(format!("tdBN layer with {channels} channels")));
            }
            (
                stats.mean.iter().map(|&v| v as f64).collect(),
                stats.var.iter().map(|&v| v as f64).collect(),
            )
        }
    };

    let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32).collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0f32; data.len()];
    let mut out = vec![0.0f32; data.len()];
    for (i, ((xh, o), src)) in xhat.chunks_mut(inner).zip(out.chunks_mut(inner)).zip(data.chunks(inner)).enumerate() {
        let c = i % channels;
        for ((h, y), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
            *h = (v - mean[c]) * inv_std[c];
            *y = gv[c] * *h + bv[c];
        }
    }
    let out = Tensor::new(shape, out).unwrap();
    Ok(tape.push(
        out,
        &[x, gamma, beta],
        BnRule {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            inner,
            batch_stats: mode == BnMode::Train,
        },
    ))
}

/// Direct coding: the image itself is the input current at every step.
pub fn encode_input(tape: &mut Tape, image: Var, steps: usize) -> Result<Var> {
    if let Some(bad) = tape.value(image).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
    }
    tape.repeat_time(image, steps)
}

/// Non-spiking readout: mean of the final pre-threshold current over time,
/// squashed into `[0, 1]` by the logistic sigmoid.
pub fn decode_output(tape: &mut Tape, currents: Var, steps: usize) -> Result<Var> {
    let mean = tape.mean_time(currents, steps)?;
    Ok(tape.sigmoid(mean))
}

/// Binary spike trains laid out `(batch, neurons, steps)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    batch: usize,
    neurons: usize,
    steps: usize,
    bits: Vec<u8>,
}

impl SpikeTrain {
    pub fn new(batch: usize, neurons: usize, steps: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != batch * neurons * steps {
            return Err(Error::dim(
                "spike_train",
                format!("{} bits for shape ({batch}, {neurons}, {steps})", bits.len()),
            ));
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Validation(format!("spike value {b} is not binary")));
        }
        Ok(SpikeTrain {
            batch,
            neurons,
            steps,
            bits,
        })
    }

    pub fn zeros(batch: usize, neurons: usize, steps: usize) -> Self {
        SpikeTrain {
            batch,
            neurons,
            steps,
            bits: vec![0; batch * neurons * steps],
        }
    }

    /// Reads a time-stacked `[steps·B, neurons]` tensor of 0/1 values.
    pub fn from_time_major(t: &Tensor, steps: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || steps == 0 || !s[0].is_multiple_of(steps) {
            return Err(Error::dim("spike_train", format!("cannot read {s:?} as {steps} time slices")));
        }
        let (batch, neurons) = (s[0] / steps, s[1]);
        let mut bits = vec![0u8; t.numel()];
        for (row, chunk) in t.data().chunks(neurons).enumerate() {
            let (step, b) = (row / batch, row % batch);
            for (i, &v) in chunk.iter().enumerate() {
                bits[(b * neurons + i) * steps + step] = match v {
                    0.0 => 0,
                    1.0 => 1,
                    other => return Err(Error::Validation(format!("spike value {other} is not binary"))),
                };
            }
        }
        Ok(SpikeTrain {
            batch,
            neurons,
            steps,
            bits,
        })
    }

    /// Writes the train as a `[steps·B, neurons]` tensor.
    pub fn to_time_major(&self) -> Tensor {
        let mut data = vec![0.0f32; self.bits.len()];
        for b in 0..self.batch {
            for i in 0..self.neurons {
                for t in 0..self.steps {
                    data[(t * self.batch + b) * self.neurons + i] = self.bits[(b * self.neurons + i) * self.steps + t] as f32;
                }
            }
        }
        Tensor::new([self.steps * self.batch, self.neurons], data).unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    /// The `steps` bits of one neuron.
    pub fn sequence(&self, b: usize, i: usize) -> &[u8] {
        let start = (b * self.neurons + i) * self.steps;
        &self.bits[start..start + self.steps]
    }

    pub fn get(&self, b: usize, i: usize, t: usize) -> u8 {
        self.bits[(b * self.neurons + i) * self.steps + t]
    }
}
