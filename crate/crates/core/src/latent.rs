//! Poisson firing-rate latent space.
//!
//! The posterior rate of a latent neuron is its encoder firing rate,
//! `r = (1/T) Σ_t x[t]`. A latent spike train is drawn by comparing one
//! uniform variate per step with the rate, `z[t] = 1(u[t] < r)`, and the
//! gradient of the spike count w.r.t. the rate is replaced by the surrogate
//! `(1/alpha) Σ_t 1(|r − u[t]| < alpha/2)`, evaluated on the same `u`.
//!
//! The prior rates come from a bottleneck `sigmoid(z_n · W + b)` applied to
//! standard-normal noise.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::snn::SpikeTrain;
use crate::tensor::{Backward, Grads, Tape, Tensor, Var};

/// Firing rates `(batch, neurons)`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateVector {
    batch: usize,
    neurons: usize,
    rates: Vec<f32>,
}

impl RateVector {
    pub fn new(batch: usize, neurons: usize, rates: Vec<f32>) -> Result<Self> {
        if rates.len() != batch * neurons {
            return Err(Error::dim("rates", format!("{} values for ({batch}, {neurons})", rates.len())));
        }
        if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Validation(format!("rate {bad} outside [0, 1]")));
        }
        Ok(RateVector { batch, neurons, rates })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[b, d] => Self::new(b, d, t.data().to_vec()),
            s => Err(Error::dim("rates", format!("expected (batch, neurons), got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.batch, self.neurons], self.rates.clone()).unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn rates(&self) -> &[f32] {
        &self.rates
    }

    pub fn row(&self, b: usize) -> &[f32] {
        &self.rates[b * self.neurons..(b + 1) * self.neurons]
    }
}

/// Uniform variates `(batch, neurons, steps)` bound to the seed that drew them.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerDraw {
    batch: usize,
    neurons: usize,
    steps: usize,
    u: Vec<f32>,
    seed: u64,
}

impl SamplerDraw {
    pub fn generate(batch: usize, neurons: usize, steps: usize, seed: u64) -> Self {
        let mut rng = stream(seed);
        let u = (0..batch * neurons * steps).map(|_| rng.random::<f32>()).collect();
        SamplerDraw {
            batch,
            neurons,
            steps,
            u,
            seed,
        }
    }

    /// Explicit variates, for fixtures.
    pub fn from_values(batch: usize, neurons: usize, steps: usize, u: Vec<f32>, seed: u64) -> Result<Self> {
        if u.len() != batch * neurons * steps {
            return Err(Error::dim("draw", format!("{} variates for ({batch}, {neurons}, {steps})", u.len())));
        }
        if let Some(bad) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("uniform variate {bad} outside [0, 1]")));
        }
        Ok(SamplerDraw {
            batch,
            neurons,
            steps,
            u,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f32] {
        &self.u
    }

    fn at(&self, b: usize, i: usize, t: usize) -> f32 {
        self.u[(b * self.neurons + i) * self.steps + t]
    }

    fn check(&self, op: &'static str, rates: &RateVector) -> Result<()> {
        if (self.batch, self.neurons) != (rates.batch, rates.neurons) {
            return Err(Error::shape(
                op,
                &[rates.batch, rates.neurons],
                &[self.batch, self.neurons, self.steps],
            ));
        }
        Ok(())
    }
}

/// Spike train sampled from rates, tagged with the draw's seed.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub spikes: SpikeTrain,
    pub seed: u64,
}

pub fn firing_rate(x: &SpikeTrain) -> RateVector {
    let steps = x.steps();
    let rates = (0..x.batch() * x.neurons())
        .map(|k| {
            let (b, i) = (k / x.neurons(), k % x.neurons());
            x.sequence(b, i).iter().map(|&s| s as u32).sum::<u32>() as f32 / steps as f32
        })
        .collect();
    RateVector {
        batch: x.batch(),
        neurons: x.neurons(),
        rates,
    }
}

/// Rates of a time-stacked `[T·B, d]` spike tensor, rejecting non-binary input.
pub fn firing_rate_of(t: &Tensor, steps: usize) -> Result<RateVector> {
    Ok(firing_rate(&SpikeTrain::from_time_major(t, steps)?))
}

/// `z[b, i, t] = 1(u[b, i, t] < r[b, i])`.
pub fn sample_spikes(rates: &RateVector, draw: &SamplerDraw) -> Result<LatentSample> {
    draw.check("sample_spikes", rates)?;
    let steps = draw.steps;
    let mut spikes = SpikeTrain::zeros(rates.batch, rates.neurons, steps);
    for (k, (bits, &r)) in spikes.bits_mut().chunks_mut(steps).zip(&rates.rates).enumerate() {
        let u = &draw.u[k * steps..(k + 1) * steps];
        for (z, &uv) in bits.iter_mut().zip(u) {
            *z = (uv < r) as u8;
        }
    }
    Ok(LatentSample { spikes, seed: draw.seed })
}

/// Surrogate derivative of each neuron's spike count w.r.t. its rate.
///
/// `sample` must come from [`sample_spikes`] with this very draw.
pub fn sampler_backward(sample: &LatentSample, rates: &RateVector, draw: &SamplerDraw, alpha: f32) -> Result<Vec<f32>> {
    if sample.seed != draw.seed {
        return Err(Error::Contract(format!(
            "backward draw seed {} differs from forward seed {}",
            draw.seed, sample.seed
        )));
    }
    draw.check("sampler_backward", rates)?;
    if sample.spikes.steps() != draw.steps {
        return Err(Error::Contract("sample and draw disagree on the time window".into()));
    }
    let mut grad = vec![0.0; rates.rates.len()];
    for (k, g) in grad.iter_mut().enumerate() {
        let (b, i) = (k / rates.neurons, k % rates.neurons);
        let r = rates.rates[k];
        let hits = (0..draw.steps).filter(|&t| (r - draw.at(b, i, t)).abs() < alpha / 2.0).count();
        *g = hits as f32 / alpha;
    }
    Ok(grad)
}

struct PoissonRule {
    rates: Var,
    /// Variates in the output's time-major layout.
    u: Vec<f32>,
    steps: usize,
    alpha: f32,
}

impl Backward for PoissonRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let r = g.value(self.rates).data().to_vec();
        let per = r.len();
        let half = self.alpha / 2.0;
        let inv = 1.0 / self.alpha;
        let buf = g.buffer(self.rates);
        for t in 0..self.steps {
            let (gs, us) = (&grad.data()[t * per..(t + 1) * per], &self.u[t * per..(t + 1) * per]);
            for j in 0..per {
                if (r[j] - us[j]).abs() < half {
                    buf[j] += gs[j] * inv;
                }
            }
        }
    }
}

/// Differentiable sampling of `rates [B×d]` into a time-stacked spike tensor
/// `[T·B×d]`, with the surrogate backward bound to `draw`.
pub fn poisson_sample(tape: &mut Tape, rates: Var, draw: &SamplerDraw, alpha: f32) -> Result<Var> {
    let shape = tape.shape(rates).to_vec();
    if shape != [draw.batch, draw.neurons] {
        return Err(Error::shape("poisson_sample", &shape, &[draw.batch, draw.neurons, draw.steps]));
    }
    let (batch, neurons, steps) = (draw.batch, draw.neurons, draw.steps);
    let r = tape.value(rates).data();
    let mut u = vec![0.0f32; batch * neurons * steps];
    let mut z = vec![0.0f32; u.len()];
    for t in 0..steps {
        for b in 0..batch {
            for i in 0..neurons {
                let k = (t * batch + b) * neurons + i;
                u[k] = draw.at(b, i, t);
                z[k] = (u[k] < r[b * neurons + i]) as u8 as f32;
            }
        }
    }
    let out = Tensor::new([steps * batch, neurons], z).unwrap();
    Ok(tape.push(out, &[rates], PoissonRule { rates, u, steps, alpha }))
}

/// Prior rates `sigmoid(z_n · W + b)` of the bottleneck.
pub fn prior_rates(tape: &mut Tape, noise: Var, weight: Var, bias: Var) -> Result<Var> {
    let pre = tape.matmul(noise, weight)?;
    let pre = tape.add_bias(pre, bias)?;
    Ok(tape.sigmoid(pre))
}

/// Permutes each neuron's time sequence independently; counts are preserved.
pub fn shuffle_time(z: &SpikeTrain, seed: u64) -> SpikeTrain {
    let mut rng = stream(seed);
    let mut out = z.clone();
    let steps = z.steps();
    for seq in out.bits_mut().chunks_mut(steps) {
        seq.shuffle(&mut rng);
    }
    out
}

/// Applies one permutation of the neuron axis, shared by all time steps and
/// all samples of the batch.
pub fn shuffle_length(z: &SpikeTrain, seed: u64) -> SpikeTrain {
    let mut rng = stream(seed);
    let mut perm: Vec<usize> = (0..z.neurons()).collect();
    perm.shuffle(&mut rng);
    let mut out = z.clone();
    let steps = z.steps();
    for b in 0..z.batch() {
        for (dst, &src) in perm.iter().enumerate() {
            let start = (b * z.neurons() + dst) * steps;
            out.bits_mut()[start..start + steps].copy_from_slice(z.sequence(b, src));
        }
    }
    out
}

/// Flips every bit independently with probability `a`.
pub fn perturb_spikes(z: &SpikeTrain, a: f64, seed: u64) -> Result<SpikeTrain> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Validation(format!("flip probability {a} outside [0, 1]")));
    }
    let mut rng = stream(seed);
    let mut out = z.clone();
    for bit in out.bits_mut() {
        if rng.random_bool(a) {
            *bit ^= 1;
        }
    }
    Ok(out)
}

/// Probability of `n` spikes in `steps` steps at rate `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountLaw {
    /// Exact law of the per-step Bernoulli sampler, `Binomial(steps, r)`.
    pub binomial: f64,
    /// Poisson approximation `(r·T)^n e^{−r·T} / n!`.
    pub poisson: f64,
}

pub fn count_pmf(n: usize, r: f64, steps: usize) -> Result<CountLaw> {
    if n > steps {
        return Err(Error::Validation(format!("{n} spikes cannot occur in {steps} steps")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Validation(format!("rate {r} outside [0, 1]")));
    }
    let ln_choose = ln_factorial(steps) - ln_factorial(n) - ln_factorial(steps - n);
    let binomial = if r == 0.0 || r == 1.0 {
        let certain = if r == 0.0 { 0 } else { steps };
        if n == certain { 1.0 } else { 0.0 }
    } else {
        (ln_choose + n as f64 * r.ln() + (steps - n) as f64 * (1.0 - r).ln()).exp()
    };
    let lambda = r * steps as f64;
    let poisson = if lambda == 0.0 {
        if n == 0 { 1.0 } else { 0.0 }
    } else {
        (n as f64 * lambda.ln() - lambda - ln_factorial(n)).exp()
    };
    Ok(CountLaw { binomial, poisson })
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}
