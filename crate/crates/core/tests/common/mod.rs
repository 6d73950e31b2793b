//! Shared test oracles. Independent of the tape: the finite-difference check
//! only evaluates forward passes and sums outputs in `f64`.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikevae::{Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares tape gradients of `Σ w ⊙ f(inputs)` with central differences.
///
/// `f` rebuilds the graph on a fresh tape from leaf inputs. Only inputs whose
/// index is in `check` are perturbed. Returns the worst relative error.
pub fn grad_check(
    inputs: &[Tensor],
    check: &[usize],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    let eval = |values: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };

    let (mut tape, vars, out) = eval(inputs);
    let weights = random_tensor(&mut r, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let objective = |values: &[Tensor]| -> f64 {
        let (tape, _, out) = eval(values);
        tape.value(out).dot(&weights).unwrap()
    };

    let mut worst: f64 = 0.0;
    for &idx in check {
        let analytic: Vec<f64> = tape
            .grad(vars[idx])
            .map(|g| g.data().iter().map(|&v| v as f64).collect())
            .unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[idx].numel() {
            let x = inputs[idx].data()[e];
            let (xp, xm) = (x + FD_STEP, x - FD_STEP);
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] = xp;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] = xm;
            // exact f32 spacing of the two probes
            let h = xp as f64 - xm as f64;
            numeric.push((objective(&plus) - objective(&minus)) / h);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}
