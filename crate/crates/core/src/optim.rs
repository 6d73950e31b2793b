//! AdamW with decoupled weight decay, plain SGD, and global-norm clipping.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamHyper {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamHyper {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update at step `t ≥ 1`: `θ ← θ − lr·wd·θ`, then the
/// bias-corrected adaptive step.
pub fn adamw_step(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: AdamHyper) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adamw_step", &[n], &[grad.len(), m.len(), v.len()]));
    }
    if t == 0 {
        return Err(Error::Contract("AdamW steps are counted from 1".into()));
    }
    let c1 = 1.0 - (h.beta1 as f64).powi(t as i32);
    let c2 = 1.0 - (h.beta2 as f64).powi(t as i32);
    let shrink = 1.0 - h.lr * h.weight_decay;
    for i in 0..n {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mhat = m[i] as f64 / c1;
        let vhat = v[i] as f64 / c2;
        param[i] = param[i] * shrink - (h.lr as f64 * mhat / (vhat.sqrt() + h.eps as f64)) as f32;
    }
    Ok(())
}

/// Moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, step: 0 }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(param: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::shape("sgd_step", &[param.len()], &[grad.len()]));
    }
    param.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![0.3, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, AdamHyper::new(0.1, 0.0)).unwrap();
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, AdamHyper::new(6e-4, 0.0)).unwrap();
        // mhat = 1, vhat = 1, step = lr / (1 + eps)
        let expected = 1.0 - 6e-4 / (1.0 + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = vec![2.0, -4.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let h = AdamHyper::new(0.01, 0.1);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, h).unwrap();
        let s = 1.0 - 0.01f32 * 0.1;
        assert_eq!(p, [2.0 * s, -4.0 * s]);
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, AdamHyper::new(0.1, 0.0)).is_err());
    }
}
