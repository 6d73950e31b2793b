//! Training objective: pixel MSE plus `lambda · MMD²` between posterior and
//! prior firing-rate batches under an RBF kernel.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Grads, Tape, Tensor, Var};

/// Mean squared error over every element.
pub fn mse_loss(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("mse", x.shape(), y.shape()));
    }
    let n = x.numel().max(1) as f64;
    Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `exp(−‖a − b‖² / (2·sigma2))`.
pub fn rbf_kernel(a: &[f32], b: &[f32], sigma2: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("rbf_kernel", &[a.len()], &[b.len()]));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(format!("kernel bandwidth {sigma2} must be positive")));
    }
    Ok((-sq_dist(a, b) / (2.0 * sigma2)).exp())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] if n > 0 => Ok((n, d)),
        &[0, _] => Err(Error::Validation("MMD needs a nonempty batch".into())),
        s => Err(Error::dim("mmd", format!("expected (batch, dim), got {s:?}"))),
    }
}

fn mean_kernel(a: &[f32], na: usize, b: &[f32], nb: usize, d: usize, sigma2: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..na {
        let x = &a[i * d..(i + 1) * d];
        for j in 0..nb {
            s += (-sq_dist(x, &b[j * d..(j + 1) * d]) / (2.0 * sigma2)).exp();
        }
    }
    s / (na * nb) as f64
}

/// Biased (V-statistic) squared MMD between the rows of `p` and `q`:
/// `mean k(P,P) + mean k(Q,Q) − 2 mean k(P,Q)`.
pub fn mmd_squared(p: &Tensor, q: &Tensor, sigma2: f64) -> Result<f64> {
    let (np, d) = rows(p)?;
    let (nq, dq) = rows(q)?;
    if d != dq {
        return Err(Error::shape("mmd", p.shape(), q.shape()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(format!("kernel bandwidth {sigma2} must be positive")));
    }
    let (pd, qd) = (p.data(), q.data());
    let kpp = mean_kernel(pd, np, pd, np, d, sigma2);
    let kqq = mean_kernel(qd, nq, qd, nq, d, sigma2);
    let kpq = mean_kernel(pd, np, qd, nq, d, sigma2);
    Ok(kpp + kqq - 2.0 * kpq)
}

/// Median of the pairwise squared distances among the rows of `p` and `q`
/// pooled together. Falls back to 1 when every row coincides.
pub fn median_bandwidth(p: &Tensor, q: &Tensor) -> Result<f64> {
    let (np, d) = rows(p)?;
    let (nq, dq) = rows(q)?;
    if d != dq {
        return Err(Error::shape("median_bandwidth", p.shape(), q.shape()));
    }
    let pooled: Vec<&[f32]> = p.data().chunks(d).chain(q.data().chunks(d)).collect();
    let n = np + nq;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Kernel bandwidth policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median heuristic recomputed on every call, treated as a constant.
    Median,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(self, p: &Tensor, q: &Tensor) -> Result<f64> {
        match self {
            Bandwidth::Median => median_bandwidth(p, q),
            Bandwidth::Fixed(s) => Ok(s),
        }
    }
}

struct MseRule {
    a: Var,
    b: Var,
}

impl Backward for MseRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let (x, y) = (g.value(self.a), g.value(self.b));
        let scale = 2.0 * grad.item() / x.numel().max(1) as f32;
        let d: Vec<f32> = x.data().iter().zip(y.data()).map(|(&a, &b)| scale * (a - b)).collect();
        let shape = x.shape().to_vec();
        if g.needs(self.b) {
            g.add(self.b, Tensor::new(shape.clone(), d.iter().map(|v| -v).collect()).unwrap());
        }
        g.add(self.a, Tensor::new(shape, d).unwrap());
    }
}

/// Differentiable [`mse_loss`].
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let value = mse_loss(tape.value(a), tape.value(b))?;
    Ok(tape.push(Tensor::scalar(value as f32), &[a, b], MseRule { a, b }))
}

struct MmdRule {
    p: Var,
    q: Var,
    sigma2: f64,
}

impl MmdRule {
    /// Gradient of `c · Σ_i Σ_j k(x_i, y_j)` w.r.t. every `x_i`, added into `out`.
    fn pair_grad(x: &[f32], y: &[f32], d: usize, sigma2: f64, c: f64, out: &mut [f64]) {
        for (i, xi) in x.chunks(d).enumerate() {
            for yj in y.chunks(d) {
                let k = (-sq_dist(xi, yj) / (2.0 * sigma2)).exp();
                let f = -c * k / sigma2;
                for e in 0..d {
                    out[i * d + e] += f * (xi[e] - yj[e]) as f64;
                }
            }
        }
    }

    fn side(&self, g: &Grads<'_>, own: Var, other: Var, scale: f64) -> Tensor {
        let (x, y) = (g.value(own), g.value(other));
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let m = y.shape()[0];
        let mut acc = vec![0.0f64; n * d];
        // the self term counts each pair twice (k(x_i, x_j) and k(x_j, x_i))
        Self::pair_grad(x.data(), x.data(), d, self.sigma2, 2.0 / (n * n) as f64, &mut acc);
        Self::pair_grad(x.data(), y.data(), d, self.sigma2, -2.0 / (n * m) as f64, &mut acc);
        Tensor::new([n, d], acc.iter().map(|&v| (v * scale) as f32).collect()).unwrap()
    }
}

impl Backward for MmdRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let scale = grad.item() as f64;
        if g.needs(self.p) {
            let t = self.side(g, self.p, self.q, scale);
            g.add(self.p, t);
        }
        if g.needs(self.q) {
            let t = self.side(g, self.q, self.p, scale);
            g.add(self.q, t);
        }
    }
}

/// Differentiable [`mmd_squared`]; `sigma2` is held constant.
pub fn mmd_rbf(tape: &mut Tape, p: Var, q: Var, sigma2: f64) -> Result<Var> {
    let value = mmd_squared(tape.value(p), tape.value(q), sigma2)?;
    Ok(tape.push(Tensor::scalar(value as f32), &[p, q], MmdRule { p, q, sigma2 }))
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub mse: f64,
    pub mmd2: f64,
    pub total: f64,
    pub lambda: f64,
    pub sigma2: f64,
}

/// `mse(recon, target) + lambda · mmd²(posterior, prior)`, to be minimized.
pub fn total_loss(
    tape: &mut Tape,
    recon: Var,
    target: Var,
    posterior: Var,
    prior: Var,
    lambda: f64,
    bandwidth: Bandwidth,
) -> Result<(Var, LossReport)> {
    let sigma2 = bandwidth.resolve(tape.value(posterior), tape.value(prior))?;
    let rec = mse(tape, recon, target)?;
    let reg = mmd_rbf(tape, posterior, prior, sigma2)?;
    let weighted = tape.scale(reg, lambda as f32);
    let total = tape.add(rec, weighted)?;
    let (mse, mmd2) = (tape.value(rec).item() as f64, tape.value(reg).item() as f64);
    Ok((
        total,
        LossReport {
            mse,
            mmd2,
            total: mse + lambda * mmd2,
            lambda,
            sigma2,
        },
    ))
}
