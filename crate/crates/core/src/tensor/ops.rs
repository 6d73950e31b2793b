//! Elementwise, reduction, and matrix operations.

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::tape::{Backward, Grads, Tape, Var};
use super::Tensor;

struct AddRule(Var, Var);
impl Backward for AddRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        g.add(self.0, grad.clone());
        g.add(self.1, grad.clone());
    }
}

struct SubRule(Var, Var);
impl Backward for SubRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        g.add(self.0, grad.clone());
        g.add(self.1, grad.map(|x| -x));
    }
}

struct MulRule(Var, Var);
impl Backward for MulRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let (a, b) = (self.0, self.1);
        if g.needs(a) {
            let v: Vec<f32> = grad.data().iter().zip(g.value(b).data()).map(|(&d, &y)| d * y).collect();
            g.add(a, Tensor::new(grad.shape(), v).unwrap());
        }
        if g.needs(b) {
            let v: Vec<f32> = grad.data().iter().zip(g.value(a).data()).map(|(&d, &x)| d * x).collect();
            g.add(b, Tensor::new(grad.shape(), v).unwrap());
        }
    }
}

struct AffineRule(Var, f32);
impl Backward for AffineRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let s = self.1;
        g.add(self.0, grad.map(|d| d * s));
    }
}

struct SigmoidRule(Var);
impl Backward for SigmoidRule {
    fn backward(&self, out: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let v = out.data().iter().zip(grad.data()).map(|(&y, &d)| d * y * (1.0 - y)).collect();
        g.add(self.0, Tensor::new(out.shape(), v).unwrap());
    }
}

struct ReluRule(Var);
impl Backward for ReluRule {
    fn backward(&self, out: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let v = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
            .collect();
        g.add(self.0, Tensor::new(out.shape(), v).unwrap());
    }
}

struct SumRule(Var, f32);
impl Backward for SumRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let d = grad.item() * self.1;
        let shape = g.value(self.0).shape().to_vec();
        g.add(self.0, Tensor::full(shape, d));
    }
}

struct ReshapeRule(Var);
impl Backward for ReshapeRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        g.add(self.0, grad.clone());
    }
}

struct MatMulRule {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}
impl Backward for MatMulRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if g.needs(self.a) {
            // dA = dC · Bᵀ
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, grad.data(), false, g.value(self.b).data(), true, &mut da, false);
            g.add(self.a, Tensor::new([m, k], da).unwrap());
        }
        if g.needs(self.b) {
            // dB = Aᵀ · dC
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, g.value(self.a).data(), true, grad.data(), false, &mut db, false);
            g.add(self.b, Tensor::new([k, n], db).unwrap());
        }
    }
}

struct BiasRule {
    x: Var,
    bias: Var,
    channels: usize,
    inner: usize,
}
impl Backward for BiasRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        g.add(self.x, grad.clone());
        if g.needs(self.bias) {
            let mut db = vec![0.0; self.channels];
            for (i, chunk) in grad.data().chunks(self.inner).enumerate() {
                db[i % self.channels] += chunk.iter().sum::<f32>();
            }
            g.add(self.bias, Tensor::new([self.channels], db).unwrap());
        }
    }
}

struct MeanTimeRule {
    x: Var,
    steps: usize,
}
impl Backward for MeanTimeRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let scale = 1.0 / self.steps as f32;
        let per = grad.numel();
        let buf = g.buffer(self.x);
        for t in 0..self.steps {
            for (d, &s) in buf[t * per..(t + 1) * per].iter_mut().zip(grad.data()) {
                *d += s * scale;
            }
        }
    }
}

struct RepeatTimeRule {
    x: Var,
    steps: usize,
}
impl Backward for RepeatTimeRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let per = grad.numel() / self.steps;
        let buf = g.buffer(self.x);
        for chunk in grad.data().chunks(per) {
            for (d, &s) in buf.iter_mut().zip(chunk) {
                *d += s;
            }
        }
    }
}

struct SoftmaxXentRule {
    logits: Var,
    probs: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}
impl Backward for SoftmaxXentRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let n = self.labels.len();
        let scale = grad.item() / n as f32;
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * self.classes + y] -= 1.0;
        }
        d.iter_mut().for_each(|x| *x *= scale);
        g.add(self.logits, Tensor::new([n, self.classes], d).unwrap());
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let v = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), v).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], AddRule(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], SubRule(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], MulRule(a, b)))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], AffineRule(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, &[x], SigmoidRule(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, &[x], ReluRule(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), &[x], SumRule(x, 1.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar((s / n as f64) as f32), &[x], SumRule(x, 1.0 / n as f32))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], ReshapeRule(x)))
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut c, false);
        let out = Tensor::new([m, n], c).unwrap();
        Ok(self.push(out, &[a, b], MatMulRule { a, b, m, k, n }))
    }

    /// Adds a per-channel bias along axis 1 of a rank ≥ 2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, &[x, bias], BiasRule { x, bias, channels, inner }))
    }

    /// Average of a time-stacked tensor `[steps·B, …] → [B, …]`.
    pub fn mean_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if steps == 0 || shape.is_empty() || !shape[0].is_multiple_of(steps) {
            return Err(Error::dim("mean_time", format!("leading axis of {shape:?} not divisible by {steps}")));
        }
        let mut out_shape = shape.clone();
        out_shape[0] /= steps;
        let per: usize = out_shape.iter().product();
        let src = self.value(x).data();
        let mut acc = vec![0.0f32; per];
        for chunk in src.chunks(per) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        let inv = 1.0 / steps as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        let out = Tensor::new(out_shape, acc).unwrap();
        Ok(self.push(out, &[x], MeanTimeRule { x, steps }))
    }

    /// Stack `steps` copies along the leading axis, `[B, …] → [steps·B, …]`.
    pub fn repeat_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::dim("repeat_time", "zero steps"));
        }
        let src = self.value(x);
        let mut shape = src.shape().to_vec();
        shape[0] *= steps;
        let mut data = Vec::with_capacity(src.numel() * steps);
        for _ in 0..steps {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::new(shape, data).unwrap();
        Ok(self.push(out, &[x], RepeatTimeRule { x, steps }))
    }

    /// Mean softmax cross-entropy of `logits [n×classes]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * classes..(i + 1) * classes];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                probs[i * classes + c] = (v - mx).exp() / denom;
            }
            loss += (denom.ln() - (row[y] - mx)) as f64;
        }
        let n = labels.len().max(1);
        let out = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            out,
            &[logits],
            SoftmaxXentRule {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
        ))
    }
}
