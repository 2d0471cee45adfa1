//! Activations, normalization, dropout and the classification loss.

use rand::Rng;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel batch mean and (biased) variance from a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let rg = self.any_requires_grad(&[x]);
        self.push(out, Op::Relu, vec![x], rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} is invalid for shape {:?}",
                t.shape()
            )));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        if inner == 1 {
            for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                softmax_row(row, dst);
            }
        } else {
            let mut row = vec![0.0f32; dim];
            let mut dst = vec![0.0f32; dim];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| o * dim * inner + d * inner + i;
                    row.iter_mut().enumerate().for_each(|(d, r)| *r = src[at(d)]);
                    softmax_row(&row, &mut dst);
                    dst.iter().enumerate().for_each(|(d, &v)| out[at(d)] = v);
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Softmax { axis }, vec![x], rg))
    }

    /// Batch normalization over axis 1 of an `(N, C, ...)` tensor.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() < 2 {
            return Err(Error::Dimension(format!("batchnorm needs (N, C, ...), got {:?}", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let inner: usize = tx.shape()[2..].iter().product();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::Dimension(format!(
                "batchnorm affine params {:?}/{:?} do not fit {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batchnorm eps must be positive, got {eps}")));
        }
        let data = tx.data();
        let count = (n * inner) as f64;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for (k, chunk) in data.chunks_exact(inner).enumerate() {
                    mean[k % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (k, chunk) in data.chunks_exact(inner).enumerate() {
                    let m = mean[k % c];
                    var[k % c] += chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.iter().map(|&v| v as f32).collect(),
                    var: var.iter().map(|&v| v as f32).collect(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "running statistics of length {}/{} do not match {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let mut xhat = vec![0.0f32; data.len()];
        let mut out = vec![0.0f32; data.len()];
        let (gd, bd) = (tg.data(), tb.data());
        for (k, (chunk, (xh, o))) in data
            .chunks_exact(inner)
            .zip(xhat.chunks_exact_mut(inner).zip(out.chunks_exact_mut(inner)))
            .enumerate()
        {
            let ch = k % c;
            let m = mean[ch] as f32;
            for ((&v, xh), o) in chunk.iter().zip(xh).zip(o) {
                *xh = (v - m) * inv_std[ch];
                *o = *xh * gd[ch] + bd[ch];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let training = stats.is_some();
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let var = self.push(
            out,
            Op::BatchNorm { xhat, inv_std, training },
            vec![x, gamma, beta],
            rg,
        );
        Ok((var, stats))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 − rate)`. With
    /// `training == false` the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..t.len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * mask[i]);
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Dropout { mask }, vec![x], rg))
    }

    /// Mean binary cross-entropy over every entry of an `(N, C)` probability
    /// matrix against one-hot targets.
    pub fn bce_loss(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let tp = self.value(probs);
        if tp.rank() != 2 || tp.shape() != targets.shape() {
            return Err(Error::Dimension(format!(
                "bce_loss needs matching (N, C) tensors, got {:?} and {:?}",
                tp.shape(),
                targets.shape()
            )));
        }
        let cols = tp.shape()[1];
        for (row, t) in targets.data().chunks_exact(cols).enumerate() {
            let ones = t.iter().filter(|&&v| v == 1.0).count();
            let zeros = t.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != cols - 1 {
                return Err(Error::Input(format!("label row {row} is not one-hot: {t:?}")));
            }
        }
        let clamped: Vec<f32> = tp
            .data()
            .iter()
            .map(|&p| (p as f64).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON) as f32)
            .collect();
        let total: f64 = tp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = (p as f64).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                let y = y as f64;
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / tp.len() as f64;
        let rg = self.any_requires_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Bce { targets: targets.data().to_vec(), clamped },
            vec![probs],
            rg,
        ))
    }
}

/// Branch-free `exp` (Cody-Waite reduction plus a degree-6 polynomial), good
/// to about 2 ulp and vectorizable.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.3, 88.3);
    let k = x * std::f32::consts::LOG2_E + ROUND;
    let n = k - ROUND;
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1) * r
        + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `k` hold `n` in two's complement.
    y * f32::from_bits(k.to_bits().wrapping_add(127) << 23)
}

#[inline(always)]
fn lane_max(v: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            if x > *a {
                *a = x;
            }
        }
    }
    tail.iter().chain(&acc).copied().fold(f32::NEG_INFINITY, f32::max)
}

#[inline(always)]
fn lane_sum(v: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += f64::from(x);
        }
    }
    acc.iter().sum::<f64>() + tail.iter().map(|&x| f64::from(x)).sum::<f64>()
}

#[inline(always)]
pub(crate) fn lane_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += f64::from(x[i]) * f64::from(y[i]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Exponentials in f32 after max subtraction; the normalizer is summed in
/// f64.
#[inline(always)]
pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = lane_max(row);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = exp_f32(v - max);
    }
    let inv = (1.0 / lane_sum(out)) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn softmax_backward(y: &[f32], g: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, dim, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; y.len()];
    if inner == 1 {
        for ((yr, gr), or) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
            let dot = lane_dot(yr, gr) as f32;
            for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - dot);
            }
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| o * dim * inner + d * inner + i;
            let dot: f64 = (0..dim).map(|d| g[at(d)] as f64 * y[at(d)] as f64).sum();
            for d in 0..dim {
                out[at(d)] = (y[at(d)] as f64 * (g[at(d)] as f64 - dot)) as f32;
            }
        }
    }
    out
}

pub(crate) fn batchnorm_backward(
    g: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    shape: &[usize],
    training: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let count = (shape[0] * inner) as f64;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (k, (gc, xc)) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
        sum_g[k % c] += gc.iter().map(|&v| v as f64).sum::<f64>();
        sum_gx[k % c] += gc.iter().zip(xc).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
    }
    let mut gx = vec![0.0f32; g.len()];
    for (k, ((gc, xc), out)) in g
        .chunks_exact(inner)
        .zip(xhat.chunks_exact(inner))
        .zip(gx.chunks_exact_mut(inner))
        .enumerate()
    {
        let ch = k % c;
        let scale = gamma[ch] as f64 * inv_std[ch] as f64;
        if training {
            let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
            for ((&gv, &xv), o) in gc.iter().zip(xc).zip(out) {
                *o = (scale * (gv as f64 - mg - xv as f64 * mgx)) as f32;
            }
        } else {
            for (&gv, o) in gc.iter().zip(out) {
                *o = (scale * gv as f64) as f32;
            }
        }
    }
    let ggamma = sum_gx.iter().map(|&v| v as f32).collect();
    let gbeta = sum_g.iter().map(|&v| v as f32).collect();
    (gx, ggamma, gbeta)
}

pub(crate) fn bce_backward(upstream: f32, probs: &[f32], clamped: &[f32], targets: &[f32]) -> Vec<f32> {
    let scale = upstream as f64 / probs.len() as f64;
    probs
        .iter()
        .zip(clamped)
        .zip(targets)
        .map(|((&p, &pc), &y)| {
            if p != pc {
                return 0.0;
            }
            let (pc, y) = (pc as f64, y as f64);
            (scale * (pc - y) / (pc * (1.0 - pc))) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_and_relu() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let y = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(y);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        assert!(matches!(g.softmax(x, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(&[3, 5], |i| i as f32 * 0.37);
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(g.value(y), &t);
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(g.dropout(x, -0.1, true, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let label = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let l = g.bce_loss(half, &label).unwrap();
        assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
        let exact = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let l = g.bce_loss(exact, &label).unwrap();
        assert!(g.value(l).data()[0] >= 0.0);
        assert!(g.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn bce_rejects_non_one_hot() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 2], 0.5));
        let bad = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(g.bce_loss(p, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i * i) as f32));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g.batchnorm(x, gamma, beta, 1e-5, BatchNormMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), 2);
        let y = g.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..4).map(move |k| (n, k)))
                .map(|(n, k)| y.data()[n * 8 + ch * 4 + k] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
