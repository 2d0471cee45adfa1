//! Fused `softmax(scale · Q Kᵀ) V` over a batch, keeping the weight matrix
//! for the backward pass.

use super::nn::softmax_row;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(L, d)` row-major block to `(d, L)`.
#[inline(always)]
fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

#[inline(always)]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

pub(crate) struct AttentionGrads {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

struct Dims {
    n: usize,
    lq: usize,
    lk: usize,
    dk: usize,
    dv: usize,
}

/// Defines `$name` that runs `$kernel` through an AVX2 build of the same
/// code when the CPU has it. Both builds execute the same IEEE operations
/// in the same order, so results do not depend on the path taken.
macro_rules! dispatched {
    ($name:ident => $kernel:ident($($arg:ident: $ty:ty),*)) => {
        #[allow(clippy::too_many_arguments)]
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                #[allow(clippy::too_many_arguments)]
                fn wide($($arg: $ty),*) {
                    $kernel($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $kernel($($arg),*)
        }
    };
}

dispatched!(forward => forward_kernel(q: &[f32], k: &[f32], v: &[f32], dims: &Dims, scale: f32, probs: &mut [f32], out: &mut [f32]));
dispatched!(backward => backward_kernel(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    g: &[f32],
    dims: &Dims,
    scale: f32,
    grads: &mut AttentionGrads
));

#[inline(always)]
fn forward_kernel(q: &[f32], k: &[f32], v: &[f32], dims: &Dims, scale: f32, probs: &mut [f32], out: &mut [f32]) {
    let &Dims { n, lq, lk, dk, dv } = dims;
    let mut scores = vec![0.0f32; lk];
    for b in 0..n {
        let qb = &q[b * lq * dk..(b + 1) * lq * dk];
        let kt = transpose(&k[b * lk * dk..(b + 1) * lk * dk], lk, dk);
        let vt = transpose(&v[b * lk * dv..(b + 1) * lk * dv], lk, dv);
        for i in 0..lq {
            scores.fill(0.0);
            for (d, &qv) in qb[i * dk..(i + 1) * dk].iter().enumerate() {
                axpy(qv * scale, &kt[d * lk..(d + 1) * lk], &mut scores);
            }
            let row = (b * lq + i) * lk;
            let p = &mut probs[row..row + lk];
            softmax_row(&scores, p);
            for e in 0..dv {
                out[(b * lq + i) * dv + e] = dot(p, &vt[e * lk..(e + 1) * lk]);
            }
        }
    }
}

impl Graph {
    /// Scaled dot-product attention on `(N, Lq, d)`, `(N, Lk, d)`,
    /// `(N, Lk, e)` operands. Returns the `(N, Lq, e)` output and the
    /// `(N, Lq, Lk)` weights; the weights node carries no gradient.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f32) -> Result<(Var, Var)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let dims = match (tq.shape(), tk.shape(), tv.shape()) {
            (&[n, lq, dk], &[n2, lk, dk2], &[n3, lk2, dv]) if n == n2 && n == n3 && dk == dk2 && lk == lk2 => {
                Dims { n, lq, lk, dk, dv }
            }
            (a, b, c) => {
                return Err(Error::Dimension(format!("attention operands disagree: Q {a:?}, K {b:?}, V {c:?}")));
            }
        };
        let Dims { n, lq, lk, dv, .. } = dims;
        let mut probs = vec![0.0f32; n * lq * lk];
        let mut out = vec![0.0f32; n * lq * dv];
        forward(tq.data(), tk.data(), tv.data(), &dims, scale, &mut probs, &mut out);
        let probs = Tensor::new(vec![n, lq, lk], probs)?;
        let out = Tensor::new(vec![n, lq, dv], out)?;
        let rg = self.any_requires_grad(&[q, k, v]);
        let weights = self.push(probs.clone(), Op::Leaf, Vec::new(), false);
        let out = self.push(out, Op::Attention { scale, probs }, vec![q, k, v], rg);
        Ok((out, weights))
    }
}

pub(crate) fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, probs: &Tensor, g: &[f32], scale: f32) -> AttentionGrads {
    let dims = Dims { n: q.shape()[0], lq: q.shape()[1], lk: v.shape()[1], dk: q.shape()[2], dv: v.shape()[2] };
    let mut grads = AttentionGrads { q: vec![0.0; q.len()], k: vec![0.0; k.len()], v: vec![0.0; v.len()] };
    backward(q.data(), k.data(), v.data(), probs.data(), g, &dims, scale, &mut grads);
    grads
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_kernel(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    g: &[f32],
    dims: &Dims,
    scale: f32,
    grads: &mut AttentionGrads,
) {
    let &Dims { n, lq, lk, dk, dv } = dims;
    let mut dp = vec![0.0f32; lk];
    for b in 0..n {
        let qb = &q[b * lq * dk..(b + 1) * lq * dk];
        let kt = transpose(&k[b * lk * dk..(b + 1) * lk * dk], lk, dk);
        let vt = transpose(&v[b * lk * dv..(b + 1) * lk * dv], lk, dv);
        let mut gkt = vec![0.0f32; dk * lk];
        let mut gvt = vec![0.0f32; dv * lk];
        for i in 0..lq {
            let row = (b * lq + i) * lk;
            let p = &probs[row..row + lk];
            let gi = &g[(b * lq + i) * dv..(b * lq + i + 1) * dv];
            dp.fill(0.0);
            for (e, &ge) in gi.iter().enumerate() {
                axpy(ge, &vt[e * lk..(e + 1) * lk], &mut dp);
                axpy(ge, p, &mut gvt[e * lk..(e + 1) * lk]);
            }
            let mean = dot(p, &dp);
            dp.iter_mut().zip(p).for_each(|(d, &pv)| *d = pv * (*d - mean) * scale);
            for d in 0..dk {
                grads.q[(b * lq + i) * dk + d] = dot(&dp, &kt[d * lk..(d + 1) * lk]);
                axpy(qb[i * dk + d], &dp, &mut gkt[d * lk..(d + 1) * lk]);
            }
        }
        grads.k[b * lk * dk..(b + 1) * lk * dk].copy_from_slice(&transpose(&gkt, dk, lk));
        grads.v[b * lk * dv..(b + 1) * lk * dv].copy_from_slice(&transpose(&gvt, dv, lk));
    }
}
