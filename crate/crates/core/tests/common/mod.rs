//! Independent f64 reference implementations and helpers shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use cellattn::autodiff::{Graph, Var};
use cellattn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks stay out of a finite
/// difference stencil.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub forward_err: f64,
    pub grad_err: f64,
}

/// Checks the engine's forward value and input gradients against an f64
/// reference forward differentiated by central differences. The scalar
/// objective is `Σ wᵢ · outᵢ` with fixed random weights.
pub fn grad_check(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut g, &vars);
    let out_value = g.value(out).clone();
    let mut r = rng(seed);
    let weights = uniform(out_value.shape(), -1.0, 1.0, &mut r);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let x64: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let w64 = to_f64(&weights);
    let forward_err = rel_err(&reference(&x64), &to_f64(&out_value), 1e-6);
    let objective = |x: &[Vec<f64>]| reference(x).iter().zip(&w64).map(|(a, b)| a * b).sum::<f64>();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-6;
    for (i, var) in vars.iter().enumerate() {
        let grad = g.grad(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        analytic.extend(grad.iter().map(|&v| f64::from(v)));
        let mut x = x64.clone();
        for j in 0..x[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + h;
            let up = objective(&x);
            x[i][j] = orig - h;
            let down = objective(&x);
            x[i][j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    GradCheck { forward_err, grad_err: rel_err(&analytic, &numeric, 1e-6) }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Loop-form `softmax(Q Kᵀ / √d) V` on row-major `(L, d)` blocks; returns the
/// output and the weight matrix.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], lq: usize, lk: usize, d: usize, e: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; lq * e];
    let mut weights = Vec::with_capacity(lq * lk);
    for i in 0..lq {
        let scores: Vec<f64> =
            (0..lk).map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() * scale).collect();
        let p = softmax(&scores);
        for c in 0..e {
            out[i * e + c] = (0..lk).map(|j| p[j] * v[j * e + c]).sum();
        }
        weights.extend(p);
    }
    (out, weights)
}

/// Multi-head attention with per-head `(d_model, d_head)` projections and an
/// output projection `(heads·d_head, d_model)`.
pub fn multi_head(
    q: &[f64],
    kv: &[f64],
    lq: usize,
    lk: usize,
    d_model: usize,
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[f64],
) -> Vec<f64> {
    let heads = wq.len();
    let dh = d_model / heads;
    let mut joined = vec![0.0; lq * heads * dh];
    for c in 0..heads {
        let qc = matmul(q, &wq[c], lq, d_model, dh);
        let kc = matmul(kv, &wk[c], lk, d_model, dh);
        let vc = matmul(kv, &wv[c], lk, d_model, dh);
        let (y, _) = attention(&qc, &kc, &vc, lq, lk, dh, dh);
        for i in 0..lq {
            for t in 0..dh {
                joined[i * heads * dh + c * dh + t] = y[i * dh + t];
            }
        }
    }
    matmul(&joined, wo, lq, heads * dh, d_model)
}

/// NCHW cross-correlation with an OIHW kernel, zero padding.
pub fn conv2d(x: &[f64], k: &[f64], dims: [usize; 4], kdims: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let [o, _, kh, kw] = kdims;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                    * k[((f * c + ch) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * o + f) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Non-overlapping `window × window` pooling; `max` selects max pooling.
pub fn pool(x: &[f64], dims: [usize; 4], window: usize, max: bool) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let vals = (0..window)
                    .flat_map(|dy| (0..window).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| x[plane * h * w + (y * window + dy) * w + xo * window + dx]);
                out.push(if max {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.sum::<f64>() / (window * window) as f64
                });
            }
        }
    }
    out
}

/// Training-mode batch normalization over axis 1 with biased variance.
pub fn batchnorm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, inner: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|b| (0..inner).map(move |i| (b * c + ch) * inner + i)).collect();
        let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = gamma[ch] * (x[i] - m) / (v + eps).sqrt() + beta[ch];
        }
    }
    out
}

/// Textbook Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Two-sided Student-t tail `2·P(T > |t|)` by Simpson integration of the
/// density over `[0, |t|]`.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let steps = 20_000;
    let hstep = t.abs() / steps as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        s += pdf(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let half = s * hstep / 3.0;
    1.0 - 2.0 * half
}

/// Lanczos log-gamma (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub mod gradients;
pub mod cases;
