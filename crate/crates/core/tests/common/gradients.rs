//! Per-primitive gradient checks against f64 references.

use cellattn::autodiff::BatchNormMode;
use cellattn::Tensor;
use rand::Rng;

use super::{away_from_zero, grad_check, rng, uniform, GradCheck};

pub type Case = fn(u64) -> GradCheck;

pub const OPS: &[(&str, Case)] = &[
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("sum", sum),
    ("reshape", reshape),
    ("transpose12", transpose12),
    ("concat", concat),
    ("slice", slice),
    ("matmul", matmul),
    ("bmm", bmm),
    ("bmm_trans", bmm_trans),
    ("dense", dense),
    ("conv2d", conv2d),
    ("channel_bias", channel_bias),
    ("avg_pool2d", avg_pool),
    ("max_pool2d", max_pool),
    ("relu", relu),
    ("softmax", softmax),
    ("attention", attention),
    ("batchnorm_train", batchnorm_train),
    ("batchnorm_eval", batchnorm_eval),
    ("dropout", dropout),
    ("bce_loss", bce),
];

fn dims(seed: u64, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0xd1);
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

fn add(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let s = dims(seed, 2, 1, 5);
    let (a, b) = (uniform(&s, -1.0, 1.0, &mut r), uniform(&s, -1.0, 1.0, &mut r));
    grad_check(&[a, b], |g, v| g.add(v[0], v[1]).unwrap(), |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(), seed)
}

fn mul(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let s = dims(seed, 3, 1, 4);
    let (a, b) = (uniform(&s, -1.0, 1.0, &mut r), uniform(&s, -1.0, 1.0, &mut r));
    grad_check(&[a, b], |g, v| g.mul(v[0], v[1]).unwrap(), |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(), seed)
}

fn scale(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let f: f32 = r.random_range(-3.0..3.0);
    let a = uniform(&dims(seed, 2, 1, 6), -1.0, 1.0, &mut r);
    grad_check(&[a], move |g, v| g.scale(v[0], f), move |x| x[0].iter().map(|a| a * f64::from(f)).collect(), seed)
}

fn sum(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = uniform(&dims(seed, 3, 1, 4), -1.0, 1.0, &mut r);
    grad_check(&[a], |g, v| g.sum(v[0]), |x| vec![x[0].iter().sum()], seed)
}

fn reshape(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let s = dims(seed, 2, 1, 5);
    let a = uniform(&s, -1.0, 1.0, &mut r);
    let flat = [s[0] * s[1]];
    grad_check(&[a], move |g, v| g.reshape(v[0], &flat).unwrap(), |x| x[0].clone(), seed)
}

fn transpose12(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let s = dims(seed, 3, 1, 4);
    let a = uniform(&s, -1.0, 1.0, &mut r);
    grad_check(
        &[a],
        |g, v| g.transpose12(v[0]).unwrap(),
        move |x| (0..s[0]).flat_map(|b| super::transpose(&x[0][b * s[1] * s[2]..(b + 1) * s[1] * s[2]], s[1], s[2])).collect(),
        seed,
    )
}

fn concat(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 4, 1, 4);
    let (n, l, fa, fb) = (d[0], d[1], d[2], d[3]);
    let a = uniform(&[n, l, fa], -1.0, 1.0, &mut r);
    let b = uniform(&[n, l, fb], -1.0, 1.0, &mut r);
    grad_check(
        &[a, b],
        |g, v| g.concat(&[v[0], v[1]], 2).unwrap(),
        move |x| {
            let mut out = Vec::new();
            for row in 0..n * l {
                out.extend_from_slice(&x[0][row * fa..(row + 1) * fa]);
                out.extend_from_slice(&x[1][row * fb..(row + 1) * fb]);
            }
            out
        },
        seed,
    )
}

fn slice(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 3, 2, 5);
    let start = r.random_range(0..d[1] - 1);
    let len = r.random_range(1..=d[1] - start);
    let a = uniform(&d, -1.0, 1.0, &mut r);
    grad_check(
        &[a],
        move |g, v| g.slice(v[0], 1, start, len).unwrap(),
        move |x| {
            let mut out = Vec::new();
            for o in 0..d[0] {
                for i in start..start + len {
                    out.extend_from_slice(&x[0][(o * d[1] + i) * d[2]..(o * d[1] + i + 1) * d[2]]);
                }
            }
            out
        },
        seed,
    )
}

fn matmul(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 3, 1, 6);
    let a = uniform(&[d[0], d[1]], -1.0, 1.0, &mut r);
    let b = uniform(&[d[1], d[2]], -1.0, 1.0, &mut r);
    grad_check(&[a, b], |g, v| g.matmul(v[0], v[1]).unwrap(), move |x| super::matmul(&x[0], &x[1], d[0], d[1], d[2]), seed)
}

fn bmm_case(seed: u64, trans_b: bool) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 4, 1, 4);
    let (bt, m, k, n) = (d[0], d[1], d[2], d[3]);
    let a = uniform(&[bt, m, k], -1.0, 1.0, &mut r);
    let b = if trans_b { uniform(&[bt, n, k], -1.0, 1.0, &mut r) } else { uniform(&[bt, k, n], -1.0, 1.0, &mut r) };
    grad_check(
        &[a, b],
        move |g, v| g.bmm(v[0], v[1], trans_b).unwrap(),
        move |x| {
            (0..bt)
                .flat_map(|i| {
                    let ab = &x[0][i * m * k..(i + 1) * m * k];
                    let bb = &x[1][i * k * n..(i + 1) * k * n];
                    let bb = if trans_b { super::transpose(bb, n, k) } else { bb.to_vec() };
                    super::matmul(ab, &bb, m, k, n)
                })
                .collect()
        },
        seed,
    )
}

fn bmm(seed: u64) -> GradCheck {
    bmm_case(seed, false)
}

fn bmm_trans(seed: u64) -> GradCheck {
    bmm_case(seed, true)
}

fn dense(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 3, 1, 6);
    let x = uniform(&[d[0], d[1]], -1.0, 1.0, &mut r);
    let w = uniform(&[d[1], d[2]], -1.0, 1.0, &mut r);
    let b = uniform(&[d[2]], -1.0, 1.0, &mut r);
    grad_check(
        &[x, w, b],
        |g, v| g.dense(v[0], v[1], v[2]).unwrap(),
        move |x| {
            let mut y = super::matmul(&x[0], &x[1], d[0], d[1], d[2]);
            y.iter_mut().enumerate().for_each(|(i, v)| *v += x[2][i % d[2]]);
            y
        },
        seed,
    )
}

fn conv2d(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=2);
    let c = r.random_range(1..=3);
    let o = r.random_range(1..=3);
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let side = r.random_range(k.max(3)..=6);
    let x = uniform(&[n, c, side, side], -1.0, 1.0, &mut r);
    let kern = uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
    grad_check(
        &[x, kern],
        move |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap(),
        move |x| super::conv2d(&x[0], &x[1], [n, c, side, side], [o, c, k, k], stride, pad),
        seed,
    )
}

fn channel_bias(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 4, 1, 4);
    let x = uniform(&d, -1.0, 1.0, &mut r);
    let b = uniform(&[d[1]], -1.0, 1.0, &mut r);
    let inner = d[2] * d[3];
    grad_check(
        &[x, b],
        |g, v| g.channel_bias(v[0], v[1]).unwrap(),
        move |x| x[0].iter().enumerate().map(|(i, v)| v + x[1][(i / inner) % d[1]]).collect(),
        seed,
    )
}

fn pool_case(seed: u64, max: bool) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=2);
    let c = r.random_range(1..=3);
    let window = r.random_range(1..=3);
    let side = window * r.random_range(1..=3);
    let x = uniform(&[n, c, side, side], -1.0, 1.0, &mut r);
    grad_check(
        &[x],
        move |g, v| if max { g.max_pool2d(v[0], window).unwrap() } else { g.avg_pool2d(v[0], window).unwrap() },
        move |x| super::pool(&x[0], [n, c, side, side], window, max),
        seed,
    )
}

fn avg_pool(seed: u64) -> GradCheck {
    pool_case(seed, false)
}

fn max_pool(seed: u64) -> GradCheck {
    pool_case(seed, true)
}

fn relu(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = away_from_zero(&dims(seed, 2, 1, 6), &mut r);
    grad_check(&[x], |g, v| g.relu(v[0]), |x| x[0].iter().map(|v| v.max(0.0)).collect(), seed)
}

fn softmax(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 3, 1, 5);
    let axis = r.random_range(0..3);
    let x = uniform(&d, -2.0, 2.0, &mut r);
    grad_check(
        &[x],
        move |g, v| g.softmax(v[0], axis).unwrap(),
        move |x| {
            let outer: usize = d[..axis].iter().product();
            let inner: usize = d[axis + 1..].iter().product();
            let mut out = vec![0.0; x[0].len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * d[axis] + k) * inner + i;
                    let p = super::softmax(&(0..d[axis]).map(|k| x[0][at(k)]).collect::<Vec<_>>());
                    (0..d[axis]).for_each(|k| out[at(k)] = p[k]);
                }
            }
            out
        },
        seed,
    )
}

fn attention(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 5, 1, 5);
    let (n, lq, lk, dk, dv) = (d[0].min(3), d[1], d[2], d[3], d[4]);
    let q = uniform(&[n, lq, dk], -1.0, 1.0, &mut r);
    let k = uniform(&[n, lk, dk], -1.0, 1.0, &mut r);
    let v = uniform(&[n, lk, dv], -1.0, 1.0, &mut r);
    let scale = 1.0 / (dk as f32).sqrt();
    grad_check(
        &[q, k, v],
        move |g, vars| g.attention(vars[0], vars[1], vars[2], scale).unwrap().0,
        move |x| {
            (0..n)
                .flat_map(|b| {
                    super::attention(
                        &x[0][b * lq * dk..(b + 1) * lq * dk],
                        &x[1][b * lk * dk..(b + 1) * lk * dk],
                        &x[2][b * lk * dv..(b + 1) * lk * dv],
                        lq,
                        lk,
                        dk,
                        dv,
                    )
                    .0
                })
                .collect()
        },
        seed,
    )
}

fn batchnorm_train(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(2..=3);
    let c = r.random_range(1..=3);
    let side = r.random_range(1..=3);
    let x = uniform(&[n, c, side, side], -1.0, 1.0, &mut r);
    let gamma = uniform(&[c], 0.5, 1.5, &mut r);
    let beta = uniform(&[c], -0.5, 0.5, &mut r);
    grad_check(
        &[x, gamma, beta],
        |g, v| g.batchnorm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train).unwrap().0,
        move |x| super::batchnorm(&x[0], &x[1], &x[2], n, c, side * side, 1e-5),
        seed,
    )
}

fn batchnorm_eval(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let d = dims(seed, 3, 1, 3);
    let (n, c, inner) = (d[0], d[1], d[2]);
    let x = uniform(&[n, c, inner], -1.0, 1.0, &mut r);
    let gamma = uniform(&[c], 0.5, 1.5, &mut r);
    let beta = uniform(&[c], -0.5, 0.5, &mut r);
    let mean: Vec<f32> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f32> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let (m2, v2) = (mean.clone(), var.clone());
    grad_check(
        &[x, gamma, beta],
        move |g, v| g.batchnorm(v[0], v[1], v[2], 1e-5, BatchNormMode::Eval { mean: &m2, var: &v2 }).unwrap().0,
        move |x| {
            x[0].iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = (i / inner) % c;
                    let norm = (v - f64::from(mean[ch])) / (f64::from(var[ch]) + 1e-5).sqrt();
                    x[1][ch] * norm + x[2][ch]
                })
                .collect()
        },
        seed,
    )
}

fn dropout(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = away_from_zero(&dims(seed, 2, 2, 6), &mut r);
    let rate = 0.3f32;
    let mut g = cellattn::autodiff::Graph::new();
    let probe = g.constant(Tensor::full(x.shape(), 1.0));
    let mut mask_rng = rng(seed ^ 0x55);
    let mask = g.dropout(probe, rate, true, &mut mask_rng).unwrap();
    let mask: Vec<f64> = g.value(mask).data().iter().map(|&v| f64::from(v)).collect();
    grad_check(
        &[x],
        move |g, v| g.dropout(v[0], rate, true, &mut rng(seed ^ 0x55)).unwrap(),
        move |x| x[0].iter().zip(&mask).map(|(a, m)| a * m).collect(),
        seed,
    )
}

fn bce(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let c = r.random_range(2..=3);
    let p = uniform(&[n, c], 0.05, 0.95, &mut r);
    let mut t = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let k = r.random_range(0..c);
        t.data_mut()[i * c + k] = 1.0;
    }
    let y: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
    grad_check(
        &[p],
        move |g, v| g.bce_loss(v[0], &t).unwrap(),
        move |x| {
            let total: f64 = x[0].iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum();
            vec![total / x[0].len() as f64]
        },
        seed,
    )
}

fn rgb_loss(model: &cellattn::model::Model, params: &cellattn::params::ParamStore, images: &Tensor, targets: &Tensor) -> (f64, cellattn::layers::ForwardCtx, cellattn::autodiff::Var) {
    let mut ctx = cellattn::layers::ForwardCtx::new(true, 0);
    let x = ctx.graph.constant(images.clone());
    let out = model.forward(&mut ctx, params, x).unwrap();
    let loss = ctx.graph.bce_loss(out.probs, targets).unwrap();
    (f64::from(ctx.graph.value(loss).data()[0]), ctx, loss)
}

/// Small RGB-family model in training mode; analytic parameter gradients
/// against central differences of the engine's own loss on 10 randomly
/// sampled scalar parameters. Returns the norm-wise relative error.
pub fn end_to_end_rgb(seed: u64) -> f64 {
    use cellattn::model::{EncoderConfig, Family, Model};
    let cfg = EncoderConfig { family: Family::Rgb, image_side: 16, mlp_dims: (8, 4), mlp_dropout: 0.0, ..Default::default() };
    let model = Model::new(cfg).unwrap();
    let params = model.init_params(seed);
    let mut r = rng(seed);
    let images = uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
    let targets = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (_, mut ctx, loss) = rgb_loss(&model, &params, &images, &targets);
    ctx.graph.backward(loss).unwrap();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-3f32;
    for _ in 0..10 {
        let name = &names[r.random_range(0..names.len())];
        let idx = r.random_range(0..params.get(name).unwrap().len());
        let var = ctx.graph.bindings().iter().find(|(n, _)| n == name).unwrap().1;
        analytic.push(f64::from(ctx.graph.grad(var).unwrap()[idx]));
        let eval = |delta: f32| {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[idx] += delta;
            rgb_loss(&model, &p, &images, &targets).0
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * f64::from(h)));
    }
    super::rel_err(&analytic, &numeric, 1e-4)
}
