//! Convolution and pooling over NCHW tensors.

use super::linalg::{gemm, Mat};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` is inside
/// `[0, w)`.
fn valid_range(geo: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = geo.pad.saturating_sub(kj).div_ceil(geo.stride);
    let hi = ((geo.w + geo.pad).saturating_sub(kj)).div_ceil(geo.stride).min(geo.ow);
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], geo: &ConvGeom, cols: &mut [f32]) {
    let p = geo.positions();
    for ci in 0..geo.c {
        let plane = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (ci * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(geo, kj);
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
                    if iy < 0 || iy >= geo.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * geo.stride + kj - geo.pad;
                    if geo.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(geo.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], geo: &ConvGeom, dx: &mut [f32]) {
    let p = geo.positions();
    for ci in 0..geo.c {
        let plane = &mut dx[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (ci * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(geo, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * geo.stride + kj - geo.pad;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    let line = &src[oy * geo.ow + lo..oy * geo.ow + hi];
                    for (d, &s) in dst[start..].iter_mut().step_by(geo.stride).zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(input), self.value(kernel));
        let (&[n, c, h, w], &[o, ci, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(Error::Dimension(format!(
                "conv2d needs NCHW input and OIHW kernel, got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            )));
        };
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        if c != ci || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d input {:?} is incompatible with kernel {:?} (stride {stride}, padding {padding})",
                tx.shape(),
                tk.shape()
            )));
        }
        let geo = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            pad: padding,
        };
        let (kk, p) = (geo.patch(), geo.positions());
        let mut cols = vec![0.0; n * kk * p];
        let mut out = vec![0.0; n * o * p];
        let weight = Mat::new(tk.data(), o, kk);
        for s in 0..n {
            let col = &mut cols[s * kk * p..(s + 1) * kk * p];
            im2col(&tx.data()[s * c * h * w..(s + 1) * c * h * w], &geo, col);
            gemm(weight, Mat::new(col, kk, p), &mut out[s * o * p..(s + 1) * o * p], 0.0);
        }
        let out = Tensor::new(vec![n, o, geo.oh, geo.ow], out)?;
        let rg = self.any_requires_grad(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d { stride, padding, cols }, vec![input, kernel], rg))
    }

    /// Adds a per-channel bias `(C)` to an `(N, C, ...)` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(input), self.value(bias));
        if tx.rank() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::Dimension(format!(
                "channel bias {:?} does not fit input {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let b = tb.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[(i / inner) % c]);
        let rg = self.any_requires_grad(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias, vec![input, bias], rg))
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = pool_dims(self.value(input), window)?;
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input).data();
        let norm = 1.0 / (window * window) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.chunks_exact(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..window {
                        let row = (oy * window + dy) * w + ox * window;
                        acc += plane[row..row + window].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out.push((acc * norm) as f32);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_requires_grad(&[input]);
        Ok(self.push(out, Op::AvgPool { window }, vec![input], rg))
    }

    /// Max pooling; backward routes each gradient to the first maximal input.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = pool_dims(self.value(input), window)?;
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for (pi, plane) in x.chunks_exact(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (oy * window + dy) * w + ox * window + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push((pi * h * w + best_idx) as u32);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_requires_grad(&[input]);
        Ok(self.push(out, Op::MaxPool { argmax }, vec![input], rg))
    }
}

fn pool_dims(t: &Tensor, window: usize) -> Result<(usize, usize, usize, usize)> {
    let &[n, c, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("pooling needs an NCHW tensor, got {:?}", t.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Dimension(format!(
            "spatial dims {h}x{w} are not divisible by pooling window {window}"
        )));
    }
    Ok((n, c, h, w))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x_shape: &[usize],
    kernel: &Tensor,
    cols: &[f32],
    g: &[f32],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let geo = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        oh: out_shape[2],
        ow: out_shape[3],
        stride,
        pad: padding,
    };
    let (kk, p) = (geo.patch(), geo.positions());
    let mut gw = need_w.then(|| vec![0.0; o * kk]);
    let mut gx = need_x.then(|| vec![0.0; n * c * h * w]);
    let mut dcol = if need_x { vec![0.0; kk * p] } else { Vec::new() };
    for s in 0..n {
        let gs = Mat::new(&g[s * o * p..(s + 1) * o * p], o, p);
        if let Some(gw) = gw.as_mut() {
            let col = Mat::new(&cols[s * kk * p..(s + 1) * kk * p], kk, p);
            gemm(gs, col.t(), gw, if s == 0 { 0.0 } else { 1.0 });
        }
        if let Some(gx) = gx.as_mut() {
            gemm(Mat::new(kernel.data(), o, kk).t(), gs, &mut dcol, 0.0);
            col2im(&dcol, &geo, &mut gx[s * c * h * w..(s + 1) * c * h * w]);
        }
    }
    (gx, gw)
}

pub(crate) fn channel_bias_backward(g: &[f32], shape: &[usize]) -> Vec<f32> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut acc = vec![0.0f64; c];
    for (i, chunk) in g.chunks_exact(inner).enumerate() {
        acc[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn avg_pool_backward(g: &[f32], src: &[usize], window: usize) -> Vec<f32> {
    let (h, w) = (src[2], src[3]);
    let (oh, ow) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f32;
    let mut out = vec![0.0; src.iter().product()];
    for (plane, gp) in out.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = gp[(y / window) * ow + x / window] * norm;
            }
        }
    }
    out
}
