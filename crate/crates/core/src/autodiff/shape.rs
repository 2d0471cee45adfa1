//! Elementwise arithmetic and shape manipulation.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, Op::Add, vec![a, b], rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, Op::Mul, vec![a, b], rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        let rg = self.any_requires_grad(&[x]);
        self.push(out, Op::Scale(factor), vec![x], rg)
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_requires_grad(&[x]);
        self.push(Tensor::scalar(total as f32), Op::Sum, vec![x], rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Reshape, vec![x], rg))
    }

    /// Collapses everything after the leading axis: `(N, ...) -> (N, F)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let f: usize = s[1..].iter().product();
        self.reshape(x, &[n, f])
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[a, b, c] = t.shape() else {
            return Err(Error::Dimension(format!(
                "transpose12 needs a rank-3 tensor, got {:?}",
                t.shape()
            )));
        };
        let out = Tensor::new(vec![a, c, b], transpose12_data(t.data(), a, b, c))?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Transpose12, vec![x], rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of an empty list".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Parameter(format!(
                "concat axis {axis} is invalid for rank {}",
                base.len()
            )));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(Error::Parameter(format!(
                    "concat along axis {axis}: shape {s:?} disagrees with {base:?}"
                )));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_requires_grad(parts);
        Ok(self.push(out, Op::Concat { axis, sizes }, parts.to_vec(), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_axis(axis, start, len)?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Slice { axis, start }, vec![x], rg))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn transpose12_data(src: &[f32], a: usize, b: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        let s = &src[i * b * c..(i + 1) * b * c];
        let d = &mut out[i * b * c..(i + 1) * b * c];
        for j in 0..b {
            for k in 0..c {
                d[k * b + j] = s[j * c + k];
            }
        }
    }
    out
}

pub(crate) fn concat_backward(g: &[f32], out_shape: &[usize], axis: usize, sizes: &[usize]) -> Vec<Vec<f32>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total = out_shape[axis];
    let mut parts: Vec<Vec<f32>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (part, &len) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&g[offset..offset + len * inner]);
            offset += len * inner;
        }
    }
    parts
}

pub(crate) fn slice_backward(g: &[f32], src_shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f32> {
    let outer: usize = src_shape[..axis].iter().product();
    let inner: usize = src_shape[axis + 1..].iter().product();
    let dim = src_shape[axis];
    let mut out = vec![0.0; outer * dim * inner];
    for o in 0..outer {
        let dst = o * dim * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    out
}
