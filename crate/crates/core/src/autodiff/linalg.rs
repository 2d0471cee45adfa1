use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out` with `out` row-major `(m, n)`.
pub(crate) fn gemm(a: Mat, b: Mat, out: &mut [f32], beta: f32) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if n == 1 || k <= 2 {
        return thin_gemm(a, b, out, beta);
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix-vector products and rank-1/rank-2 updates, where the packed
/// kernel spends more time packing than multiplying.
fn thin_gemm(a: Mat, b: Mat, out: &mut [f32], beta: f32) {
    let (m, k) = a.dims();
    let n = b.dims().1;
    if beta == 0.0 {
        out.fill(0.0);
    } else if beta != 1.0 {
        out.iter_mut().for_each(|v| *v *= beta);
    }
    // Row-major copy of b, small because n == 1 or k <= 2.
    let (rsb, csb) = b.strides();
    let bm: Vec<f32> = (0..k * n)
        .map(|i| b.data[(i / n) * rsb as usize + (i % n) * csb as usize])
        .collect();
    if n == 1 {
        if a.transposed {
            // Column j of the logical a is contiguous.
            for (j, &bj) in bm.iter().enumerate() {
                let col = &a.data[j * m..(j + 1) * m];
                out.iter_mut().zip(col).for_each(|(o, &v)| *o += bj * v);
            }
        } else {
            for (o, row) in out.iter_mut().zip(a.data.chunks_exact(k)) {
                *o += row.iter().zip(&bm).map(|(&x, &y)| x * y).sum::<f32>();
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        for (j, brow) in bm.chunks_exact(n).enumerate() {
            let aij = a.data[i * rsa as usize + j * csa as usize];
            orow.iter_mut().zip(brow).for_each(|(o, &v)| *o += aij * v);
        }
    }
}

impl Graph {
    /// `(M, K) · (K, N) -> (M, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::Dimension(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(ta.data(), m, k), Mat::new(tb.data(), k, n), &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul, vec![a, b], rg))
    }

    /// Batched product `(B, M, K) · (B, K, N)`, or `(B, M, K) · (B, N, K)ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[batch, m, k], &[batch2, r, c]) = (ta.shape(), tb.shape()) else {
            return Err(Error::Dimension(format!(
                "bmm needs rank-3 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != k2 {
            return Err(Error::Dimension(format!(
                "bmm operands disagree: {:?} vs {:?} (trans_b={trans_b})",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let am = Mat::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = Mat::new(&tb.data()[i * r * c..(i + 1) * r * c], r, c);
            let bm = if trans_b { bm.t() } else { bm };
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm { trans_b }, vec![a, b], rg))
    }

    /// Affine layer `input · weight + bias` for `(N, D) · (D, M) + (M)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, d], &[d2, m]) = (tx.shape(), tw.shape()) else {
            return Err(Error::Dimension(format!(
                "dense needs (N, D) input and (D, M) weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        };
        if d != d2 || tb.shape() != [m] {
            return Err(Error::Dimension(format!(
                "dense shapes disagree: input {:?}, weight {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out: Vec<f32> = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(Mat::new(tx.data(), n, d), Mat::new(tw.data(), d, m), &mut out, 1.0);
        let out = Tensor::new(vec![n, m], out)?;
        let rg = self.any_requires_grad(&[input, weight, bias]);
        Ok(self.push(out, Op::Dense, vec![input, weight, bias], rg))
    }
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f32], need_a: bool, need_b: bool) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let gm = Mat::new(g, m, n);
    let ga = need_a.then(|| {
        let mut out = vec![0.0; m * k];
        gemm(gm, Mat::new(b.data(), k, n).t(), &mut out, 0.0);
        out
    });
    let gb = need_b.then(|| {
        let mut out = vec![0.0; k * n];
        gemm(Mat::new(a.data(), m, k).t(), gm, &mut out, 0.0);
        out
    });
    (ga, gb)
}

pub(crate) fn bmm_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f32],
    trans_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (r, c) = (b.shape()[1], b.shape()[2]);
    let n = if trans_b { r } else { c };
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for i in 0..batch {
        let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
        let ai = Mat::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bi = Mat::new(&b.data()[i * r * c..(i + 1) * r * c], r, c);
        if let Some(ga) = ga.as_mut() {
            // C = A·op(B)  =>  dA = dC·op(B)ᵀ
            let opb_t = if trans_b { bi } else { bi.t() };
            gemm(gi, opb_t, &mut ga[i * m * k..(i + 1) * m * k], 0.0);
        }
        if let Some(gb) = gb.as_mut() {
            let dst = &mut gb[i * r * c..(i + 1) * r * c];
            if trans_b {
                // C = A·Bᵀ  =>  dB = dCᵀ·A
                gemm(gi.t(), ai, dst, 0.0);
            } else {
                gemm(ai.t(), gi, dst, 0.0);
            }
        }
    }
    (ga, gb)
}

pub(crate) fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f32],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let gm = Mat::new(g, n, m);
    let gx = need_x.then(|| {
        let mut out = vec![0.0; n * d];
        gemm(gm, Mat::new(w.data(), d, m).t(), &mut out, 0.0);
        out
    });
    let gw = need_w.then(|| {
        let mut out = vec![0.0; d * m];
        gemm(Mat::new(x.data(), n, d).t(), gm, &mut out, 0.0);
        out
    });
    let gb = need_b.then(|| {
        let mut acc = vec![0.0f64; m];
        for row in g.chunks_exact(m) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
        }
        acc.into_iter().map(|v| v as f32).collect()
    });
    (gx, gw, gb)
}
