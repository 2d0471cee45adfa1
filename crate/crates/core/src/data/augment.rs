use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ZCA_EPSILON: f64 = 1e-2;
const MAX_ROTATION_DEG: f64 = 15.0;
const SHIFT_PER_512: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Rotate,
    WidthShift,
    HeightShift,
    Zca,
    Noise,
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(AugmentKind::Rotate),
            "width_shift" => Ok(AugmentKind::WidthShift),
            "height_shift" => Ok(AugmentKind::HeightShift),
            "zca" => Ok(AugmentKind::Zca),
            "noise" => Ok(AugmentKind::Noise),
            other => Err(Error::Parameter(format!("unknown augmentation `{other}`"))),
        }
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Input(format!("augmentation needs a (C, H, W) image, got {s:?}"))),
    }
}

/// Rotates about the image centre by `degrees` (counter-clockwise), with
/// bilinear sampling and zero fill.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let p = |yy: isize, xx: isize| {
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        f64::from(plane[yy as usize * w + xx as usize])
                    }
                };
                let top = p(y0, x0) * (1.0 - fx) + if fx > 0.0 { p(y0, x0 + 1) * fx } else { 0.0 };
                let bottom = if fy > 0.0 {
                    p(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { p(y0 + 1, x0 + 1) * fx } else { 0.0 }
                } else {
                    0.0
                };
                dst[ch * h * w + y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Ok(out)
}

/// Translates by whole pixels (`dx` right, `dy` down) with zero fill.
pub fn shift(image: &Tensor, dx: isize, dy: isize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if sx >= 0 && sx < w as isize {
                    dst[ch * h * w + (y as usize) * w + x as usize] = src[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Largest shift in pixels for an image side, keeping the 20-in-512 ratio.
pub fn max_shift(side: usize) -> isize {
    (SHIFT_PER_512 * side as f64 / 512.0).floor() as isize
}

/// ZCA whitening of the per-pixel channel vector, fitted on a batch.
///
/// Channels are standardized first; the whitening matrix is
/// `U diag(1/sqrt(λ + ε)) Uᵀ` of the standardized channel covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaTransform {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub whitening: [[f64; 3]; 3],
}

impl ZcaTransform {
    pub fn fit(images: &[&Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input("ZCA needs at least one image".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [[0.0f64; 3]; 3];
        let mut n = 0usize;
        for img in images {
            let (c, h, w) = dims(img)?;
            if c != 3 {
                return Err(Error::Input(format!("ZCA needs 3-channel images, got {c}")));
            }
            let d = img.data();
            let hw = h * w;
            for i in 0..hw {
                let v = [d[i], d[hw + i], d[2 * hw + i]].map(f64::from);
                for a in 0..3 {
                    sum[a] += v[a];
                    for b in 0..3 {
                        sq[a][b] += v[a] * v[b];
                    }
                }
            }
            n += hw;
        }
        let n = n as f64;
        let mean = sum.map(|s| s / n);
        let cov = Matrix3::from_fn(|a, b| sq[a][b] / n - mean[a] * mean[b]);
        let std = [0, 1, 2].map(|a| {
            let s = cov[(a, a)].max(0.0).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        let corr = Matrix3::from_fn(|a, b| cov[(a, b)] / (std[a] * std[b]));
        let eig = SymmetricEigen::new(corr);
        let scale = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + ZCA_EPSILON).sqrt()));
        let wm = eig.eigenvectors * scale * eig.eigenvectors.transpose();
        Ok(ZcaTransform { mean, std, whitening: [0, 1, 2].map(|a| [0, 1, 2].map(|b| wm[(a, b)])) })
    }

    fn map_pixels(&self, image: &Tensor, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Result<Tensor> {
        let (c, h, w) = dims(image)?;
        if c != 3 {
            return Err(Error::Input(format!("ZCA needs 3-channel images, got {c}")));
        }
        let wm = Matrix3::from_fn(|a, b| self.whitening[a][b]);
        let hw = h * w;
        let src = image.data();
        let mut out = Tensor::zeros(image.shape());
        let dst = out.data_mut();
        for i in 0..hw {
            let z = Vector3::from_fn(|a, _| (f64::from(src[a * hw + i]) - self.mean[a]) / self.std[a]);
            let y = f(wm * z);
            for a in 0..3 {
                dst[a * hw + i] = y[a] as f32;
            }
        }
        Ok(out)
    }

    /// Whitened channel values (zero mean, near-identity covariance over the
    /// fitting batch).
    pub fn whiten(&self, image: &Tensor) -> Result<Tensor> {
        self.map_pixels(image, |v| v)
    }

    /// Whitens, then maps back to the original channel means and scales and
    /// clamps to `[0, 1]`.
    pub fn recolor(&self, image: &Tensor) -> Result<Tensor> {
        self.map_pixels(image, |v| Vector3::from_fn(|a, _| (v[a] * self.std[a] + self.mean[a]).clamp(0.0, 1.0)))
    }
}

/// Augmentation settings shared across one training fold.
#[derive(Clone, Debug, Default)]
pub struct Augmenter {
    pub zca: Option<ZcaTransform>,
    pub noise_sigma: f32,
}

impl Augmenter {
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor, kind: AugmentKind, rng: &mut R) -> Result<Tensor> {
        let (_, h, w) = dims(image)?;
        match kind {
            AugmentKind::Rotate => rotate(image, rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
            AugmentKind::WidthShift => {
                let m = max_shift(w);
                shift(image, rng.random_range(-m as i64..=m as i64) as isize, 0)
            }
            AugmentKind::HeightShift => {
                let m = max_shift(h);
                shift(image, 0, rng.random_range(-m as i64..=m as i64) as isize)
            }
            AugmentKind::Zca => match &self.zca {
                Some(t) => t.recolor(image),
                None => ZcaTransform::fit(&[image])?.recolor(image),
            },
            AugmentKind::Noise => {
                let noise = Normal::new(0.0, f64::from(self.noise_sigma))
                    .map_err(|e| Error::Parameter(format!("noise sigma: {e}")))?;
                let mut out = image.clone();
                for v in out.data_mut() {
                    *v = (f64::from(*v) + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
                Ok(out)
            }
        }
    }

    /// Rotation, width shift, height shift and ZCA recoloring in sequence.
    pub fn random_variant<R: Rng + ?Sized>(&self, image: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut x = image.clone();
        for kind in [AugmentKind::Rotate, AugmentKind::WidthShift, AugmentKind::HeightShift, AugmentKind::Zca] {
            x = self.apply(&x, kind, rng)?;
        }
        Ok(x)
    }
}

/// Single augmentation with default settings. ZCA is fitted on the image
/// itself.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, kind: AugmentKind, rng: &mut R) -> Result<Tensor> {
    Augmenter::default().apply(image, kind, rng)
}
