//! GradCam saliency and its aggregation into correlation maps.
//!
//! Maps are plain row-major `f64` grids. The pipeline for one model is:
//! per-image GradCam maps and per-image luminance ("shape") maps, a
//! weighted geometric mean of each set, a windowed Pearson correlation
//! between the two means, and the share of strongly positive and negative
//! pixels in that correlation image.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::image_error;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, TapKind};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const GMEAN_EPSILON: f64 = 1e-6;
pub const DEFAULT_HALFWIDTH: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Map {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Dimension(format!(
                "a {height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Map { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Map { height, width, values: vec![0.0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Map { height, width, values }
    }

    /// Accepts `(H, W)` or `(1, H, W)` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Input(format!("a map needs an (H, W) tensor, got {s:?}"))),
        };
        Map::new(h, w, t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.iter().map(|&v| v as f32).collect())
            .expect("map dimensions are positive")
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn same_shape(&self, other: &Map) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Bilinear resampling with pixel centers at half-integer coordinates.
    pub fn upsample(&self, height: usize, width: usize) -> Map {
        let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    (lo, (lo + 1).min(n_in - 1), src - lo as f64)
                })
                .collect()
        };
        let (ty, tx) = (taps(height, self.height), taps(width, self.width));
        Map::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = ty[y];
            let (x0, x1, fx) = tx[x];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    pub fn save_tnsr(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tensor().to_tnsr_bytes()).map_err(|e| Error::io(path, e))
    }

    /// 8-bit grayscale render mapping `[lo, hi]` linearly onto `[0, 255]`.
    pub fn save_png(&self, path: &Path, lo: f64, hi: f64) -> Result<()> {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = ((self.get(y as usize, x as usize) - lo) / span).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        });
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
    }
}

/// Which convolutional activation GradCam reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    /// The final convolution of every backbone branch; branch maps are
    /// summed before the ReLU.
    LastConv,
    Named(String),
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::Config("empty layer selector".into())),
            "last_conv" => Ok(LayerSelector::LastConv),
            name => Ok(LayerSelector::Named(name.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub map: Map,
    pub source_image_id: String,
    pub target_class: usize,
    pub normalized: bool,
}

impl SaliencyMap {
    /// Scales to a maximum of 1; an all-zero map is left as is.
    pub fn normalize(&mut self) {
        let max = self.map.max();
        if max > 0.0 {
            self.map.values.iter_mut().for_each(|v| *v /= max);
        }
        self.normalized = true;
    }
}

/// `Σ_k α_k A^k` for one `(K, h, w)` activation and its gradient, with
/// `α_k` the spatial mean of the gradient. No ReLU is applied.
pub fn weighted_activation(activation: &Tensor, gradient: &Tensor) -> Result<Map> {
    let (k, h, w) = match activation.shape() {
        [k, h, w] => (*k, *h, *w),
        [1, k, h, w] => (*k, *h, *w),
        s => return Err(Error::Dimension(format!("GradCam needs a (K, h, w) activation, got {s:?}"))),
    };
    if gradient.len() != activation.len() {
        return Err(Error::Dimension(format!(
            "gradient {:?} does not match activation {:?}",
            gradient.shape(),
            activation.shape()
        )));
    }
    let hw = h * w;
    let mut out = Map::zeros(h, w);
    for c in 0..k {
        let a = &activation.data()[c * hw..(c + 1) * hw];
        let g = &gradient.data()[c * hw..(c + 1) * hw];
        let alpha = g.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64;
        out.values.iter_mut().zip(a).for_each(|(o, &v)| *o += alpha * f64::from(v));
    }
    Ok(out)
}

/// `ReLU(Σ_k α_k A^k)`.
pub fn gradcam_map(activation: &Tensor, gradient: &Tensor) -> Result<Map> {
    let mut m = weighted_activation(activation, gradient)?;
    m.values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(m)
}

/// GradCam of one `(3, H, W)` image for `target_class`, using the
/// pre-softmax logit as the class score. The map is upsampled to the image
/// size and not normalized.
pub fn gradcam(
    model: &Model,
    params: &ParamStore,
    image: &Tensor,
    image_id: &str,
    target_class: usize,
    selector: &LayerSelector,
) -> Result<SaliencyMap> {
    let classes = model.config().num_classes;
    if target_class >= classes {
        return Err(Error::Parameter(format!("target class {target_class} out of range for {classes} classes")));
    }
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("GradCam needs a (3, H, W) image, got {s:?}"))),
    };
    let mut ctx = ForwardCtx::inference();
    let x = ctx.graph.constant(image.clone().reshape(&[1, 3, h, w])?);
    let out = model.forward(&mut ctx, params, x)?;
    let mut mask = Tensor::zeros(&[1, classes]);
    mask.data_mut()[target_class] = 1.0;
    let mask = ctx.graph.constant(mask);
    let picked = ctx.graph.mul(out.logits, mask)?;
    let score = ctx.graph.sum(picked);

    let taps: Vec<_> = match selector {
        LayerSelector::LastConv => ctx.taps().iter().filter(|t| t.name.ends_with(".last_conv")).cloned().collect(),
        LayerSelector::Named(name) => ctx.taps().iter().filter(|t| &t.name == name).cloned().collect(),
    };
    if taps.is_empty() {
        let known: Vec<&str> = ctx.taps().iter().map(|t| t.name.as_str()).collect();
        return Err(Error::Config(format!("no activation matches {selector:?}; known layers: {known:?}")));
    }
    if let Some(t) = taps.iter().find(|t| t.kind != TapKind::Conv) {
        return Err(Error::Usage(format!("layer `{}` is not a convolution output", t.name)));
    }
    ctx.graph.backward(score)?;
    let mut total: Option<Map> = None;
    for tap in &taps {
        let act = ctx.graph.value(tap.var);
        let grad = match ctx.graph.grad(tap.var) {
            Some(g) => Tensor::new(act.shape().to_vec(), g.to_vec())?,
            None => Tensor::zeros(act.shape()),
        };
        let m = weighted_activation(act, &grad)?;
        total = Some(match total {
            None => m,
            Some(mut t) if t.same_shape(&m) => {
                t.values.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b);
                t
            }
            Some(t) => {
                return Err(Error::Dimension(format!(
                    "branch activations differ in size: {}x{} vs {}x{}",
                    t.height, t.width, m.height, m.width
                )))
            }
        });
    }
    let mut map = total.expect("at least one tap");
    map.values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(SaliencyMap {
        map: map.upsample(h, w),
        source_image_id: image_id.to_string(),
        target_class,
        normalized: false,
    })
}

/// Per-pixel mean of the three channels of a `(3, H, W)` image.
pub fn shape_map(image: &Tensor) -> Result<Map> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("shape map needs a (3, H, W) image, got {s:?}"))),
    };
    let d = image.data();
    let hw = h * w;
    Ok(Map::from_fn(h, w, |y, x| {
        let i = y * w + x;
        (f64::from(d[i]) + f64::from(d[hw + i]) + f64::from(d[2 * hw + i])) / 3.0
    }))
}

/// Weighted geometric mean `exp(Σ wᵢ ln xᵢ / Σ wᵢ)` per pixel, with values
/// floored at [`GMEAN_EPSILON`] before the logarithm.
pub fn gmean(maps: &[&Map], weights: &[f64]) -> Result<Map> {
    let first = maps.first().ok_or_else(|| Error::Input("gmean needs at least one map".into()))?;
    if weights.len() != maps.len() {
        return Err(Error::Input(format!("{} maps but {} weights", maps.len(), weights.len())));
    }
    if let Some(m) = maps.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::Input(format!(
            "gmean maps differ in shape: {}x{} vs {}x{}",
            first.height, first.width, m.height, m.width
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Parameter(format!("gmean weights must be positive, got {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    let mut log_sum = vec![0.0f64; first.values.len()];
    for (m, &w) in maps.iter().zip(weights) {
        log_sum.iter_mut().zip(&m.values).for_each(|(s, &v)| *s += w * v.max(GMEAN_EPSILON).ln());
    }
    Map::new(first.height, first.width, log_sum.into_iter().map(|s| (s / total).exp()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationImage {
    pub values: Map,
    pub window_halfwidth: usize,
    pub significance_threshold: f64,
}

fn pearson_window(a: &[f64], b: &[f64]) -> f64 {
    let degenerate = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if degenerate(a) || degenerate(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom > 0.0 {
        (sab / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Pearson correlation of the `(2h+1)²` windows around every pixel,
/// clipped at the borders. Windows where either map is constant give 0.
pub fn correlation_image(shape: &Map, saliency: &Map, halfwidth: usize) -> Result<CorrelationImage> {
    if !shape.same_shape(saliency) {
        return Err(Error::Input(format!(
            "correlation maps differ in shape: {}x{} vs {}x{}",
            shape.height, shape.width, saliency.height, saliency.width
        )));
    }
    if halfwidth == 0 {
        return Err(Error::Parameter("correlation halfwidth must be at least 1".into()));
    }
    let (h, w) = (shape.height, shape.width);
    let mut a = Vec::with_capacity((2 * halfwidth + 1).pow(2));
    let mut b = Vec::with_capacity(a.capacity());
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            a.clear();
            b.clear();
            for yy in y.saturating_sub(halfwidth)..=(y + halfwidth).min(h - 1) {
                for xx in x.saturating_sub(halfwidth)..=(x + halfwidth).min(w - 1) {
                    a.push(shape.get(yy, xx));
                    b.push(saliency.get(yy, xx));
                }
            }
            values.push(pearson_window(&a, &b));
        }
    }
    Ok(CorrelationImage {
        values: Map::new(h, w, values)?,
        window_halfwidth: halfwidth,
        significance_threshold: DEFAULT_THRESHOLD,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioScores {
    pub positive: f64,
    pub negative: f64,
    pub neutral: f64,
}

/// Fractions of pixels above `t`, below `-t`, and in between.
pub fn ratio_scores(corr: &CorrelationImage, threshold: f64) -> Result<RatioScores> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!("ratio threshold must lie in (0, 1], got {threshold}")));
    }
    let values = &corr.values.values;
    let n = values.len() as f64;
    let pos = values.iter().filter(|&&v| v > threshold).count();
    let neg = values.iter().filter(|&&v| v < -threshold).count();
    let positive = pos as f64 / n;
    let negative = neg as f64 / n;
    Ok(RatioScores { positive, negative, neutral: (values.len() - pos - neg) as f64 / n })
}

/// JSON record of a ratio computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub positive: f64,
    pub negative: f64,
    pub neutral: f64,
    pub threshold: f64,
    pub halfwidth: usize,
}

impl RatioReport {
    pub fn new(scores: RatioScores, threshold: f64, halfwidth: usize) -> Self {
        RatioReport { positive: scores.positive, negative: scores.negative, neutral: scores.neutral, threshold, halfwidth }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Piecewise-linear jet colormap on `[0, 1]`, from dark blue to dark red.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends `jet(s)` over the image with per-pixel opacity `s`, the saliency
/// clamped to `[0, 1]`; zero saliency leaves a pixel untouched.
pub fn overlay_heatmap(image: &Tensor, saliency: &Map) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("overlay needs a (3, H, W) image, got {s:?}"))),
    };
    if saliency.height != h || saliency.width != w {
        return Err(Error::Input(format!(
            "saliency {}x{} does not match image {h}x{w}",
            saliency.height, saliency.width
        )));
    }
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, &s) in saliency.values.iter().enumerate() {
        let s = s.clamp(0.0, 1.0);
        if s == 0.0 {
            continue;
        }
        let color = jet(s);
        for c in 0..3 {
            let px = &mut d[c * h * w + i];
            *px = ((1.0 - s) * f64::from(*px) + s * color[c]) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_gradcam() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let g = Tensor::full(&[1, 2, 2], 1.0);
        assert_eq!(gradcam_map(&a, &g).unwrap().values, vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn ratio_counting() {
        let corr = CorrelationImage {
            values: Map::new(2, 2, vec![0.6, -0.6, 0.0, 0.2]).unwrap(),
            window_halfwidth: 2,
            significance_threshold: 0.5,
        };
        let r = ratio_scores(&corr, 0.5).unwrap();
        assert_eq!((r.positive, r.negative, r.neutral), (0.25, 0.25, 0.5));
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("last_conv".parse::<LayerSelector>().unwrap(), LayerSelector::LastConv);
        assert!("".parse::<LayerSelector>().is_err());
    }
}
