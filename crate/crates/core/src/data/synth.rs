use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, save_png, DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "cellattn-synth-1";

/// Parameters of the two-class cell generator. Lengths are expressed for a
/// 64-pixel image and scale with `image_side`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_normal: usize,
    pub n_meta: usize,
    pub image_side: usize,
    /// Inclusive range of green filament curves in normal cells.
    pub curve_count_normal: (usize, usize),
    pub curve_count_meta: (usize, usize),
    pub nucleus_intensity: f32,
    pub actin_intensity: f32,
    pub vimentin_intensity: f32,
    /// Radial spread of the red texture beyond the nucleus, per class.
    pub vimentin_spread_normal: (f32, f32),
    pub vimentin_spread_meta: (f32, f32),
    pub noise_sigma: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_normal: 100,
            n_meta: 120,
            image_side: 64,
            curve_count_normal: (6, 9),
            curve_count_meta: (4, 5),
            nucleus_intensity: 0.8,
            actin_intensity: 0.8,
            vimentin_intensity: 0.9,
            vimentin_spread_normal: (2.5, 4.0),
            vimentin_spread_meta: (9.0, 13.0),
            noise_sigma: 0.03,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_meta == 0 {
            return Err(Error::Config(format!(
                "both classes need at least one image (n_normal = {}, n_meta = {})",
                self.n_normal, self.n_meta
            )));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image_side must be at least 8, got {}", self.image_side)));
        }
        for (name, v) in [
            ("nucleus_intensity", self.nucleus_intensity),
            ("actin_intensity", self.actin_intensity),
            ("vimentin_intensity", self.vimentin_intensity),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, (lo, hi)) in [("curve_count_normal", self.curve_count_normal), ("curve_count_meta", self.curve_count_meta)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} must be a non-empty positive range, got {lo}..={hi}")));
            }
        }
        for (name, (lo, hi)) in [
            ("vimentin_spread_normal", self.vimentin_spread_normal),
            ("vimentin_spread_meta", self.vimentin_spread_meta),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} must be a positive range, got {lo}..={hi}")));
            }
        }
        Ok(())
    }
}

struct Plane<'a> {
    data: &'a mut [f32],
    side: usize,
}

impl Plane<'_> {
    /// Max-composites an isotropic Gaussian spot.
    fn splat(&mut self, cx: f64, cy: f64, sigma: f64, amp: f64) {
        let r = (3.0 * sigma).ceil() as isize;
        let (ix, iy) = (cx.round() as isize, cy.round() as isize);
        for y in (iy - r).max(0)..=(iy + r).min(self.side as isize - 1) {
            for x in (ix - r).max(0)..=(ix + r).min(self.side as isize - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                let p = &mut self.data[y as usize * self.side + x as usize];
                *p = p.max(v);
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f64 {
    if lo == hi {
        f64::from(lo)
    } else {
        rng.random_range(f64::from(lo)..f64::from(hi))
    }
}

/// Renders one cell. Blue holds an elliptical nucleus, green the boundary
/// filament curves and red a perinuclear texture whose radial spread
/// depends on the class.
pub fn synthesize_cell(cfg: &SyntheticConfig, label: Label, seed: u64) -> Tensor {
    let side = cfg.image_side;
    let s = side as f64 / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(&[3, side, side]);
    let plane_len = side * side;
    let (red, rest) = img.data_mut().split_at_mut(plane_len);
    let (green, blue) = rest.split_at_mut(plane_len);

    let cx = side as f64 / 2.0 + rng.random_range(-3.0..3.0) * s;
    let cy = side as f64 / 2.0 + rng.random_range(-3.0..3.0) * s;

    let a = rng.random_range(6.0..9.0) * s;
    let b = rng.random_range(5.0..7.0) * s;
    let theta = rng.random_range(0.0..PI);
    let amp = f64::from(cfg.nucleus_intensity) * rng.random_range(0.85..1.0);
    let (sin, cos) = theta.sin_cos();
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let r = (u * u + v * v).sqrt();
            blue[y * side + x] = (amp / (1.0 + (8.0 * (r - 1.0)).exp())) as f32;
        }
    }

    let (lo, hi) = match label {
        Label::Normal => cfg.curve_count_normal,
        Label::Metastasizing => cfg.curve_count_meta,
    };
    let curves = rng.random_range(lo..=hi);
    let mut g = Plane { data: green, side };
    for _ in 0..curves {
        let radius = rng.random_range(14.0..24.0) * s;
        let start = rng.random_range(0.0..2.0 * PI);
        let span = rng.random_range(0.5..1.6);
        let (freq, phase) = (rng.random_range(2.0..5.0), rng.random_range(0.0..2.0 * PI));
        let amp = f64::from(cfg.actin_intensity) * rng.random_range(0.7..1.0);
        let steps = (radius * span * 2.0).ceil() as usize + 1;
        for k in 0..=steps {
            let t = start + span * k as f64 / steps as f64;
            let r = radius * (1.0 + 0.08 * (freq * t + phase).sin());
            g.splat(cx + r * t.cos(), cy + r * t.sin(), 0.9 * s, amp);
        }
    }

    let spread = match label {
        Label::Normal => uniform(&mut rng, cfg.vimentin_spread_normal),
        Label::Metastasizing => uniform(&mut rng, cfg.vimentin_spread_meta),
    } * s;
    let base = 0.5 * (a + b);
    let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut r_plane = Plane { data: red, side };
    for _ in 0..60 {
        let angle = rng.random_range(0.0..2.0 * PI);
        let r = base + std_normal.sample(&mut rng).abs() * spread;
        let amp = f64::from(cfg.vimentin_intensity) * rng.random_range(0.5..1.0);
        r_plane.splat(cx + r * angle.cos(), cy + r * angle.sin(), 1.0 * s, amp);
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, f64::from(cfg.noise_sigma)).expect("finite sigma");
        for v in img.data_mut() {
            *v = (f64::from(*v) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

fn image_id(index: usize) -> String {
    format!("cell_{index:04}")
}

/// Generates the dataset in memory: normal cells first, then metastasizing
/// ones. Entries carry no fold yet.
pub fn synthesize_images(cfg: &SyntheticConfig, seed: u64) -> Result<(DatasetManifest, Vec<Tensor>)> {
    cfg.validate()?;
    let labels: Vec<Label> = std::iter::repeat_n(Label::Normal, cfg.n_normal)
        .chain(std::iter::repeat_n(Label::Metastasizing, cfg.n_meta))
        .collect();
    let entries: Vec<ManifestEntry> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = image_id(i);
            ManifestEntry {
                path: PathBuf::from("images").join(format!("{id}.png")),
                image_id: id,
                label,
                fold: None,
                augmented: false,
                parent_id: None,
            }
        })
        .collect();
    let images = entries
        .par_iter()
        .map(|e| synthesize_cell(cfg, e.label, derive_seed(seed, &e.image_id)))
        .collect();
    let manifest = DatasetManifest {
        seed,
        image_side: cfg.image_side,
        generator_version: GENERATOR_VERSION.to_string(),
        entries,
    };
    Ok((manifest, images))
}

/// Writes `images/*.png` under `out_dir` and returns the manifest (not yet
/// saved, so callers can assign folds first).
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let (manifest, images) = synthesize_images(cfg, seed)?;
    let dir = out_dir.join("images");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    manifest
        .entries
        .par_iter()
        .zip(&images)
        .try_for_each(|(e, img)| save_png(img, &out_dir.join(&e.path)))?;
    Ok(manifest)
}
