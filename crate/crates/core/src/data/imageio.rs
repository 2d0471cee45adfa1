use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_rgb(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Input(format!("expected a (3, H, W) image, got {s:?}"))),
    }
}

/// Writes a `(3, H, W)` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = check_rgb(image)?;
    let d = image.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads an RGB PNG into a `(3, H, W)` tensor with values `byte / 255`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            d[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(t)
}

/// Bilinear resampling of every channel to `side × side`, with pixel
/// centers at half-integer coordinates.
pub fn resample_image(image: &Tensor, side: usize) -> Result<Tensor> {
    if side < 8 {
        return Err(Error::Input(format!("resample side must be at least 8, got {side}")));
    }
    let (c, h, w) = match image.shape() {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => (*c, *h, *w),
        s => return Err(Error::Input(format!("cannot resample an image of shape {s:?}"))),
    };
    let taps = |n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..side)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / side as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(h), taps(w));
    let src = image.data();
    let mut out = Tensor::zeros(&[c, side, side]);
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |y: usize, x: usize| f64::from(plane[y * w + x]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[ch * side * side + oy * side + ox] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i * 7 % 256) as f32 / 255.0);
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn resample_identity_and_constant() {
        let img = Tensor::from_fn(&[3, 9, 9], |i| (i % 13) as f32 / 13.0);
        let same = resample_image(&img, 9).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let constant = resample_image(&Tensor::full(&[3, 20, 20], 0.4), 11).unwrap();
        assert!(constant.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(resample_image(&img, 4).is_err());
    }
}
