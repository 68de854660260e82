//! Image metrics used by evaluation and the ablation runner.

use crate::volren::Image;
use crate::{Error, Result};

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "metric",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// PSNR of the pooled squared error over image pairs.
pub fn psnr_set(pairs: &[(&Image, &Image)]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        total += mse(a, b)?;
    }
    let m = total / pairs.len().max(1) as f64;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean absolute per-pixel, per-channel difference.
pub fn mean_abs_diff(a: &Image, b: &Image) -> Result<f64> {
    a.mean_abs_diff(b)
}

/// Identity drift: mean absolute difference between paired renders taken
/// before and after an edit.
pub fn identity_drift(before: &[Image], after: &[Image]) -> Result<f64> {
    if before.len() != after.len() || before.is_empty() {
        return Err(Error::invalid("identity drift needs equally many, non-empty render sets"));
    }
    let mut s = 0.0;
    for (a, b) in before.iter().zip(after) {
        s += mean_abs_diff(a, b)?;
    }
    Ok(s / before.len() as f64)
}

/// Channel dominance: mean of `blue - red` over every pixel. Positive for
/// cool-dominated images, negative for warm ones; a white background
/// contributes zero.
pub fn channel_dominance(img: &Image) -> f64 {
    let s: f64 = img.pixels().map(|p| p[2] - p[0]).sum();
    s / (img.width * img.height).max(1) as f64
}

pub fn mean_channel_dominance(images: &[Image]) -> f64 {
    images.iter().map(channel_dominance).sum::<f64>() / images.len().max(1) as f64
}

/// Mean colour over pixels with some channel below `threshold`, i.e. the
/// non-background part of an image on white. `None` when nothing qualifies.
pub fn foreground_mean_color(img: &Image, threshold: f64) -> Option<[f64; 3]> {
    let mut m = [0.0; 3];
    let mut n = 0usize;
    for p in img.pixels().filter(|p| p.iter().any(|&v| v < threshold)) {
        for k in 0..3 {
            m[k] += p[k];
        }
        n += 1;
    }
    (n > 0).then(|| m.map(|v| v / n as f64))
}

/// Temporal consistency: mean absolute difference between consecutive
/// frames of a sequence (lower is steadier).
pub fn temporal_consistency(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("temporal consistency needs at least two frames"));
    }
    let mut s = 0.0;
    for w in frames.windows(2) {
        s += mean_abs_diff(&w[0], &w[1])?;
    }
    Ok(s / (frames.len() - 1) as f64)
}

/// High-frequency energy: mean squared 4-neighbour Laplacian of the
/// luminance over interior pixels.
pub fn laplacian_energy(img: &Image) -> f64 {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let lum = |x: usize, y: usize| {
        let p = img.pixel(x, y);
        (p[0] + p[1] + p[2]) / 3.0
    };
    let mut s = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let l = lum(x - 1, y) + lum(x + 1, y) + lum(x, y - 1) + lum(x, y + 1) - 4.0 * lum(x, y);
            s += l * l;
        }
    }
    s / ((w - 2) * (h - 2)) as f64
}

/// Bilinear sample of an image at continuous pixel coordinates (pixel
/// centres at integers), clamped at the border.
pub fn sample_bilinear(img: &Image, u: f64, v: f64) -> [f64; 3] {
    let u = u.clamp(0.0, (img.width - 1) as f64);
    let v = v.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let mut out = [0.0; 3];
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    for k in 0..3 {
        out[k] = (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_mean_skips_background() {
        let mut img = Image::filled(4, 4, [1.0; 3]);
        img.set_pixel(0, 0, [0.2, 0.4, 0.9]);
        img.set_pixel(1, 0, [0.4, 0.6, 0.5]);
        let m = foreground_mean_color(&img, 0.75).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15 && (m[2] - 0.7).abs() < 1e-15);
        assert_eq!(foreground_mean_color(&Image::filled(2, 2, [1.0; 3]), 0.75), None);
    }

    #[test]
    fn psnr_of_known_error() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dominance_sign_follows_palette() {
        assert!(channel_dominance(&Image::filled(2, 2, [0.9, 0.5, 0.2])) < 0.0);
        assert!(channel_dominance(&Image::filled(2, 2, [0.2, 0.5, 0.9])) > 0.0);
        assert_eq!(channel_dominance(&Image::filled(2, 2, [1.0; 3])), 0.0);
    }

    #[test]
    fn laplacian_of_flat_and_checker() {
        assert_eq!(laplacian_energy(&Image::filled(5, 5, [0.3; 3])), 0.0);
        let mut c = Image::filled(5, 5, [0.0; 3]);
        for y in 0..5 {
            for x in 0..5 {
                if (x + y) % 2 == 0 {
                    c.set_pixel(x, y, [1.0; 3]);
                }
            }
        }
        assert!((laplacian_energy(&c) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_hits_pixel_centres() {
        let mut img = Image::filled(3, 2, [0.0; 3]);
        img.set_pixel(1, 1, [1.0, 0.5, 0.25]);
        assert_eq!(sample_bilinear(&img, 1.0, 1.0), [1.0, 0.5, 0.25]);
        assert_eq!(sample_bilinear(&img, 0.5, 1.0), [0.5, 0.25, 0.125]);
    }

    #[test]
    fn temporal_consistency_of_static_sequence_is_zero() {
        let f = vec![Image::filled(3, 3, [0.2; 3]); 4];
        assert_eq!(temporal_consistency(&f).unwrap(), 0.0);
        assert!(temporal_consistency(&f[..1]).is_err());
    }
}
