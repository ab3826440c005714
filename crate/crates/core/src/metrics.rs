//! Image statistics used for evaluation and data checks.

use crate::imageio::ImageBuf;
use crate::{Real, Result};

/// Reported when the error is exactly zero.
pub const PSNR_CAP: f64 = 99.0;
/// Mask values above this count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

fn mse_to_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log₁₀(1/MSE)` over the whole image, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &ImageBuf<T>, gt: &ImageBuf<T>) -> Result<f64> {
    pred.check_shape(gt)?;
    let n = pred.data.len().max(1) as f64;
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / n;
    Ok(mse_to_psnr(mse))
}

/// Inclusive bounding box `(x0, y0, x1, y1)` of mask pixels above the threshold.
pub fn foreground_bbox<T: Real>(mask: &ImageBuf<T>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0).to_f64() > FOREGROUND_THRESHOLD {
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    bb
}

/// PSNR restricted to the bounding box of the ground-truth foreground mask.
/// Falls back to the full image when the mask is empty.
pub fn psnr_foreground<T: Real>(
    pred: &ImageBuf<T>,
    gt: &ImageBuf<T>,
    mask: &ImageBuf<T>,
) -> Result<f64> {
    pred.check_shape(gt)?;
    let Some((x0, y0, x1, y1)) = foreground_bbox(mask) else {
        return psnr(pred, gt);
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            for c in 0..pred.channels {
                sum += (pred.get(x, y, c).to_f64() - gt.get(x, y, c).to_f64()).powi(2);
                n += 1;
            }
        }
    }
    Ok(mse_to_psnr(sum / n as f64))
}

/// Variance of the 4-neighbour Laplacian of the luminance, interior pixels only.
pub fn laplacian_variance<T: Real>(img: &ImageBuf<T>) -> f64 {
    let lum = |x: usize, y: usize| -> f64 {
        if img.channels >= 3 {
            0.299 * img.get(x, y, 0).to_f64()
                + 0.587 * img.get(x, y, 1).to_f64()
                + 0.114 * img.get(x, y, 2).to_f64()
        } else {
            img.get(x, y, 0).to_f64()
        }
    };
    let mut vals = Vec::new();
    for y in 1..img.height.saturating_sub(1) {
        for x in 1..img.width.saturating_sub(1) {
            vals.push(
                lum(x - 1, y) + lum(x + 1, y) + lum(x, y - 1) + lum(x, y + 1) - 4.0 * lum(x, y),
            );
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

/// Intersection over union of two masks thresholded at [`FOREGROUND_THRESHOLD`].
pub fn mask_iou<T: Real>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64> {
    a.check_shape(b)?;
    let t = FOREGROUND_THRESHOLD;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (x.to_f64() > t, y.to_f64() > t);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
