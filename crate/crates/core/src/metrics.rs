//! Image-space fidelity metrics.

use crate::codec::{ImageTensor, PixelMask};
use crate::error::{contract_err, shape_err, Result};

/// Ceiling reported for identical regions instead of +∞.
pub const PSNR_CAP: f64 = 100.0;

/// Which pixels a metric covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    All,
    Inside,
    Outside,
}

fn mse(a: &ImageTensor, b: &ImageTensor, mask: Option<&PixelMask>, region: Region) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(shape_err(format!(
            "metric on {}×{} vs {}×{} images",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if let Some(m) = mask {
        a.check_mask(m)?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let keep = match (region, mask) {
                (Region::All, _) | (_, None) => true,
                (Region::Inside, Some(m)) => m.get(y, x),
                (Region::Outside, Some(m)) => !m.get(y, x),
            };
            if keep {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(contract_err("metric region is empty"));
    }
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, in dB, capped at [`PSNR_CAP`].
pub fn psnr_region(a: &ImageTensor, b: &ImageTensor, mask: Option<&PixelMask>, region: Region) -> Result<f64> {
    let e = mse(a, b, mask, region)?;
    Ok(if e <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / e).log10()).min(PSNR_CAP) })
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_region(a, b, None, Region::All)
}

/// Largest absolute per-value difference over the chosen region.
pub fn max_abs_diff_region(a: &ImageTensor, b: &ImageTensor, mask: &PixelMask, region: Region) -> Result<f64> {
    a.check_mask(mask)?;
    b.check_mask(mask)?;
    let mut worst = 0.0f64;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let keep = match region {
                Region::All => true,
                Region::Inside => mask.get(y, x),
                Region::Outside => !mask.get(y, x),
            };
            if keep {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                for c in 0..3 {
                    worst = worst.max((p[c] - q[c]).abs());
                }
            }
        }
    }
    Ok(worst)
}
