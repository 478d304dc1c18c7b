//! Pixel-level quality metrics.

use super::{Image, ImagingError};

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const MAX_VALUE: f64 = 1.0;
const SSIM_WINDOW: usize = 8;

pub fn mse(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    a.same_dims(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in dB with a peak of 1.0, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (MAX_VALUE * MAX_VALUE / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over non-overlapping 8x8 windows with uniform weights.
///
/// Trailing rows/columns that do not fill a whole window are ignored.
/// Window statistics use population (1/N) moments.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    a.same_dims(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(ImagingError::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let c1 = (0.01 * MAX_VALUE).powi(2);
    let c2 = (0.03 * MAX_VALUE).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..h / SSIM_WINDOW {
        for wx in 0..w / SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in wy * SSIM_WINDOW..(wy + 1) * SSIM_WINDOW {
                for x in wx * SSIM_WINDOW..(wx + 1) * SSIM_WINDOW {
                    let (p, q) = (a.get(x, y), b.get(x, y));
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}
