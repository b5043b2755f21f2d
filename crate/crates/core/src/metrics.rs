//! Image quality metrics. Plain tensor functions, accumulated at f64
//! regardless of the storage element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identical images report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    check_same_shape("mse", a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`:
/// `10 * log10(1 / MSE)`, capped at 100 dB.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let err = mse(a, b)?;
    if err <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / err).log10()).min(PSNR_CAP_DB))
}

/// Normalized 11x11 Gaussian window, sigma 1.5.
fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut kernel = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let y = (i / SSIM_WINDOW) as f64 - center;
        let x = (i % SSIM_WINDOW) as f64 - center;
        *k = (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *k;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    kernel
}

/// Single-scale structural similarity for `[C,H,W]` images in `[0, 1]`:
/// Gaussian-weighted local statistics over every fully interior 11x11
/// window, averaged over channels and windows. Symmetric in its arguments
/// bit-for-bit.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let (c, h, w) = match a.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("ssim", format!("expected [C,H,W], got {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = gaussian_window();
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let ad = a.data();
    let bd = b.data();

    let mut total = 0.0f64;
    let mut count = 0usize;
    for ci in 0..c {
        let plane_a = &ad[ci * h * w..(ci + 1) * h * w];
        let plane_b = &bd[ci * h * w..(ci + 1) * h * w];
        for wy in 0..=(h - SSIM_WINDOW) {
            for wx in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let weight = kernel[ky * SSIM_WINDOW + kx];
                        let va = plane_a[(wy + ky) * w + (wx + kx)].to_f64();
                        let vb = plane_b[(wy + ky) * w + (wx + kx)].to_f64();
                        mu_a += weight * va;
                        mu_b += weight * vb;
                        aa += weight * va * va;
                        bb += weight * vb * vb;
                        ab += weight * (va * vb);
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let value = ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += value;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests;
