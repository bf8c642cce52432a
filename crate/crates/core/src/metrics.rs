//! Image-quality measures: SSIM, PSNR, gradient-domain MSE and the
//! center-crop evaluation region.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with `C1 = 0.01^2` and
//! `C2 = 0.03^2` for unit dynamic range. The local map is computed over the
//! "valid" window positions of each color channel and averaged over all of
//! them, which equals the mean of the per-channel SSIM values.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::tensor::{chw, Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR for identical frames.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let dims = chw(op, a)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(dims)
}

/// Differentiable mean SSIM of two `[C, H, W]` tensors.
pub fn ssim_tensor<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = same_shape("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let blur = |x: &Tensor<T>| x.separable_filter_valid(&taps);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let var_a = blur(&a.square())?.sub(&mu_aa)?;
    let var_b = blur(&b.square())?.sub(&mu_bb)?;
    let cov = blur(&a.mul(b)?)?.sub(&mu_ab)?;
    let num = mu_ab
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(&mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?.mean())
}

/// Mean of squared forward differences of `a - b` along both axes, pooled
/// over every difference entry. Axes of extent 1 contribute nothing.
pub fn gradient_mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = same_shape("gradient_mse", a, b)?;
    let d = a.sub(b)?;
    let mut parts = Vec::new();
    if w > 1 {
        parts.push(d.diff_x()?.square().sum());
    }
    if h > 1 {
        parts.push(d.diff_y()?.square().sum());
    }
    let count = a.shape()[0] * (h * (w - 1) + (h - 1) * w);
    let Some(first) = parts.first().cloned() else {
        return Ok(Tensor::scalar(T::zero()));
    };
    let total = parts[1..].iter().try_fold(first, |acc, p| acc.add(p))?;
    Ok(total.scale(1.0 / count as f64))
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM of two frames, evaluated in 64-bit.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(ssim_tensor(&a.to_tensor::<f64>(), &b.to_tensor::<f64>())?.item())
}

/// Central crop of `floor(fraction * H) x floor(fraction * W)` at offset
/// `floor((H - h') / 2)`, never smaller than 1x1.
pub fn center_region(frame: &Frame, fraction: f64) -> Result<Frame> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "center_region",
            format!("fraction {fraction} not in (0, 1]"),
        ));
    }
    let (h, w) = frame.dims();
    // the small bias keeps e.g. 0.9 * 10 from flooring to 8
    let side = |n: usize| (((fraction * n as f64) + 1e-9).floor() as usize).clamp(1, n);
    let (ch, cw) = (side(h), side(w));
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    Ok(Frame::from_fn(ch, cw, |c, y, x| frame.get(c, y + oy, x + ox)))
}

/// SSIM and PSNR of a prediction against ground truth on the center crop.
/// The prediction is clamped into `[0, 1]` first.
pub fn score(prediction: &Frame, truth: &Frame, fraction: f64) -> Result<(f64, f64)> {
    let p = center_region(&prediction.clamped(), fraction)?;
    let t = center_region(truth, fraction)?;
    Ok((ssim(&p, &t)?, psnr(&p, &t)?))
}
