//! Supervision terms for registration and trajectory recovery.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{synthesize_blur, EventMap};
use crate::image::Image;
use crate::metrics::ssim;

/// Levels of the registration image pyramid, full resolution included.
pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub blur: f64,
    pub acc: f64,
    pub event: f64,
    pub kf: f64,
    /// Share of D-SSIM in the photometric terms.
    pub dssim: f64,
    pub reg_photometric: f64,
    pub reg_pyramid: f64,
    pub reg_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            blur: 0.7,
            acc: 0.1,
            event: 0.15,
            kf: 0.05,
            dssim: 0.2,
            reg_photometric: 0.8,
            reg_pyramid: 0.15,
            reg_tv: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("blur", self.blur),
            ("acc", self.acc),
            ("event", self.event),
            ("kf", self.kf),
            ("reg_photometric", self.reg_photometric),
            ("reg_pyramid", self.reg_pyramid),
            ("reg_tv", self.reg_tv),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be >= 0, got {w}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.dssim) {
            return Err(Error::invalid(format!(
                "dssim weight must be in [0, 1], got {}",
                self.dssim
            )));
        }
        Ok(())
    }
}

fn mean_abs_diff(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// `(1 - w) * L1 + w * (1 - SSIM) / 2` on a single pair.
pub fn photometric_loss(a: &Image, b: &Image, dssim_weight: f64) -> Result<f64> {
    let l1 = mean_abs_diff(a, b)?;
    if dssim_weight == 0.0 {
        return Ok(l1);
    }
    Ok((1.0 - dssim_weight) * l1 + dssim_weight * (1.0 - ssim(a, b)?) / 2.0)
}

/// Photometric loss between the mean of the rendered sharp frames and the
/// observed blurry frame.
pub fn blur_loss(rendered_sharps: &[Image], blur_gt: &Image, dssim_weight: f64) -> Result<f64> {
    photometric_loss(&synthesize_blur(rendered_sharps)?, blur_gt, dssim_weight)
}

/// Second difference of three equally spaced centroids.
pub fn acceleration(
    prev: &Vector3<f64>,
    curr: &Vector3<f64>,
    next: &Vector3<f64>,
    dt: f64,
) -> Vector3<f64> {
    ((next - curr) - (curr - prev)) / (dt * dt)
}

/// Sum of squared changes between consecutive accelerations.
pub fn acc_loss(accelerations: &[Vector3<f64>]) -> Result<f64> {
    if accelerations.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: accelerations.len(),
        });
    }
    Ok(accelerations
        .windows(2)
        .map(|w| (w[0] - w[1]).norm_squared())
        .sum())
}

/// Sum over maps of the per-pixel mean absolute difference.
pub fn event_loss(real: &[EventMap], simulated: &[EventMap]) -> Result<f64> {
    if real.len() != simulated.len() {
        return Err(Error::SizeMismatch(format!(
            "{} vs {} event maps",
            real.len(),
            simulated.len()
        )));
    }
    let mut total = 0.0;
    for (r, s) in real.iter().zip(simulated) {
        r.check_shape(s)?;
        let sum: f64 = r
            .values
            .iter()
            .zip(&s.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += sum / r.values.len() as f64;
    }
    Ok(total)
}

/// Sum of squared translation differences against the filter references.
pub fn kf_loss(reference: &[Vector3<f64>], estimated: &[Vector3<f64>]) -> Result<f64> {
    if reference.len() != estimated.len() {
        return Err(Error::LengthMismatch(format!(
            "{} reference vs {} estimated translations",
            reference.len(),
            estimated.len()
        )));
    }
    Ok(reference
        .iter()
        .zip(estimated)
        .map(|(r, e)| (r - e).norm_squared())
        .sum())
}

/// Anisotropic total variation: `(sum |dx| + sum |dy|) / (W * H)`, averaged
/// over channels.
pub fn total_variation(img: &Image) -> f64 {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = img.get(x, y, c);
                if x + 1 < w {
                    sum += (img.get(x + 1, y, c) - v).abs();
                }
                if y + 1 < h {
                    sum += (img.get(x, y + 1, c) - v).abs();
                }
            }
        }
    }
    sum / (w * h * ch) as f64
}

/// Mean L1 over a factor-2 image pyramid.
pub fn pyramid_l1(a: &Image, b: &Image) -> Result<f64> {
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut total = mean_abs_diff(&a, &b)?;
    let mut levels = 1;
    while levels < PYRAMID_LEVELS && a.width() >= 2 && a.height() >= 2 {
        a = a.downsample2();
        b = b.downsample2();
        total += mean_abs_diff(&a, &b)?;
        levels += 1;
    }
    Ok(total / levels as f64)
}

pub fn registration_loss(rendered: &Image, target: &Image, weights: &LossWeights) -> Result<f64> {
    let mut loss = weights.reg_photometric * photometric_loss(rendered, target, weights.dssim)?;
    if weights.reg_pyramid != 0.0 {
        loss += weights.reg_pyramid * pyramid_l1(rendered, target)?;
    }
    if weights.reg_tv != 0.0 {
        loss += weights.reg_tv * total_variation(rendered);
    }
    Ok(loss)
}

pub fn total_loss(blur: f64, acc: f64, event: f64, kf: f64, weights: &LossWeights) -> f64 {
    weights.blur * blur + weights.acc * acc + weights.event * event + weights.kf * kf
}
