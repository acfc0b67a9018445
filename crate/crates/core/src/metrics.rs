//! Image quality (PSNR, SSIM) and trajectory accuracy (IoU, ATE, RMSE).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Luminance threshold separating object from the black background.
pub const FOREGROUND_THRESHOLD: f64 = 0.02;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio on the `[0, 1]` range, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable 'valid' filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * row[x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data()
        .iter()
        .skip(c)
        .step_by(img.channels())
        .copied()
        .collect()
}

/// Mean structural similarity over all 11x11 Gaussian windows (sigma 1.5)
/// fully inside the image, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall {
            width: w,
            height: h,
        });
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`; `None` marks an empty box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }
}

/// Tight box around pixels whose luminance exceeds `threshold`.
pub fn foreground_bbox(img: &Image, threshold: f64) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.luma_at(x, y) > threshold {
                let b = bb.get_or_insert(BoundingBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x + 1);
                b.y1 = b.y1.max(y + 1);
            }
        }
    }
    bb
}

/// Intersection over union; `None` when both boxes are empty.
pub fn box_iou(a: Option<BoundingBox>, b: Option<BoundingBox>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (Some(a), Some(b)) => {
            let inter = a.intersection_area(&b) as f64;
            Some(inter / (a.area() as f64 + b.area() as f64 - inter))
        }
        _ => Some(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub iou: f64,
    pub ate: f64,
    pub rmse: f64,
}

/// Sum of consecutive translation steps.
pub fn path_length(track: &[Vector3<f64>]) -> f64 {
    track.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Translation errors normalized by the ground-truth path length (or raw
/// when the ground truth does not move).
pub fn normalized_errors(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if gt.len() != est.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} positions",
            gt.len(),
            est.len()
        )));
    }
    let len = path_length(gt);
    let scale = if len > 1e-12 { 1.0 / len } else { 1.0 };
    Ok(gt
        .iter()
        .zip(est)
        .map(|(g, e)| (g - e).norm() * scale)
        .collect())
}

/// Mean box IoU plus ATE and RMSE of normalized translation errors.
pub fn trajectory_metrics(
    gt: &[PoseSE3],
    est: &[PoseSE3],
    gt_frames: &[Image],
    est_frames: &[Image],
) -> Result<TrackMetrics> {
    if gt_frames.len() != est_frames.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} frames",
            gt_frames.len(),
            est_frames.len()
        )));
    }
    let gt_t: Vec<_> = gt.iter().map(|p| p.translation).collect();
    let est_t: Vec<_> = est.iter().map(|p| p.translation).collect();
    let errors = normalized_errors(&gt_t, &est_t)?;
    let n = errors.len().max(1) as f64;
    let ate = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();

    let ious: Vec<f64> = gt_frames
        .iter()
        .zip(est_frames)
        .filter_map(|(g, e)| {
            box_iou(
                foreground_bbox(g, FOREGROUND_THRESHOLD),
                foreground_bbox(e, FOREGROUND_THRESHOLD),
            )
        })
        .collect();
    let iou = if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(TrackMetrics { iou, ate, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pattern(w: usize, h: usize) -> (Image, Image) {
        let mut a = Image::new(w, h, 1);
        let mut b = Image::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let va = 0.5 + 0.4 * (0.3 * xf).sin() * (0.2 * yf).cos();
                a.set(x, y, 0, va);
                b.set(
                    x,
                    y,
                    0,
                    (va + 0.1 * (0.7 * xf + 0.5 * yf).sin()).clamp(0.0, 1.0),
                );
            }
        }
        (a, b)
    }

    /// Direct 2-D window evaluation, no separability.
    fn ssim_brute(a: &Image, b: &Image) -> f64 {
        let k1 = gaussian_window();
        let (w, h) = (a.width(), a.height());
        let mut sum = 0.0;
        let mut count = 0.0;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let wt = k1[i] * k1[j];
                        let x = a.get(ox + i, oy + j, 0);
                        let y = b.get(ox + i, oy + j, 0);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, c) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 1, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zero = Image::filled(8, 8, 1, 0.0);
        let one = Image::filled(8, 8, 1, 1.0);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
        let b = Image::filled(8, 8, 1, 0.3 + 1e-2);
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(4, 8, 1)).is_err());
    }

    #[test]
    fn ssim_matches_reference_values() {
        let (a, b) = pattern(32, 24);
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - ssim_brute(&a, &b)).abs() < 1e-12);
        // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1.0) on the same pattern
        assert!((fast - 0.8016595257277409).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let (a, _) = pattern(32, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let s = ssim(&a, &neg).unwrap();
        assert!(s < 0.2);
        assert!((s - -0.7195782126067415).abs() < 1e-9);
        let c = Image::filled(12, 12, 3, 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ssim(&Image::new(10, 20, 1), &Image::new(10, 20, 1)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(foreground_bbox(&Image::new(9, 9, 1), 0.02), None);
        let mut img = Image::new(9, 9, 3);
        for c in 0..3 {
            img.set(5, 7, c, 1.0);
        }
        assert_eq!(
            foreground_bbox(&img, 0.02),
            Some(BoundingBox {
                x0: 5,
                y0: 7,
                x1: 6,
                y1: 8
            })
        );
    }

    #[test]
    fn bbox_matches_pixel_scan_on_rendered_sphere() {
        use crate::gaussian::{splat_render, GaussianCloud, GaussianKernel};
        use crate::geometry::{Camera, PoseSE3};
        let cam = Camera::new(80.0, 32.0, 32.0, 64, 64, PoseSE3::IDENTITY).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let kernels = (0..200)
            .map(|_| {
                let d = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                GaussianKernel::new(d * 0.8 + Vector3::new(0.3, -0.2, 8.0), 0.1, [0.8; 3], 0.9)
                    .unwrap()
            })
            .collect();
        let img = splat_render(&GaussianCloud::new(kernels).unwrap(), &cam).unwrap();
        let bb = foreground_bbox(&img, 0.02).unwrap();
        let (mut xs, mut ys) = (vec![], vec![]);
        for y in 0..64 {
            for x in 0..64 {
                if img.luma_at(x, y) > 0.02 {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        assert_eq!(bb.x0, *xs.iter().min().unwrap());
        assert_eq!(bb.x1, xs.iter().max().unwrap() + 1);
        assert_eq!(bb.y0, *ys.iter().min().unwrap());
        assert_eq!(bb.y1, ys.iter().max().unwrap() + 1);
    }

    fn boxed(x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        let mut img = Image::new(20, 20, 1);
        for y in y0..y1 {
            for x in x0..x1 {
                img.set(x, y, 0, 1.0);
            }
        }
        img
    }

    #[test]
    fn trajectory_metric_examples() {
        let poses: Vec<PoseSE3> = (0..4)
            .map(|i| PoseSE3::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        let frames: Vec<Image> = (0..4).map(|i| boxed(i, 2, i + 4, 6)).collect();
        let m = trajectory_metrics(&poses, &poses, &frames, &frames).unwrap();
        assert_eq!((m.iou, m.ate, m.rmse), (1.0, 0.0, 0.0));

        let far: Vec<Image> = (0..4).map(|i| boxed(i + 10, 12, i + 14, 16)).collect();
        assert_eq!(
            trajectory_metrics(&poses, &poses, &frames, &far)
                .unwrap()
                .iou,
            0.0
        );

        // shifted by half a box width: inter = 1/2, union = 3/2
        let half: Vec<Image> = (0..4).map(|i| boxed(i + 2, 2, i + 6, 6)).collect();
        let m = trajectory_metrics(&poses, &poses, &frames, &half).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-12);

        // empty vs empty frames are excluded; empty vs box counts as zero
        let blank = vec![Image::new(20, 20, 1); 2];
        let mixed = vec![Image::new(20, 20, 1), boxed(0, 0, 3, 3)];
        let two = &poses[..2];
        assert_eq!(
            trajectory_metrics(two, two, &blank, &mixed).unwrap().iou,
            0.0
        );

        assert!(matches!(
            trajectory_metrics(&poses, &poses[..3], &frames, &frames),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn offset_track_ate_is_offset_over_path_length() {
        let gt: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(0.5 * i as f64, 0.0, 0.0))
            .collect();
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| p + Vector3::new(0.0, 0.1, 0.0)).collect();
        let errs = normalized_errors(&gt, &est).unwrap();
        assert!(errs.iter().all(|e| (e - 0.1 / 2.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn rmse_dominates_ate_and_iou_in_unit_range(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = || rng.random_range(-3.0..3.0);
            let gt: Vec<PoseSE3> = (0..n).map(|_| PoseSE3::from_translation(Vector3::new(r(), r(), r()))).collect();
            let est: Vec<PoseSE3> = (0..n).map(|_| PoseSE3::from_translation(Vector3::new(r(), r(), r()))).collect();
            let frames: Vec<Image> = (0..n).map(|i| boxed(i % 7, 1, i % 7 + 5, 9)).collect();
            let other: Vec<Image> = (0..n).map(|i| boxed((i * 3) % 11, 2, (i * 3) % 11 + 6, 7)).collect();
            let m = trajectory_metrics(&gt, &est, &frames, &other).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.ate);
            prop_assert!((0.0..=1.0).contains(&m.iou));
        }

        #[test]
        fn psnr_and_ssim_are_symmetric(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Image::from_vec(12, 13, 3, (0..12 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let b = Image::from_vec(12, 13, 3, (0..12 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
