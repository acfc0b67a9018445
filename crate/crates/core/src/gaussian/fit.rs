use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;

use super::render::splat_render_traced;
use super::GaussianCloud;

/// Step halvings tried before an iteration is declared stalled.
const MAX_HALVINGS: usize = 20;

struct Gradient {
    color: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    loss: f64,
}

fn loss_and_gradient(cloud: &GaussianCloud, views: &[(Image, Camera)]) -> Result<Gradient> {
    let n = cloud.len();
    let mut grad = Gradient {
        color: vec![[0.0; 3]; n],
        opacity: vec![0.0; n],
        loss: 0.0,
    };
    let kernels = cloud.kernels();
    for (target, camera) in views {
        let (rendered, trace) = splat_render_traced(cloud, camera)?;
        rendered.check_shape(target)?;
        let norm = 1.0 / (rendered.data().len() as f64 * views.len() as f64);
        for (p, entries) in trace.entries.iter().enumerate() {
            let mut sign = [0.0; 3];
            for c in 0..3 {
                let diff = rendered.data()[p * 3 + c] - target.data()[p * 3 + c];
                grad.loss += diff.abs() * norm;
                sign[c] = diff.signum() * (diff != 0.0) as u8 as f64 * norm;
            }
            if sign == [0.0; 3] {
                continue;
            }
            // transmittance in front of each entry
            let mut trans = Vec::with_capacity(entries.len());
            let mut t = 1.0;
            for &(i, g) in entries {
                trans.push(t);
                t *= 1.0 - kernels[i].opacity * g;
            }
            // back to front: `behind` is the composite of everything after entry e
            let mut behind = [0.0; 3];
            for (e, &(i, g)) in entries.iter().enumerate().rev() {
                let k = &kernels[i];
                let w = k.opacity * g;
                let t = trans[e];
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    grad.color[i][c] += sign[c] * w * t;
                    d_alpha += sign[c] * g * t * (k.color[c] - behind[c]);
                    behind[c] = k.color[c] * w + (1.0 - w) * behind[c];
                }
                grad.opacity[i] += d_alpha;
            }
        }
    }
    Ok(grad)
}

fn mean_l1(cloud: &GaussianCloud, views: &[(Image, Camera)]) -> Result<f64> {
    let mut total = 0.0;
    for (target, camera) in views {
        let rendered = super::splat_render(cloud, camera)?;
        rendered.check_shape(target)?;
        let sum: f64 = rendered
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += sum / rendered.data().len() as f64;
    }
    Ok(total / views.len() as f64)
}

/// Fits kernel colors and opacities to RGB target views by projected
/// gradient descent on the mean L1 image error.
///
/// Positions and radii are left untouched. A step is only accepted when it
/// does not increase the loss; otherwise the step is halved.
pub fn fit_cloud_appearance(
    cloud: &GaussianCloud,
    views: &[(Image, Camera)],
    iterations: usize,
    lr: f64,
) -> Result<GaussianCloud> {
    cloud.require_non_empty()?;
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    if iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    for (img, _) in views {
        if img.channels() != 3 {
            return Err(Error::SizeMismatch("appearance targets must be RGB".into()));
        }
    }

    let mut current = cloud.clone();
    let mut step = lr;
    for _ in 0..iterations {
        let grad = loss_and_gradient(&current, views)?;
        let gnorm: f64 = grad
            .color
            .iter()
            .flatten()
            .chain(&grad.opacity)
            .map(|g| g * g)
            .sum();
        if gnorm == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut trial = current.clone();
            for (i, k) in trial.kernels_mut().iter_mut().enumerate() {
                for c in 0..3 {
                    k.color[c] = (k.color[c] - step * grad.color[i][c]).clamp(0.0, 1.0);
                }
                k.opacity = (k.opacity - step * grad.opacity[i]).clamp(0.0, 1.0);
            }
            let loss = mean_l1(&trial, views)?;
            if loss <= grad.loss {
                current = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{splat_render, GaussianKernel};
    use crate::geometry::PoseSE3;
    use nalgebra::Vector3;

    fn camera() -> Camera {
        Camera::new(60.0, 16.0, 16.0, 32, 32, PoseSE3::IDENTITY).unwrap()
    }

    fn cloud_with(color: [f64; 3], opacity: f64) -> GaussianCloud {
        GaussianCloud::new(vec![GaussianKernel::new(
            Vector3::new(0.0, 0.0, 3.0),
            0.2,
            color,
            opacity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn self_rendered_views_are_a_fixed_point() {
        let cloud = GaussianCloud::new(vec![
            GaussianKernel::new(Vector3::new(0.1, 0.0, 3.0), 0.3, [0.2, 0.7, 0.4], 0.8).unwrap(),
            GaussianKernel::new(Vector3::new(-0.2, 0.1, 3.5), 0.4, [0.9, 0.1, 0.3], 0.6).unwrap(),
        ])
        .unwrap();
        let view = (splat_render(&cloud, &camera()).unwrap(), camera());
        let fitted = fit_cloud_appearance(&cloud, &[view], 20, 1.0).unwrap();
        for (a, b) in fitted.kernels().iter().zip(cloud.kernels()) {
            assert!((a.opacity - b.opacity).abs() < 1e-6);
            for c in 0..3 {
                assert!((a.color[c] - b.color[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_kernel_color_converges() {
        let target = splat_render(&cloud_with([0.0, 1.0, 0.0], 1.0), &camera()).unwrap();
        let fitted = fit_cloud_appearance(
            &cloud_with([1.0, 0.0, 0.0], 1.0),
            &[(target, camera())],
            400,
            50.0,
        )
        .unwrap();
        let k = fitted.kernels()[0];
        assert!(k.color[0].abs() < 1e-3, "{:?}", k);
        assert!((k.color[1] - 1.0).abs() < 1e-3, "{:?}", k);
        assert!(k.color[2].abs() < 1e-3, "{:?}", k);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cloud = GaussianCloud::new(vec![
            GaussianKernel::new(Vector3::new(0.05, 0.0, 3.0), 0.3, [0.2, 0.7, 0.4], 0.7).unwrap(),
            GaussianKernel::new(Vector3::new(-0.1, 0.05, 3.5), 0.4, [0.9, 0.1, 0.3], 0.6).unwrap(),
        ])
        .unwrap();
        let target = Image::filled(32, 32, 3, 0.9);
        let views = [(target, camera())];
        let g = loss_and_gradient(&cloud, &views).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut plus = cloud.clone();
            let mut minus = cloud.clone();
            plus.kernels_mut()[i].opacity += h;
            minus.kernels_mut()[i].opacity -= h;
            let fd =
                (mean_l1(&plus, &views).unwrap() - mean_l1(&minus, &views).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.opacity[i]).abs() < 1e-6,
                "kernel {i}: fd {fd} vs {}",
                g.opacity[i]
            );
            let mut plus = cloud.clone();
            let mut minus = cloud.clone();
            plus.kernels_mut()[i].color[1] += h;
            minus.kernels_mut()[i].color[1] -= h;
            let fd =
                (mean_l1(&plus, &views).unwrap() - mean_l1(&minus, &views).unwrap()) / (2.0 * h);
            assert!((fd - g.color[i][1]).abs() < 1e-6);
        }
    }

    #[test]
    fn preconditions() {
        let cloud = cloud_with([0.5; 3], 1.0);
        let view = (Image::new(32, 32, 3), camera());
        assert!(matches!(
            fit_cloud_appearance(&cloud, &[view.clone()], 0, 1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            fit_cloud_appearance(&cloud, &[], 5, 1.0),
            Err(Error::NoViews)
        ));
        assert!(matches!(
            fit_cloud_appearance(&GaussianCloud::default(), &[view], 5, 1.0),
            Err(Error::EmptyCloud)
        ));
    }
}
