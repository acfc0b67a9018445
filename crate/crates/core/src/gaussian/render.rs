use std::cmp::Ordering;

use crate::error::Result;
use crate::geometry::{Camera, MIN_DEPTH};
use crate::image::Image;

use super::GaussianCloud;

/// Footprint cutoff in projected standard deviations.
const CUTOFF_SIGMAS: f64 = 3.0;

/// A kernel after projection into the image.
#[derive(Debug, Clone, Copy)]
struct Splat {
    index: usize,
    u: f64,
    v: f64,
    depth: f64,
    sigma: f64,
    opacity: f64,
    color: [f64; 3],
}

/// Per-pixel, front-to-back list of `(kernel index, footprint weight)`.
///
/// Produced alongside a render so appearance gradients can be taken without
/// re-sorting.
#[derive(Debug, Clone)]
pub struct RenderTrace {
    pub(crate) entries: Vec<Vec<(usize, f64)>>,
}

/// Footprint weight at squared pixel distance `d2`.
///
/// The Gaussian is lowered by its value at the cutoff radius and rescaled so
/// the peak stays exactly 1 and the footprint goes to zero continuously at
/// `3 sigma`.
#[inline]
fn footprint(d2: f64, sigma: f64) -> f64 {
    let tail = (-0.5 * CUTOFF_SIGMAS * CUTOFF_SIGMAS).exp();
    let r2 = d2 / (sigma * sigma);
    if r2 >= CUTOFF_SIGMAS * CUTOFF_SIGMAS {
        return 0.0;
    }
    (((-0.5 * r2).exp() - tail) / (1.0 - tail)).max(0.0)
}

fn project_sorted(cloud: &GaussianCloud, camera: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = cloud
        .kernels()
        .iter()
        .enumerate()
        .filter_map(|(index, k)| {
            let pc = camera.to_camera_frame(&k.position);
            if pc.z <= MIN_DEPTH {
                return None;
            }
            let p = camera.project_camera_frame(&pc).ok()?;
            Some(Splat {
                index,
                u: p.pixel.x,
                v: p.pixel.y,
                depth: p.depth,
                sigma: camera.focal * k.radius / p.depth,
                opacity: k.opacity,
                color: k.color,
            })
        })
        .collect();
    splats.sort_by(|a, b| match a.depth.total_cmp(&b.depth) {
        Ordering::Equal => a.index.cmp(&b.index),
        o => o,
    });
    splats
}

fn pixel_range(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

fn composite(cloud: &GaussianCloud, camera: &Camera, mut trace: Option<&mut RenderTrace>) -> Image {
    let (w, h) = (camera.width, camera.height);
    let mut out = Image::new(w, h, 3);
    let mut transmittance = vec![1.0f64; w * h];
    let data = out.data_mut();
    // Kernel-major traversal in global depth order visits each pixel's kernels
    // front to back, which is the per-pixel compositing order.
    for s in project_sorted(cloud, camera) {
        let reach = CUTOFF_SIGMAS * s.sigma;
        let (Some((x0, x1)), Some((y0, y1))) =
            (pixel_range(s.u, reach, w), pixel_range(s.v, reach, h))
        else {
            continue;
        };
        for y in y0..=y1 {
            let dy = y as f64 - s.v;
            for x in x0..=x1 {
                let dx = x as f64 - s.u;
                let g = footprint(dx * dx + dy * dy, s.sigma);
                if g <= 0.0 {
                    continue;
                }
                let p = y * w + x;
                let weight = s.opacity * g;
                let t = transmittance[p];
                for c in 0..3 {
                    data[p * 3 + c] += s.color[c] * weight * t;
                }
                transmittance[p] = t * (1.0 - weight);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.entries[p].push((s.index, g));
                }
            }
        }
    }
    out.finalize()
}

/// Front-to-back alpha compositing of the projected kernels over black.
pub fn splat_render(cloud: &GaussianCloud, camera: &Camera) -> Result<Image> {
    cloud.require_non_empty()?;
    Ok(composite(cloud, camera, None))
}

pub(crate) fn splat_render_traced(
    cloud: &GaussianCloud,
    camera: &Camera,
) -> Result<(Image, RenderTrace)> {
    cloud.require_non_empty()?;
    let mut trace = RenderTrace {
        entries: vec![Vec::new(); camera.width * camera.height],
    };
    let img = composite(cloud, camera, Some(&mut trace));
    Ok((img, trace))
}
