//! Synthetic ground truth: a kernel cloud thrown through a uniform force
//! field, rendered as blurry exposures with a matching event stream.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    accumulate_bins, generate_events, read_events, synthesize_blur, write_events,
    ContrastThreshold, Event,
};
use crate::gaussian::{splat_render, GaussianCloud, GaussianKernel};
use crate::geometry::{vec3_serde, Camera, PoseSE3, UnitQuaternion};
use crate::image::Image;
use crate::recovery::FrameBundle;
use crate::trajectory::{
    check_format, read_json, read_poses, write_json, write_poses, TimedPose, FORMAT_VERSION,
};

/// Event simulation renders this many frames per sub-frame interval.
pub const EVENT_SUPERSAMPLING: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigidBodySpec {
    #[serde(with = "vec3_serde")]
    pub position: Vector3<f64>,
    #[serde(with = "vec3_serde")]
    pub velocity: Vector3<f64>,
    /// World-frame angular velocity, rad/s.
    #[serde(with = "vec3_serde")]
    pub angular_velocity: Vector3<f64>,
    /// Uniform field acceleration, units/s^2.
    #[serde(with = "vec3_serde")]
    pub gravity: Vector3<f64>,
    /// Linear drag coefficient, 1/s.
    pub drag: f64,
}

impl Default for RigidBodySpec {
    /// A throw that crosses the default view in eight exposures.
    fn default() -> Self {
        Self {
            position: Vector3::new(-1.2, 0.3, 0.0),
            velocity: Vector3::new(9.0, -5.0, 0.0),
            angular_velocity: Vector3::new(0.0, 0.0, 3.0),
            gravity: Vector3::new(0.0, 25.0, 0.0),
            drag: 0.0,
        }
    }
}

impl RigidBodySpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.position,
            self.velocity,
            self.angular_velocity,
            self.gravity,
        ]
        .iter()
        .all(|v| v.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::invalid("rigid body vectors must be finite"));
        }
        if !(self.drag >= 0.0 && self.drag.is_finite()) {
            return Err(Error::invalid(format!(
                "drag must be >= 0, got {}",
                self.drag
            )));
        }
        Ok(())
    }

    /// Copy with initial velocity and spin scaled by random factors in
    /// `[1 - amount, 1 + amount]`.
    pub fn jittered(&self, rng: &mut impl Rng, amount: f64) -> Self {
        let mut out = *self;
        if amount > 0.0 {
            for i in 0..3 {
                out.velocity[i] *= 1.0 + rng.random_range(-amount..=amount);
                out.angular_velocity[i] *= 1.0 + rng.random_range(-amount..=amount);
            }
        }
        out
    }
}

/// Object pose at time `t`.
pub fn simulate_pose(spec: &RigidBodySpec, t: f64) -> PoseSE3 {
    let position = if spec.drag == 0.0 {
        spec.position + spec.velocity * t + spec.gravity * (0.5 * t * t)
    } else {
        let k = spec.drag;
        let terminal = spec.gravity / k;
        spec.position + (spec.velocity - terminal) * ((1.0 - (-k * t).exp()) / k) + terminal * t
    };
    PoseSE3 {
        rotation: UnitQuaternion::from_axis_angle(&(spec.angular_velocity * t)),
        translation: position,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    SphereShell,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub kernels: usize,
    /// Sphere radius or box half-extent.
    pub size: f64,
    pub kernel_radius: f64,
    pub opacity: f64,
    /// Two tones alternate in bands so rotation is visible.
    pub colors: [[f64; 3]; 2],
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            shape: Shape::SphereShell,
            kernels: 400,
            size: 0.8,
            kernel_radius: 0.12,
            opacity: 0.9,
            colors: [[0.9, 0.9, 0.85], [0.35, 0.35, 0.4]],
        }
    }
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 {
            return Err(Error::invalid("object needs at least one kernel"));
        }
        if !(self.size > 0.0 && self.kernel_radius > 0.0) {
            return Err(Error::invalid("object size and kernel radius must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.opacity)
            || self
                .colors
                .iter()
                .flatten()
                .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::invalid(
                "object opacity and colors must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Kernel cloud in object coordinates, recentred so its centroid is the origin.
pub fn procedural_cloud(spec: &ObjectSpec, rng: &mut impl Rng) -> Result<GaussianCloud> {
    spec.validate()?;
    let n = spec.kernels;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut kernels = Vec::with_capacity(n);
    for i in 0..n {
        // spread points evenly on the unit sphere, then jitter
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64 + rng.random_range(-0.2..0.2);
        let dir = Vector3::new(r * phi.cos(), y, r * phi.sin());
        let p = match spec.shape {
            Shape::SphereShell => dir * spec.size * (1.0 + rng.random_range(-0.03..0.03)),
            Shape::Box => dir / dir.amax() * spec.size,
        };
        let band = ((p.x / spec.size * 2.0).floor() as i64
            + (p.y / spec.size * 2.0).floor() as i64)
            .rem_euclid(2);
        let color = spec.colors[band as usize];
        kernels.push(GaussianKernel::new(
            p,
            spec.kernel_radius,
            color,
            spec.opacity,
        )?);
    }
    let mut cloud = GaussianCloud::new(kernels)?;
    let c = cloud.centroid()?;
    for k in cloud.kernels_mut() {
        k.position -= c;
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    /// Exposures per second.
    pub frame_rate: f64,
    /// Share of the frame period the shutter is open, centred in the period.
    pub exposure_fraction: f64,
    /// Latent frames per exposure.
    pub subframes: usize,
    pub contrast_threshold: ContrastThreshold,
    pub camera: Camera,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            frame_rate: 30.0,
            exposure_fraction: 1.0,
            subframes: 5,
            contrast_threshold: ContrastThreshold::default(),
            camera: Camera {
                focal: 80.0,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
                extrinsic: PoseSE3::from_translation(Vector3::new(0.0, 0.0, 8.0)),
            },
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subframes < 2 {
            return Err(Error::invalid(format!(
                "subframes must be >= 2, got {}",
                self.subframes
            )));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "frame_rate must be > 0, got {}",
                self.frame_rate
            )));
        }
        if !(self.exposure_fraction > 0.0 && self.exposure_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "exposure_fraction must be in (0, 1], got {}",
                self.exposure_fraction
            )));
        }
        self.camera.validate()
    }

    /// The `N` latent timestamps of exposure `k`.
    pub fn boundaries(&self, k: usize) -> Vec<f64> {
        let period = 1.0 / self.frame_rate;
        let open = period * self.exposure_fraction;
        let start = k as f64 * period + 0.5 * (period - open);
        let n = self.subframes;
        (0..n)
            .map(|i| start + open * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: u32,
    pub seed: u64,
    pub exposures: usize,
    pub capture: CaptureConfig,
    pub body: RigidBodySpec,
    pub boundaries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub exposures: usize,
    pub events: usize,
    pub path_length: f64,
}

fn render_at(cloud: &GaussianCloud, pose: &PoseSE3, camera: &Camera) -> Result<Image> {
    splat_render(&cloud.transformed(pose), camera)
}

/// Times at which frames are rendered for event simulation: every latent
/// interval split `EVENT_SUPERSAMPLING` ways, gaps between exposures at the
/// same spacing.
fn event_sample_times(boundaries: &[Vec<f64>]) -> Vec<f64> {
    let mut times: Vec<f64> = Vec::new();
    let push = |t: f64, times: &mut Vec<f64>| {
        if times.last().is_none_or(|&last| t > last + 1e-12) {
            times.push(t);
        }
    };
    let spacing = (boundaries[0][1] - boundaries[0][0]) / EVENT_SUPERSAMPLING as f64;
    for (k, b) in boundaries.iter().enumerate() {
        if k > 0 {
            let (from, to) = (*boundaries[k - 1].last().unwrap(), b[0]);
            let steps = ((to - from) / spacing).ceil() as usize;
            for s in 1..steps {
                push(from + (to - from) * s as f64 / steps as f64, &mut times);
            }
        }
        for w in b.windows(2) {
            for s in 0..EVENT_SUPERSAMPLING {
                push(
                    w[0] + (w[1] - w[0]) * s as f64 / EVENT_SUPERSAMPLING as f64,
                    &mut times,
                );
            }
        }
        push(*b.last().unwrap(), &mut times);
    }
    times
}

/// Renders and writes a complete dataset directory.
pub fn make_dataset(
    cloud: &GaussianCloud,
    body: &RigidBodySpec,
    capture: &CaptureConfig,
    exposures: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetSummary> {
    let out = out_dir.as_ref();
    body.validate()?;
    capture.validate()?;
    cloud.require_non_empty()?;
    if exposures < 2 {
        return Err(Error::invalid(format!(
            "exposures must be >= 2, got {exposures}"
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let camera = &capture.camera;

    let boundaries: Vec<Vec<f64>> = (0..exposures).map(|k| capture.boundaries(k)).collect();
    let mut gt = Vec::new();
    for (k, b) in boundaries.iter().enumerate() {
        let mut sharps = Vec::with_capacity(b.len());
        for (i, &t) in b.iter().enumerate() {
            let pose = simulate_pose(body, t);
            if gt.last().is_none_or(|p: &TimedPose| t > p.time + 1e-12) {
                gt.push(TimedPose { time: t, pose });
            }
            let img = render_at(cloud, &pose, camera)?;
            img.save_png(out.join(format!("sharp_{k:04}_{i:02}.png")))?;
            sharps.push(img);
        }
        synthesize_blur(&sharps)?.save_png(out.join(format!("blur_{k:04}.png")))?;
    }

    let times = event_sample_times(&boundaries);
    let frames = times
        .iter()
        .map(|&t| render_at(cloud, &simulate_pose(body, t), camera))
        .collect::<Result<Vec<_>>>()?;
    let events = generate_events(&frames, &times, capture.contrast_threshold)?;
    write_events(out.join("events.txt"), &events)?;

    write_poses(out.join("trajectory_gt.json"), &gt)?;
    cloud.save(out.join("cloud.json"))?;
    let meta = DatasetMeta {
        format: FORMAT_VERSION,
        seed,
        exposures,
        capture: *capture,
        body: *body,
        boundaries,
    };
    write_json(&out.join("meta.json"), &meta)?;

    let path_length = gt
        .windows(2)
        .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum();
    Ok(DatasetSummary {
        exposures,
        events: events.len(),
        path_length,
    })
}

/// A dataset directory read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub bundles: Vec<FrameBundle>,
    pub events: Vec<Event>,
    /// Present when the directory carries ground truth.
    pub ground_truth: Option<Vec<TimedPose>>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let meta: DatasetMeta = read_json(&dir.join("meta.json"), "dataset meta")?;
        check_format(meta.format, "dataset meta")?;
        meta.capture.validate()?;
        if meta.boundaries.len() != meta.exposures {
            return Err(Error::Format {
                what: "dataset meta".into(),
                detail: format!(
                    "{} boundary lists for {} exposures",
                    meta.boundaries.len(),
                    meta.exposures
                ),
            });
        }
        let events = read_events(dir.join("events.txt"))?;
        let cam = &meta.capture.camera;
        let mut bundles = Vec::with_capacity(meta.exposures);
        for (k, b) in meta.boundaries.iter().enumerate() {
            let blur = Image::load_png(dir.join(format!("blur_{k:04}.png")))?;
            if blur.width() != cam.width || blur.height() != cam.height {
                return Err(Error::InputMismatch(format!(
                    "blur_{k:04}.png is {}x{}, camera is {}x{}",
                    blur.width(),
                    blur.height(),
                    cam.width,
                    cam.height
                )));
            }
            let bins = accumulate_bins(&events, b, cam.width, cam.height)?;
            bundles.push(FrameBundle {
                index: k,
                blur: blur.to_rgb(),
                bins,
                boundaries: b.clone(),
            });
        }
        let gt_path = dir.join("trajectory_gt.json");
        let ground_truth = if gt_path.exists() {
            Some(read_poses(&gt_path)?)
        } else {
            None
        };
        Ok(Self {
            dir,
            meta,
            bundles,
            events,
            ground_truth,
        })
    }

    /// Ground-truth sharp frames of exposure `k`, if stored.
    pub fn sharps(&self, k: usize) -> Result<Option<Vec<Image>>> {
        let n = self.meta.capture.subframes;
        let paths: Vec<PathBuf> = (0..n)
            .map(|i| self.dir.join(format!("sharp_{k:04}_{i:02}.png")))
            .collect();
        if !paths.iter().all(|p| p.exists()) {
            return Ok(None);
        }
        paths
            .iter()
            .map(|p| Image::load_png(p).map(|i| i.to_rgb()))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn cloud_path(&self) -> PathBuf {
        self.dir.join("cloud.json")
    }
}

/// Everything a run of the simulator needs besides the output directory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub object: ObjectSpec,
    pub body: RigidBodySpec,
    pub capture: CaptureConfig,
    pub exposures: usize,
    /// Relative spread applied to the initial velocity and spin per seed.
    pub jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            object: ObjectSpec::default(),
            body: RigidBodySpec::default(),
            capture: CaptureConfig::default(),
            exposures: 8,
            jitter: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.object.validate()?;
        self.body.validate()?;
        self.capture.validate()?;
        if self.exposures < 2 {
            return Err(Error::invalid(format!(
                "exposures must be >= 2, got {}",
                self.exposures
            )));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid(format!(
                "jitter must be in [0, 1), got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Samples the object and body from `seed` and writes the dataset.
    pub fn generate(&self, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetSummary> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = procedural_cloud(&self.object, &mut rng)?;
        let body = self.body.jittered(&mut rng, self.jitter);
        make_dataset(&cloud, &body, &self.capture, self.exposures, seed, out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{acc_loss, acceleration};

    /// Fine-step numerical integration of the drag ODE.
    fn integrate(spec: &RigidBodySpec, t: f64, dt: f64) -> Vector3<f64> {
        let (mut p, mut v) = (spec.position, spec.velocity);
        let steps = (t / dt).round() as usize;
        for _ in 0..steps {
            // midpoint on the velocity ODE keeps the oracle second order
            let a1 = spec.gravity - spec.drag * v;
            let vm = v + a1 * (0.5 * dt);
            let a2 = spec.gravity - spec.drag * vm;
            p += vm * dt;
            v += a2 * dt;
        }
        p
    }

    #[test]
    fn kinematics_examples() {
        let spec = RigidBodySpec {
            position: Vector3::zeros(),
            velocity: Vector3::new(1.0, 0.0, 0.0),
            gravity: Vector3::new(0.0, -10.0, 0.0),
            angular_velocity: Vector3::zeros(),
            drag: 0.0,
        };
        assert_eq!(
            simulate_pose(&spec, 1.0).translation,
            Vector3::new(1.0, -5.0, 0.0)
        );
        let d = RigidBodySpec::default();
        assert_eq!(
            simulate_pose(&d, 0.0),
            PoseSE3::from_translation(d.position)
        );
    }

    #[test]
    fn drag_matches_fine_integrator() {
        let spec = RigidBodySpec {
            drag: 0.5,
            ..Default::default()
        };
        let exact = simulate_pose(&spec, 2.0).translation;
        let numeric = integrate(&spec, 2.0, 1e-5);
        assert!((exact - numeric).amax() < 1e-6, "{exact:?} vs {numeric:?}");
    }

    #[test]
    fn ground_truth_has_constant_second_differences() {
        let spec = RigidBodySpec::default();
        let cap = CaptureConfig::default();
        let times: Vec<f64> = (0..4).flat_map(|k| cap.boundaries(k)).collect();
        let dt = times[1] - times[0];
        let mut accs = Vec::new();
        for k in 0..times.len() - 2 {
            let p = |i: usize| simulate_pose(&spec, k as f64 * dt + i as f64 * dt).translation;
            let a = acceleration(&p(0), &p(1), &p(2), dt);
            assert!((a - spec.gravity).amax() < 1e-9 * spec.gravity.amax());
            accs.push(a);
        }
        assert!(acc_loss(&accs).unwrap() <= 1e-12);
    }

    #[test]
    fn boundaries_are_centred_and_uniform() {
        let cap = CaptureConfig {
            exposure_fraction: 0.5,
            frame_rate: 10.0,
            ..Default::default()
        };
        let b = cap.boundaries(1);
        assert_eq!(b.len(), 5);
        assert!((b[0] - 0.125).abs() < 1e-15 && (b[4] - 0.175).abs() < 1e-15);
        let full = CaptureConfig::default();
        assert!((full.boundaries(0)[4] - full.boundaries(1)[0]).abs() < 1e-15);
    }

    #[test]
    fn sample_times_cover_every_boundary() {
        let cap = CaptureConfig {
            exposure_fraction: 0.6,
            ..Default::default()
        };
        let b: Vec<Vec<f64>> = (0..3).map(|k| cap.boundaries(k)).collect();
        let times = event_sample_times(&b);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        for t in b.iter().flatten() {
            assert!(times.iter().any(|s| (s - t).abs() < 1e-15));
        }
        let contiguous: Vec<Vec<f64>> = (0..3)
            .map(|k| CaptureConfig::default().boundaries(k))
            .collect();
        assert_eq!(
            event_sample_times(&contiguous).len(),
            3 * 4 * EVENT_SUPERSAMPLING + 1
        );
    }

    #[test]
    fn procedural_cloud_is_centred_and_seeded() {
        let spec = ObjectSpec::default();
        let a = procedural_cloud(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = procedural_cloud(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        assert!(a.centroid().unwrap().norm() < 1e-12);
        let boxy = procedural_cloud(
            &ObjectSpec {
                shape: Shape::Box,
                ..spec
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(boxy
            .kernels()
            .iter()
            .all(|k| k.position.amax() <= 0.8 + 0.1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cap = CaptureConfig {
            subframes: 1,
            ..Default::default()
        };
        assert!(cap.validate().is_err());
        assert!(SceneConfig {
            exposures: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        let body = RigidBodySpec {
            drag: -1.0,
            ..Default::default()
        };
        assert!(body.validate().is_err());
    }
}
