//! Trajectory recovery: registration of the cloud to the first latent frame,
//! then per-exposure optimization of sub-frame pose changes under the blur,
//! acceleration, event and filter losses.

use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    cumulative_event_maps, edi_deblur, log_luminance, ContrastThreshold, EventBin, EventMap,
};
use crate::gaussian::{splat_render, GaussianCloud};
use crate::geometry::{Camera, PoseSE3, SimilarityTransform, Transform3, UnitQuaternion};
use crate::image::Image;
use crate::kalman::{self, KalmanParams, KalmanState};
use crate::losses::{
    acc_loss, acceleration, photometric_loss, registration_loss, total_loss, LossWeights,
};
use crate::metrics::FOREGROUND_THRESHOLD;
use crate::msa::{MsaConfig, MsaTracker};
use crate::trajectory::{write_json, PoseFile, TimedPose};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One blurry exposure with its event bins.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub index: usize,
    pub blur: Image,
    /// `N - 1` bins tiling the exposure.
    pub bins: Vec<EventBin>,
    /// `N` latent timestamps.
    pub boundaries: Vec<f64>,
}

impl FrameBundle {
    pub fn cumulative_maps(&self) -> Result<Vec<EventMap>> {
        cumulative_event_maps(&self.bins)
    }

    /// Latent frames recovered from the blur and the events.
    pub fn deblur(&self, eps: ContrastThreshold) -> Result<Vec<Image>> {
        edi_deblur(&self.blur, &self.cumulative_maps()?, eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub weights: LossWeights,
    pub msa: MsaConfig,
    pub kalman: KalmanParams,
    /// Iteration cap per exposure.
    pub iterations_base: usize,
    /// Step size used when the annealed schedule is disabled.
    pub base_lr: f64,
    pub fd_rotation: f64,
    pub fd_translation: f64,
    /// Step halvings tried per iteration before the step is rejected.
    pub max_halvings: usize,
    /// Stop once the loss improved by less than `plateau_tolerance`
    /// (relative) over this many iterations.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub registration_iterations: usize,
    pub registration_lr: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            msa: MsaConfig::default(),
            kalman: KalmanParams::default(),
            iterations_base: 1000,
            base_lr: 1e-3,
            fd_rotation: 1e-4,
            fd_translation: 1e-4,
            max_halvings: 5,
            plateau_window: 30,
            plateau_tolerance: 1e-4,
            registration_iterations: 10_000,
            registration_lr: 5e-5,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.msa.validate()?;
        self.kalman.validate()?;
        if self.iterations_base == 0 {
            return Err(Error::invalid("iterations_base must be >= 1"));
        }
        for (name, v) in [
            ("fd_rotation", self.fd_rotation),
            ("fd_translation", self.fd_translation),
            ("base_lr", self.base_lr),
            ("registration_lr", self.registration_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.plateau_tolerance >= 0.0) {
            return Err(Error::invalid("plateau_tolerance must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub blur: f64,
    pub acc: f64,
    pub event: f64,
    pub kf: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub index: usize,
    pub losses: LossBreakdown,
    /// Rate at the first iteration of this exposure.
    pub lr: f64,
    pub iterations: usize,
    pub kalman: KalmanState,
    /// Poses at the `N` latent timestamps of this exposure.
    #[serde(skip)]
    pub poses: Vec<PoseSE3>,
    /// Total loss after every accepted step, starting with the initial value.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// Poses of the registered cloud relative to its pose at the first latent
/// timestamp, plus per-exposure diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEstimate {
    pub poses: Vec<TimedPose>,
    pub exposures: Vec<ExposureReport>,
}

impl TrajectoryEstimate {
    /// World poses of the original (unregistered) object frame.
    pub fn object_poses(&self, registration: &SimilarityTransform) -> Vec<TimedPose> {
        self.poses
            .iter()
            .map(|tp| TimedPose {
                time: tp.time,
                pose: PoseSE3 {
                    rotation: tp.pose.rotation.mul(&registration.rotation),
                    translation: tp.pose.apply(&registration.translation),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub transform: SimilarityTransform,
    pub initial_loss: f64,
    pub loss: f64,
    pub iterations: usize,
}

#[derive(Serialize)]
struct TrajectoryDocument<'a> {
    #[serde(flatten)]
    track: PoseFile,
    registration: &'a Registration,
    exposures: &'a [ExposureReport],
}

/// Writes the recovered object trajectory with its diagnostics.
pub fn write_trajectory(
    path: impl AsRef<Path>,
    estimate: &TrajectoryEstimate,
    registration: &Registration,
) -> Result<()> {
    write_json(
        path.as_ref(),
        &TrajectoryDocument {
            track: PoseFile::new(&estimate.object_poses(&registration.transform)),
            registration,
            exposures: &estimate.exposures,
        },
    )
}

/// Intensity-weighted centroid of pixels brighter than the foreground threshold.
pub fn foreground_centroid(img: &Image) -> Option<Vector2<f64>> {
    let mut sum = Vector2::zeros();
    let mut weight = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = img.luma_at(x, y);
            if l > FOREGROUND_THRESHOLD {
                sum += Vector2::new(x as f64, y as f64) * l;
                weight += l;
            }
        }
    }
    (weight > 0.0).then(|| sum / weight)
}

/// World displacement of the object between two frames, from the shift of
/// their foreground centroids back-projected at `depth`.
pub fn observe_displacement(
    prev: &Image,
    curr: &Image,
    camera: &Camera,
    depth: f64,
) -> Result<Vector3<f64>> {
    prev.check_shape(curr)?;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera(depth));
    }
    let a = foreground_centroid(prev).ok_or(Error::NoForeground)?;
    let b = foreground_centroid(curr).ok_or(Error::NoForeground)?;
    let d = b - a;
    Ok(camera.back_project_shift(d.x, d.y, depth))
}

/// Adam moments with a loss-decrease acceptance test.
struct Descent {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Descent {
    fn new(n: usize) -> Self {
        Self {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
        }
    }

    fn direction(&mut self, grad: &DVector<f64>) -> DVector<f64> {
        self.t += 1;
        self.m = &self.m * ADAM_BETA1 + grad * (1.0 - ADAM_BETA1);
        self.v = &self.v * ADAM_BETA2 + grad.component_mul(grad) * (1.0 - ADAM_BETA2);
        let mc = 1.0 - ADAM_BETA1.powi(self.t);
        let vc = 1.0 - ADAM_BETA2.powi(self.t);
        self.m
            .zip_map(&self.v, |m, v| (m / mc) / ((v / vc).sqrt() + ADAM_EPS))
    }
}

/// Smallest carried step scale before a descent gives up.
const MIN_STEP_SCALE: f64 = 1e-4;

/// Step-size memory for the accept-or-halve search. The reduction needed by
/// one step carries over to the next; a step accepted at full size grows it
/// back towards 1.
struct StepScale(f64);

impl StepScale {
    fn accepted(&mut self, halvings: usize) {
        self.0 = if halvings == 0 {
            (self.0 * 2.0).min(1.0)
        } else {
            self.0 * 0.5f64.powi(halvings as i32)
        };
    }

    /// Returns false once the scale is too small to be worth another try.
    fn rejected(&mut self, max_halvings: usize) -> bool {
        self.0 *= 0.5f64.powi(max_halvings as i32 + 1);
        self.0 >= MIN_STEP_SCALE
    }
}

/// Tries `params - rate * dir`, halving `rate` up to `max_halvings` times
/// until the loss does not increase. Returns the accepted point, its loss,
/// the evaluator's extra output and the number of halvings used.
fn backtrack<T>(
    params: &[f64],
    dir: &DVector<f64>,
    mut rate: f64,
    max_halvings: usize,
    loss: f64,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, T)>,
) -> Result<Option<(Vec<f64>, f64, T, usize)>> {
    for h in 0..=max_halvings {
        let trial: Vec<f64> = params
            .iter()
            .zip(dir.iter())
            .map(|(p, d)| p - rate * d)
            .collect();
        let (trial_loss, extra) = eval(&trial)?;
        if trial_loss <= loss {
            return Ok(Some((trial, trial_loss, extra, h)));
        }
        rate *= 0.5;
    }
    Ok(None)
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(format!("{what} loss became {loss}")))
    }
}

fn plateaued(history: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let old = history[history.len() - 1 - window];
    let new = history[history.len() - 1];
    old - new <= tolerance * old.abs().max(1e-12)
}

/// Similarity with rotation and scale about `center`: `p -> s R (p - c) + c + shift`.
fn similarity_about(params: &[f64], center: &Vector3<f64>) -> Result<SimilarityTransform> {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::new(params[0], params[1], params[2]));
    let shift = Vector3::new(params[3], params[4], params[5]);
    let s = params[6].exp();
    SimilarityTransform::new(rot, center + shift - s * rot.rotate(center), s)
}

/// Aligns the cloud to the first latent frame by descending the registration
/// loss over rotation, translation and log-scale.
pub fn register_to_scene(
    cloud: &GaussianCloud,
    first_frame: &Image,
    camera: &Camera,
    cfg: &RecoveryConfig,
) -> Result<Registration> {
    let center = cloud.centroid()?;
    let target = first_frame.to_rgb();
    let target_c = foreground_centroid(&target)
        .ok_or_else(|| Error::Degenerate("registration target has no foreground".into()))?;
    let depth = camera.to_camera_frame(&center).z;
    if depth <= 0.0 {
        return Err(Error::BehindCamera(depth));
    }

    let loss_at = |p: &[f64]| -> Result<f64> {
        let s = similarity_about(p, &center)?;
        let img = splat_render(&cloud.transformed(&s), camera)?;
        check_finite(
            registration_loss(&img, &target, &cfg.weights)?,
            "registration",
        )
    };

    // coarse start: move the rendered foreground centroid onto the target's
    let mut params = vec![0.0; 7];
    let rendered = splat_render(cloud, camera)?;
    if let Some(c) = foreground_centroid(&rendered) {
        let d = target_c - c;
        let shift = camera.back_project_shift(d.x, d.y, depth);
        params[3..6].copy_from_slice(shift.as_slice());
    }
    let identity_loss = loss_at(&[0.0; 7])?;
    let mut loss = loss_at(&params)?;
    if loss > identity_loss {
        params = vec![0.0; 7];
        loss = identity_loss;
    }
    let initial_loss = identity_loss;

    let steps = [
        cfg.fd_rotation,
        cfg.fd_rotation,
        cfg.fd_rotation,
        cfg.fd_translation,
        cfg.fd_translation,
        cfg.fd_translation,
        cfg.fd_translation,
    ];
    let mut descent = Descent::new(7);
    let mut scale = StepScale(1.0);
    let mut history = vec![loss];
    let mut iterations = 0;
    while iterations < cfg.registration_iterations {
        iterations += 1;
        let mut grad = DVector::zeros(7);
        for i in 0..7 {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += steps[i];
            minus[i] -= steps[i];
            grad[i] = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * steps[i]);
        }
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let dir = descent.direction(&grad);
        let rate = cfg.registration_lr * scale.0;
        match backtrack(&params, &dir, rate, cfg.max_halvings, loss, |p| {
            Ok((loss_at(p)?, ()))
        })? {
            Some((p, l, (), h)) => {
                params = p;
                loss = l;
                scale.accepted(h);
            }
            None if scale.rejected(cfg.max_halvings) => continue,
            None => break,
        }
        history.push(loss);
        if plateaued(
            &history,
            10 * cfg.plateau_window,
            cfg.plateau_tolerance * 0.1,
        ) {
            break;
        }
    }
    debug!("registration: loss {initial_loss:.5} -> {loss:.5} in {iterations} iterations");
    Ok(Registration {
        transform: similarity_about(&params, &center)?,
        initial_loss,
        loss,
        iterations,
    })
}

/// Pose changes of one exposure: per sub-frame, an axis-angle rotation about
/// the current centroid and a centroid shift.
fn chain_poses(
    start: &PoseSE3,
    center0: &Vector3<f64>,
    params: &[f64],
) -> (Vec<PoseSE3>, Vec<Vector3<f64>>) {
    let n = params.len() / 6;
    let mut poses = Vec::with_capacity(n + 1);
    let mut centers = Vec::with_capacity(n + 1);
    poses.push(*start);
    centers.push(*center0);
    for j in 0..n {
        let p = &params[6 * j..6 * j + 6];
        let rot = UnitQuaternion::from_axis_angle(&Vector3::new(p[0], p[1], p[2]));
        let shift = Vector3::new(p[3], p[4], p[5]);
        let delta = PoseSE3::about_center(rot, &centers[j], &shift);
        poses.push(delta.compose(&poses[j]));
        centers.push(centers[j] + shift);
    }
    (poses, centers)
}

/// Frame-dependent state cached between loss evaluations.
#[derive(Clone)]
struct Rendered {
    frames: Vec<Image>,
    /// Per-frame event-loss contribution (index 0 unused).
    event_terms: Vec<f64>,
}

/// Everything fixed while one exposure is optimized.
struct ExposureProblem<'a> {
    cloud: &'a GaussianCloud,
    camera: &'a Camera,
    eps: ContrastThreshold,
    weights: LossWeights,
    start: PoseSE3,
    center0: Vector3<f64>,
    blur: &'a Image,
    real_maps: Vec<EventMap>,
    first_log: Vec<f64>,
    first_frame: Image,
    /// Earlier chain centroids that enter the acceleration term.
    prior_centers: Vec<Vector3<f64>>,
    dt: f64,
    /// Filter reference displacements for sub-frames `1..N`.
    kf_reference: Option<Vec<Vector3<f64>>>,
    origin: Vector3<f64>,
}

impl ExposureProblem<'_> {
    fn render_from(
        &self,
        poses: &[PoseSE3],
        base: Option<&Rendered>,
        first_changed: usize,
    ) -> Result<Rendered> {
        let mut out = match base {
            Some(b) => b.clone(),
            None => Rendered {
                frames: vec![self.first_frame.clone(); poses.len()],
                event_terms: vec![0.0; poses.len()],
            },
        };
        let inv_eps = 1.0 / self.eps.value();
        for i in first_changed.max(1)..poses.len() {
            let img = splat_render(&self.cloud.transformed(&poses[i]), self.camera)?;
            let log = log_luminance(&img);
            let real = &self.real_maps[i - 1].values;
            let sum: f64 = log
                .iter()
                .zip(&self.first_log)
                .zip(real)
                .map(|((l, l0), e)| ((l - l0) * inv_eps - e).abs())
                .sum();
            out.event_terms[i] = sum / real.len() as f64;
            out.frames[i] = img;
        }
        Ok(out)
    }

    fn losses(&self, rendered: &Rendered, centers: &[Vector3<f64>]) -> Result<LossBreakdown> {
        let w = &self.weights;
        let mean = crate::events::synthesize_blur(&rendered.frames)?;
        let blur = photometric_loss(&mean, self.blur, w.dssim)?;
        let event = rendered.event_terms[1..].iter().sum();

        let chain: Vec<Vector3<f64>> = self
            .prior_centers
            .iter()
            .chain(centers.iter())
            .copied()
            .collect();
        let accs: Vec<Vector3<f64>> = chain
            .windows(3)
            .map(|c| acceleration(&c[0], &c[1], &c[2], self.dt))
            .collect();
        let acc = if accs.len() >= 2 && w.acc != 0.0 {
            acc_loss(&accs)?
        } else {
            0.0
        };

        let kf = match &self.kf_reference {
            Some(refs) if w.kf != 0.0 => refs
                .iter()
                .zip(&centers[1..])
                .map(|(r, c)| (r - (c - self.origin)).norm_squared())
                .sum(),
            _ => 0.0,
        };
        let total = check_finite(total_loss(blur, acc, event, kf, w), "recovery")?;
        Ok(LossBreakdown {
            blur,
            acc,
            event,
            kf,
            total,
        })
    }

    fn evaluate(
        &self,
        params: &[f64],
        base: Option<&Rendered>,
        first_changed: usize,
    ) -> Result<(LossBreakdown, Rendered)> {
        let (poses, centers) = chain_poses(&self.start, &self.center0, params);
        let rendered = self.render_from(&poses, base, first_changed)?;
        Ok((self.losses(&rendered, &centers)?, rendered))
    }
}

fn check_bundles(bundles: &[FrameBundle], camera: &Camera) -> Result<usize> {
    if bundles.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: bundles.len(),
        });
    }
    let n = bundles[0].boundaries.len();
    if n < 2 {
        return Err(Error::InputMismatch(
            "exposures need at least two latent timestamps".into(),
        ));
    }
    let mut last_time = f64::NEG_INFINITY;
    for b in bundles {
        if b.boundaries.len() != n || b.bins.len() != n - 1 {
            return Err(Error::InputMismatch(format!(
                "exposure {} has {} timestamps and {} bins, expected {} and {}",
                b.index,
                b.boundaries.len(),
                b.bins.len(),
                n,
                n - 1
            )));
        }
        if b.blur.width() != camera.width || b.blur.height() != camera.height {
            return Err(Error::InputMismatch(format!(
                "exposure {} blur is {}x{}, camera is {}x{}",
                b.index,
                b.blur.width(),
                b.blur.height(),
                camera.width,
                camera.height
            )));
        }
        if b.bins
            .iter()
            .any(|bin| bin.width != camera.width || bin.height != camera.height)
        {
            return Err(Error::InputMismatch(format!(
                "exposure {} event bins do not match the camera",
                b.index
            )));
        }
        if !(b.boundaries[0] >= last_time) || b.boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotonicTime(format!(
                "exposure {} timestamps",
                b.index
            )));
        }
        last_time = b.boundaries[n - 1];
    }
    Ok(n)
}

/// Recovers the pose of a registered cloud at every latent timestamp.
pub fn recover(
    cloud: &GaussianCloud,
    bundles: &[FrameBundle],
    camera: &Camera,
    eps: ContrastThreshold,
    cfg: &RecoveryConfig,
) -> Result<TrajectoryEstimate> {
    cfg.validate()?;
    let n = check_bundles(bundles, camera)?;
    let origin = cloud.centroid()?;
    let t0 = bundles[0].boundaries[0];
    // time unit inside the recovery: one frame period
    let period = bundles[1].boundaries[0] - t0;
    let dt = (bundles[0].boundaries[1] - t0) / period;

    let latents: Vec<Vec<Image>> = bundles
        .iter()
        .map(|b| b.deblur(eps))
        .collect::<Result<_>>()?;
    let first_latent = &latents[0][0];

    let mut poses = vec![TimedPose {
        time: t0,
        pose: PoseSE3::IDENTITY,
    }];
    let mut centers = vec![origin];
    let mut reports: Vec<ExposureReport> = Vec::with_capacity(bundles.len());
    let mut tracker = MsaTracker::new(cfg.msa);
    let mut state: Option<KalmanState> = None;
    let mut accel = Vector3::zeros();
    let mut prev_params = vec![0.0; 6 * (n - 1)];
    let mut prev_displacement = Vector3::zeros();

    for (k, bundle) in bundles.iter().enumerate() {
        let last = poses.last().unwrap();
        let contiguous = (bundle.boundaries[0] - last.time).abs() <= 1e-9 * period.max(1.0);
        let (start, center0) = if contiguous {
            (last.pose, *centers.last().unwrap())
        } else {
            // bridge the shutter gap at the last sub-frame's rates
            let s = (bundle.boundaries[0] - last.time) / (period * dt);
            let p = &prev_params[6 * (n - 2)..];
            let rot = UnitQuaternion::from_axis_angle(&(Vector3::new(p[0], p[1], p[2]) * s));
            let shift = Vector3::new(p[3], p[4], p[5]) * s;
            let c = *centers.last().unwrap();
            (
                PoseSE3::about_center(rot, &c, &shift).compose(&last.pose),
                c + shift,
            )
        };
        let prior_centers: Vec<Vector3<f64>> = if contiguous {
            let end = centers.len() - 1;
            centers[end.saturating_sub(n - 1)..end].to_vec()
        } else {
            Vec::new()
        };
        let kf_reference = state.map(|s| {
            let last_time = poses.last().unwrap().time;
            bundle.boundaries[1..]
                .iter()
                .map(|&t| {
                    let tau = (t - last_time) / period;
                    s.displacement() + s.velocity() * tau + accel * (0.5 * tau * tau)
                })
                .collect()
        });
        let first_frame = splat_render(&cloud.transformed(&start), camera)?;
        let problem = ExposureProblem {
            cloud,
            camera,
            eps,
            weights: cfg.weights,
            start,
            center0,
            blur: &bundle.blur,
            real_maps: bundle.cumulative_maps()?,
            first_log: log_luminance(&first_frame),
            first_frame,
            prior_centers,
            dt,
            kf_reference,
            origin,
        };

        let init = if k == 0 {
            vec![0.0; 6 * (n - 1)]
        } else {
            prev_params.clone()
        };
        // the first exposure runs at the base rate: nothing has moved yet
        let rate_at = |it: usize| match tracker.rate(it as u32) {
            Some(r) if cfg.msa.enabled => r,
            _ => cfg.base_lr,
        };
        let lr0 = rate_at(0);
        let (params, losses, history) = optimize_exposure(&problem, init, cfg, rate_at)?;

        let (chain, chain_centers) = chain_poses(&start, &center0, &params);
        for i in 1..n {
            poses.push(TimedPose {
                time: bundle.boundaries[i],
                pose: chain[i],
            });
            centers.push(chain_centers[i]);
        }
        let m = centers.len();
        accel = if k == 0 {
            Vector3::zeros()
        } else {
            acceleration(&centers[m - 3], &centers[m - 2], &centers[m - 1], dt)
        };

        // filter update with the event-deblurred observation
        let depth = camera.to_camera_frame(&centers[m - 1]).z;
        let z = observe_displacement(first_latent, &latents[k][n - 1], camera, depth)?;
        let prior = match state {
            Some(s) => s,
            None => KalmanState::initial(z / (bundle.boundaries[n - 1] - t0) * period),
        };
        let posterior = kalman::step(&prior, &accel, &z, &cfg.kalman)?;
        let t_mag = (posterior.displacement() - prev_displacement).norm();
        tracker.observe(t_mag);
        prev_displacement = posterior.displacement();
        state = Some(posterior);

        info!(
            "exposure {k}: total {:.5} (blur {:.5}, acc {:.5}, event {:.5}, kf {:.5}) after {} steps",
            losses.total,
            losses.blur,
            losses.acc,
            losses.event,
            losses.kf,
            history.len() - 1
        );
        reports.push(ExposureReport {
            index: bundle.index,
            losses,
            lr: lr0,
            iterations: history.len() - 1,
            kalman: posterior,
            poses: chain,
            history,
        });
        prev_params = params;
    }
    Ok(TrajectoryEstimate {
        poses,
        exposures: reports,
    })
}

fn optimize_exposure(
    problem: &ExposureProblem,
    mut params: Vec<f64>,
    cfg: &RecoveryConfig,
    rate_at: impl Fn(usize) -> f64,
) -> Result<(Vec<f64>, LossBreakdown, Vec<f64>)> {
    let dim = params.len();
    let (mut losses, mut current) = problem.evaluate(&params, None, 0)?;
    let mut history = vec![losses.total];
    let mut descent = Descent::new(dim);
    let mut scale = StepScale(1.0);
    for it in 0..cfg.iterations_base {
        let mut grad = DVector::zeros(dim);
        for i in 0..dim {
            let h = if i % 6 < 3 {
                cfg.fd_rotation
            } else {
                cfg.fd_translation
            };
            // changing delta j moves frames j+1.. only
            let first_changed = i / 6 + 1;
            let mut p = params.clone();
            p[i] += h;
            let (plus, _) = problem.evaluate(&p, Some(&current), first_changed)?;
            p[i] -= 2.0 * h;
            let (minus, _) = problem.evaluate(&p, Some(&current), first_changed)?;
            grad[i] = (plus.total - minus.total) / (2.0 * h);
        }
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let dir = descent.direction(&grad);
        let rate = rate_at(it) * scale.0;
        let found = backtrack(&params, &dir, rate, cfg.max_halvings, losses.total, |p| {
            let (l, rendered) = problem.evaluate(p, Some(&current), 1)?;
            Ok((l.total, (l, rendered)))
        })?;
        match found {
            Some((p, _, (l, rendered), h)) => {
                params = p;
                losses = l;
                current = rendered;
                scale.accepted(h);
            }
            None if scale.rejected(cfg.max_halvings) => continue,
            None => {
                debug!("no descent at step {it}, stopping");
                break;
            }
        }
        history.push(losses.total);
        if plateaued(&history, cfg.plateau_window, cfg.plateau_tolerance) {
            break;
        }
    }
    if history.len() == 1 {
        warn!("exposure optimization made no progress");
    }
    Ok((params, losses, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianKernel;

    fn camera() -> Camera {
        Camera::new(100.0, 20.0, 20.0, 40, 40, PoseSE3::IDENTITY).unwrap()
    }

    fn blob(center: Vector3<f64>) -> GaussianCloud {
        let mut kernels = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let p = center + Vector3::new(i as f64 - 2.0, j as f64 - 2.0, 0.0) * 0.06;
                let c = if (i + j) % 2 == 0 { [0.9; 3] } else { [0.4; 3] };
                kernels.push(GaussianKernel::new(p, 0.05, c, 0.9).unwrap());
            }
        }
        GaussianCloud::new(kernels).unwrap()
    }

    #[test]
    fn observe_displacement_examples() {
        let mut a = Image::new(20, 20, 1);
        a.set(5, 5, 0, 1.0);
        let mut b = Image::new(20, 20, 1);
        b.set(9, 5, 0, 1.0);
        let cam = Camera::new(100.0, 10.0, 10.0, 20, 20, PoseSE3::IDENTITY).unwrap();
        assert_eq!(
            observe_displacement(&a, &a, &cam, 2.0).unwrap(),
            Vector3::zeros()
        );
        let d = observe_displacement(&a, &b, &cam, 2.0).unwrap();
        assert!((d - Vector3::new(0.08, 0.0, 0.0)).amax() < 1e-15);
        assert!(matches!(
            observe_displacement(&a, &Image::new(20, 20, 1), &cam, 2.0),
            Err(Error::NoForeground)
        ));
    }

    #[test]
    fn chain_of_zero_params_is_static() {
        let start = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let (poses, centers) = chain_poses(&start, &Vector3::new(1.0, 2.0, 3.0), &[0.0; 12]);
        assert!(poses.iter().all(|p| *p == start));
        assert!(centers.iter().all(|c| *c == Vector3::new(1.0, 2.0, 3.0)));
    }

    #[test]
    fn chain_moves_the_centroid_by_the_shifts() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        let c0 = cloud.centroid().unwrap();
        let params = [
            0.1, -0.2, 0.3, 0.01, 0.02, 0.0, -0.05, 0.1, 0.2, 0.0, -0.03, 0.01,
        ];
        let (poses, centers) = chain_poses(&PoseSE3::IDENTITY, &c0, &params);
        for (p, c) in poses.iter().zip(&centers) {
            let moved = cloud.transformed(p).centroid().unwrap();
            assert!((moved - c).amax() < 1e-12);
        }
    }

    #[test]
    fn registration_of_an_aligned_cloud_stays_at_identity() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        let target = splat_render(&cloud, &camera()).unwrap();
        let cfg = RecoveryConfig {
            registration_iterations: 200,
            ..Default::default()
        };
        let reg = register_to_scene(&cloud, &target, &camera(), &cfg).unwrap();
        assert!(reg.transform.translation.norm() <= 1e-3, "{reg:?}");
        assert!((reg.transform.scale_factor() - 1.0).abs() <= 1e-3);
        assert!(reg.loss <= reg.initial_loss);
    }

    #[test]
    fn registration_recovers_an_image_shift() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        // three pixels to the right at depth 2 and focal 100
        let shifted = cloud.transformed(&PoseSE3::from_translation(Vector3::new(0.06, 0.0, 0.0)));
        let target = splat_render(&shifted, &camera()).unwrap();
        let cfg = RecoveryConfig {
            registration_iterations: 300,
            ..Default::default()
        };
        let reg = register_to_scene(&cloud, &target, &camera(), &cfg).unwrap();
        let got = camera()
            .project(&reg.transform.apply(&cloud.centroid().unwrap()))
            .unwrap()
            .pixel;
        let want = camera()
            .project(&shifted.centroid().unwrap())
            .unwrap()
            .pixel;
        assert!((got - want).norm() < 0.5, "{got:?} vs {want:?}");
        assert!(reg.loss <= reg.initial_loss);
    }

    #[test]
    fn registration_to_a_blank_frame_is_degenerate() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        let r = register_to_scene(
            &cloud,
            &Image::new(40, 40, 3),
            &camera(),
            &RecoveryConfig::default(),
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    fn static_bundles(cloud: &GaussianCloud, count: usize, n: usize) -> Vec<FrameBundle> {
        let img = splat_render(cloud, &camera()).unwrap();
        (0..count)
            .map(|k| {
                let boundaries: Vec<f64> =
                    (0..n).map(|i| (k * (n - 1) + i) as f64 * 0.01).collect();
                let bins = boundaries
                    .windows(2)
                    .map(|w| EventBin {
                        width: 40,
                        height: 40,
                        t_start: w[0],
                        t_end: w[1],
                        counts: vec![0; 1600],
                    })
                    .collect();
                FrameBundle {
                    index: k,
                    blur: img.clone(),
                    bins,
                    boundaries,
                }
            })
            .collect()
    }

    #[test]
    fn static_scene_recovers_identity() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        let bundles = static_bundles(&cloud, 3, 4);
        let cfg = RecoveryConfig {
            iterations_base: 50,
            ..Default::default()
        };
        let est = recover(
            &cloud,
            &bundles,
            &camera(),
            ContrastThreshold::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(est.poses.len(), 3 * 3 + 1);
        assert!(est.poses.windows(2).all(|w| w[1].time > w[0].time));
        for tp in &est.poses {
            assert!(tp.pose.rotation.angle_to(&UnitQuaternion::IDENTITY) <= 1e-3);
            assert!(tp.pose.translation.norm() <= 1e-3);
        }
        for r in &est.exposures {
            assert!(r.kalman.cov.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn mismatched_bins_are_rejected() {
        let cloud = blob(Vector3::new(0.0, 0.0, 2.0));
        let mut bundles = static_bundles(&cloud, 2, 4);
        bundles[1].bins.pop();
        let r = recover(
            &cloud,
            &bundles,
            &camera(),
            ContrastThreshold::default(),
            &RecoveryConfig::default(),
        );
        assert!(matches!(r, Err(Error::InputMismatch(_))));
        let r = recover(
            &cloud,
            &bundles[..1],
            &camera(),
            ContrastThreshold::default(),
            &RecoveryConfig::default(),
        );
        assert!(matches!(r, Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn plateau_detection() {
        assert!(!plateaued(&[3.0, 2.0, 1.0], 2, 1e-3));
        assert!(plateaued(&[1.0, 1.0, 1.0], 2, 1e-3));
        assert!(!plateaued(&[1.0], 2, 1e-3));
    }
}
