use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evsplat::events::synthesize_blur;
use evsplat::gaussian::{splat_render, GaussianCloud};
use evsplat::image::Image;
use evsplat::metrics::{psnr, ssim, trajectory_metrics, TrackMetrics};
use evsplat::recovery::{recover as recover_trajectory, register_to_scene, write_trajectory};
use evsplat::scene::Dataset;
use evsplat::trajectory::{match_by_time, read_poses, FORMAT_VERSION};
use evsplat::Error;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Common};

/// Poses closer in time than this are considered the same instant.
const TIME_MATCH_TOLERANCE: f64 = 1e-9;

fn out_dir(common: &Common, fallback: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = match (&common.out, fallback) {
        (Some(d), _) => d.clone(),
        (None, Some(f)) => f.to_path_buf(),
        (None, None) => return Err(CliError::Config("--out is required".into())),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn say(common: &Common, text: impl AsRef<str>) {
    if !common.quiet {
        println!("{}", text.as_ref());
    }
}

pub fn simulate(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = out_dir(common, None)?;
    let summary = cfg.scene.generate(cfg.seed, &out)?;
    say(
        common,
        format!(
            "exposures: {}\nevents: {}\npath length: {:.6}",
            summary.exposures, summary.events, summary.path_length
        ),
    );
    Ok(())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: file not found", path.display())))
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require_file(&dir.join("meta.json"))?;
    require_file(&dir.join("events.txt"))?;
    Ok(Dataset::load(dir)?)
}

pub fn deblur(common: &Common, dataset: &Path) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    let out = out_dir(common, Some(dataset))?;
    let eps = data.meta.capture.contrast_threshold;
    let mut scores = Vec::new();
    for bundle in &data.bundles {
        let k = bundle.index;
        let latents = bundle.deblur(eps)?;
        for (i, img) in latents.iter().enumerate() {
            img.save_png(out.join(format!("edi_{k:04}_{i:02}.png")))?;
        }
        if let Some(sharps) = data.sharps(k)? {
            let mut sum = 0.0;
            for (a, b) in latents.iter().zip(&sharps) {
                sum += psnr(a, b)?;
            }
            let mean = sum / latents.len() as f64;
            say(common, format!("exposure {k}: PSNR {mean:.2} dB"));
            scores.push(mean);
        }
    }
    if !scores.is_empty() {
        say(
            common,
            format!(
                "mean PSNR: {:.2} dB",
                scores.iter().sum::<f64>() / scores.len() as f64
            ),
        );
    }
    Ok(())
}

fn load_cloud(path: &Path) -> Result<GaussianCloud, CliError> {
    require_file(path)?;
    GaussianCloud::load(path).map_err(|e| match e {
        Error::Format { .. } | Error::InvalidParameter(_) => CliError::Config(e.to_string()),
        other => other.into(),
    })
}

pub fn recover(common: &Common, dataset: &Path, cloud_path: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let cloud_path = cloud_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("cloud.json"));
    let cloud = load_cloud(&cloud_path)?;
    let data = load_dataset(dataset)?;
    let out = out_dir(common, None)?;
    let camera = data.meta.capture.camera;
    let eps = data.meta.capture.contrast_threshold;

    let first = data.bundles[0].deblur(eps)?.swap_remove(0);
    let registration = register_to_scene(&cloud, &first, &camera, &cfg.recovery)?;
    info!(
        "registration loss {:.5} -> {:.5} after {} iterations",
        registration.initial_loss, registration.loss, registration.iterations
    );
    let registered = cloud.transformed(&registration.transform);
    let estimate = recover_trajectory(&registered, &data.bundles, &camera, eps, &cfg.recovery)?;
    write_trajectory(out.join("trajectory.json"), &estimate, &registration)?;

    let mut csv = String::from("exposure,blur,acc,event,kf,total,lr\n");
    for r in &estimate.exposures {
        let l = &r.losses;
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.index, l.blur, l.acc, l.event, l.kf, l.total, r.lr
        )
        .unwrap();
    }
    let csv_path = out.join("losses.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;

    for (bundle, report) in data.bundles.iter().zip(&estimate.exposures) {
        let k = bundle.index;
        let renders = report
            .poses
            .iter()
            .map(|p| splat_render(&registered.transformed(p), &camera))
            .collect::<evsplat::Result<Vec<_>>>()?;
        for (i, img) in renders.iter().enumerate() {
            img.save_png(out.join(format!("render_{k:04}_{i:02}.png")))?;
        }
        let reblurred = synthesize_blur(&renders)?;
        let data: Vec<f64> = bundle
            .blur
            .data()
            .iter()
            .zip(reblurred.data())
            .map(|(b, r)| 0.5 * b + 0.5 * r)
            .collect();
        Image::from_vec(camera.width, camera.height, 3, data)?
            .save_png(out.join(format!("overlay_{k:04}.png")))?;
    }

    if data.ground_truth.is_some() {
        let report = evaluate_dirs(dataset, &out)?;
        write_metrics(&out, &report)?;
        say(
            common,
            format!(
                "IoU {:.4}  ATE {:.5}  RMSE {:.5}",
                report.iou, report.ate, report.rmse
            ),
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FrameScore {
    exposure: usize,
    subframe: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    format: u32,
    frames: Vec<FrameScore>,
    mean_psnr: f64,
    mean_ssim: f64,
    iou: f64,
    ate: f64,
    rmse: f64,
    matched_poses: usize,
}

fn frame_pairs(
    gt: &Path,
    result: &Path,
    exposures: usize,
    subframes: usize,
) -> Result<Vec<(usize, usize, Image, Image)>, CliError> {
    let mut pairs = Vec::new();
    let mut missing = 0;
    for k in 0..exposures {
        for i in 0..subframes {
            let g = gt.join(format!("sharp_{k:04}_{i:02}.png"));
            let r = result.join(format!("render_{k:04}_{i:02}.png"));
            match (g.is_file(), r.is_file()) {
                (true, true) => pairs.push((
                    k,
                    i,
                    Image::load_png(&g)?.to_rgb(),
                    Image::load_png(&r)?.to_rgb(),
                )),
                (false, false) => {}
                _ => missing += 1,
            }
        }
    }
    if missing > 0 {
        return Err(
            Error::LengthMismatch(format!("{missing} frames present on only one side")).into(),
        );
    }
    Ok(pairs)
}

fn evaluate_dirs(gt: &Path, result: &Path) -> Result<MetricsReport, CliError> {
    let gt_traj = gt.join("trajectory_gt.json");
    let est_traj = result.join("trajectory.json");
    require_file(&gt_traj)?;
    require_file(&est_traj)?;
    let gt_poses = read_poses(&gt_traj)?;
    let est_poses = read_poses(&est_traj)?;
    let matched = match_by_time(&gt_poses, &est_poses, TIME_MATCH_TOLERANCE);
    if matched.len() != gt_poses.len() || matched.len() != est_poses.len() {
        return Err(Error::LengthMismatch(format!(
            "{} ground-truth and {} estimated poses, {} share a timestamp",
            gt_poses.len(),
            est_poses.len(),
            matched.len()
        ))
        .into());
    }
    let (gt_track, est_track): (Vec<_>, Vec<_>) = matched.into_iter().unzip();

    let meta_path = gt.join("meta.json");
    let (exposures, subframes) = if meta_path.is_file() {
        let meta = Dataset::load(gt)?.meta;
        (meta.exposures, meta.capture.subframes)
    } else {
        (0, 0)
    };
    let pairs = frame_pairs(gt, result, exposures, subframes)?;
    let mut frames = Vec::with_capacity(pairs.len());
    for (k, i, g, r) in &pairs {
        frames.push(FrameScore {
            exposure: *k,
            subframe: *i,
            psnr: psnr(r, g)?,
            ssim: ssim(r, g)?,
        });
    }
    let (gt_frames, est_frames): (Vec<Image>, Vec<Image>) =
        pairs.into_iter().map(|(_, _, g, r)| (g, r)).unzip();
    let TrackMetrics { iou, ate, rmse } =
        trajectory_metrics(&gt_track, &est_track, &gt_frames, &est_frames)?;
    let n = frames.len().max(1) as f64;
    Ok(MetricsReport {
        format: FORMAT_VERSION,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
        iou,
        ate,
        rmse,
        matched_poses: gt_track.len(),
    })
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let path = dir.join("metrics.json");
    let mut text = serde_json::to_string_pretty(report).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn evaluate(common: &Common, gt: &Path, result: &Path) -> Result<(), CliError> {
    let report = evaluate_dirs(gt, result)?;
    let out = out_dir(common, Some(result))?;
    write_metrics(&out, &report)?;
    say(
        common,
        format!(
            "PSNR {:.2} dB  SSIM {:.4}  IoU {:.4}  ATE {:.5}  RMSE {:.5}",
            report.mean_psnr, report.mean_ssim, report.iou, report.ate, report.rmse
        ),
    );
    Ok(())
}
