//! Timestamped pose lists and their JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

/// Version tag written into every JSON document.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub time: f64,
    pub pose: PoseSE3,
}

/// On-disk layout: parallel `timestamps` and `poses` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct PoseFile {
    pub format: u32,
    pub timestamps: Vec<f64>,
    pub poses: Vec<PoseSE3>,
}

impl PoseFile {
    pub fn new(poses: &[TimedPose]) -> Self {
        Self {
            format: FORMAT_VERSION,
            timestamps: poses.iter().map(|p| p.time).collect(),
            poses: poses.iter().map(|p| p.pose).collect(),
        }
    }
}

pub(crate) fn check_format(format: u32, what: &str) -> Result<()> {
    if format != FORMAT_VERSION {
        return Err(Error::Format {
            what: what.into(),
            detail: format!("unsupported format {format}, expected {FORMAT_VERSION}"),
        });
    }
    Ok(())
}

pub(crate) fn check_times(poses: &[TimedPose]) -> Result<()> {
    for w in poses.windows(2) {
        if !(w[1].time > w[0].time) {
            return Err(Error::NonMonotonicTime(format!(
                "pose times {} then {}",
                w[0].time, w[1].time
            )));
        }
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: format!("{what} {}", path.display()),
        detail: format!("{} at line {} column {}", e, e.line(), e.column()),
    })
}

/// Writes `{"format": 1, "timestamps": [...], "poses": [{"q": .., "t": ..}, ...]}`.
pub fn write_poses(path: impl AsRef<Path>, poses: &[TimedPose]) -> Result<()> {
    write_json(path.as_ref(), &PoseFile::new(poses))
}

/// Reads the timestamped poses of any trajectory document; other fields are
/// ignored.
pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<TimedPose>> {
    let path = path.as_ref();
    let file: PoseFile = read_json(path, "trajectory")?;
    check_format(file.format, "trajectory")?;
    if file.timestamps.len() != file.poses.len() {
        return Err(Error::Format {
            what: format!("trajectory {}", path.display()),
            detail: format!(
                "{} timestamps but {} poses",
                file.timestamps.len(),
                file.poses.len()
            ),
        });
    }
    let poses: Vec<TimedPose> = file
        .timestamps
        .into_iter()
        .zip(file.poses)
        .map(|(time, pose)| TimedPose { time, pose })
        .collect();
    check_times(&poses)?;
    Ok(poses)
}

/// Pairs of poses whose timestamps agree within `tolerance` seconds.
pub fn match_by_time(a: &[TimedPose], b: &[TimedPose], tolerance: f64) -> Vec<(PoseSE3, PoseSE3)> {
    let mut out = Vec::new();
    let mut j = 0;
    for pa in a {
        while j < b.len() && b[j].time < pa.time - tolerance {
            j += 1;
        }
        if j < b.len() && (b[j].time - pa.time).abs() <= tolerance {
            out.push((pa.pose, b[j].pose));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tp(time: f64, x: f64) -> TimedPose {
        TimedPose {
            time,
            pose: PoseSE3::from_translation(Vector3::new(x, 0.0, 0.0)),
        }
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.json");
        let poses = vec![tp(0.0, 1.0), tp(0.5, 2.0)];
        write_poses(&path, &poses).unwrap();
        assert_eq!(read_poses(&path).unwrap(), poses);

        let text = std::fs::read_to_string(&path).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["timestamps"], serde_json::json!([0.0, 0.5]));
        assert_eq!(doc["poses"][1]["t"], serde_json::json!([2.0, 0.0, 0.0]));

        std::fs::write(&path, r#"{"format": 2, "timestamps": [], "poses": []}"#).unwrap();
        assert!(matches!(read_poses(&path), Err(Error::Format { .. })));
        std::fs::write(&path, r#"{"format": 1, "timestamps": [0.0], "poses": []}"#).unwrap();
        assert!(matches!(read_poses(&path), Err(Error::Format { .. })));
        write_poses(&path, &[tp(1.0, 0.0), tp(0.5, 0.0)]).unwrap();
        assert!(matches!(read_poses(&path), Err(Error::NonMonotonicTime(_))));
        std::fs::write(&path, "{\"format\": 1,\n \"timestamps\": [oops]}").unwrap();
        match read_poses(&path) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("line 2"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matching_by_time() {
        let a = vec![tp(0.0, 0.0), tp(1.0, 1.0), tp(2.0, 2.0), tp(3.0, 3.0)];
        let b = vec![tp(1.0 + 1e-12, 10.0), tp(2.5, 20.0), tp(3.0, 30.0)];
        let m = match_by_time(&a, &b, 1e-9);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].1.translation.x, 10.0);
        assert_eq!(m[1].0.translation.x, 3.0);
    }
}
