//! Isotropic Gaussian kernels: the explicit object model.

mod fit;
mod prune;
mod render;

pub use fit::fit_cloud_appearance;
pub use prune::prune_density;
pub use render::{splat_render, RenderTrace};

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vec3_serde, Transform3};

/// One isotropic kernel: covariance is `radius^2 * I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianKernel {
    #[serde(rename = "mu", with = "vec3_serde")]
    pub position: Vector3<f64>,
    #[serde(rename = "r")]
    pub radius: f64,
    #[serde(rename = "rgb")]
    pub color: [f64; 3],
    #[serde(rename = "alpha")]
    pub opacity: f64,
}

impl GaussianKernel {
    pub fn new(position: Vector3<f64>, radius: f64, color: [f64; 3], opacity: f64) -> Result<Self> {
        let k = Self {
            position,
            radius,
            color,
            opacity,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("kernel position must be finite"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel radius must be > 0, got {}",
                self.radius
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::invalid(format!(
                "kernel opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "kernel color {:?} outside [0, 1]",
                self.color
            )));
        }
        Ok(())
    }
}

/// Ordered list of kernels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    kernels: Vec<GaussianKernel>,
}

impl GaussianCloud {
    pub fn new(kernels: Vec<GaussianKernel>) -> Result<Self> {
        for k in &kernels {
            k.validate()?;
        }
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[GaussianKernel] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [GaussianKernel] {
        &mut self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.kernels.is_empty() {
            Err(Error::EmptyCloud)
        } else {
            Ok(())
        }
    }

    /// Volume-weighted mean position: `sum R^3 mu / sum R^3`.
    pub fn centroid(&self) -> Result<Vector3<f64>> {
        self.require_non_empty()?;
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for k in &self.kernels {
            let w = k.radius.powi(3);
            num += w * k.position;
            den += w;
        }
        Ok(num / den)
    }

    /// Moves every center through `t` and scales radii by its scale factor.
    pub fn transformed<T: Transform3>(&self, t: &T) -> GaussianCloud {
        let s = t.scale();
        GaussianCloud {
            kernels: self
                .kernels
                .iter()
                .map(|k| GaussianKernel {
                    position: t.apply(&k.position),
                    radius: k.radius * s,
                    ..*k
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.kernels).expect("kernels serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let kernels: Vec<GaussianKernel> =
            serde_json::from_str(text).map_err(|e| Error::Format {
                what: "cloud json".into(),
                detail: format!("line {} column {}: {e}", e.line(), e.column()),
            })?;
        Self::new(kernels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what: format!("{what} {}", path.display()),
                detail,
            },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Free-function form of [`GaussianCloud::centroid`].
pub fn centroid(cloud: &GaussianCloud) -> Result<Vector3<f64>> {
    cloud.centroid()
}

/// Free-function form of [`GaussianCloud::transformed`].
pub fn transform_cloud<T: Transform3>(cloud: &GaussianCloud, t: &T) -> GaussianCloud {
    cloud.transformed(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PoseSE3, SimilarityTransform, UnitQuaternion};
    use proptest::prelude::*;

    fn kernel(p: [f64; 3], r: f64) -> GaussianKernel {
        GaussianKernel::new(Vector3::from(p), r, [0.5; 3], 1.0).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let one = GaussianCloud::new(vec![kernel([1.0, 2.0, 3.0], 0.3)]).unwrap();
        assert_eq!(one.centroid().unwrap(), Vector3::new(1.0, 2.0, 3.0));

        let pair =
            GaussianCloud::new(vec![kernel([0.0; 3], 1.0), kernel([2.0, 0.0, 0.0], 1.0)]).unwrap();
        assert_eq!(pair.centroid().unwrap(), Vector3::new(1.0, 0.0, 0.0));

        // weights 1^3 and 2^3: (0*1 + 3*8) / 9
        let skew =
            GaussianCloud::new(vec![kernel([0.0; 3], 1.0), kernel([3.0, 0.0, 0.0], 2.0)]).unwrap();
        assert!((skew.centroid().unwrap().x - 8.0 * 3.0 / 9.0).abs() < 1e-12);

        assert!(matches!(
            GaussianCloud::default().centroid(),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn transform_examples() {
        let cloud = GaussianCloud::new(vec![
            kernel([1.0, 0.0, 0.0], 1.0),
            kernel([0.0, 2.0, 1.0], 0.5),
        ])
        .unwrap();
        assert_eq!(cloud.transformed(&PoseSE3::IDENTITY), cloud);

        let shifted = cloud.transformed(&PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let d = shifted.centroid().unwrap() - cloud.centroid().unwrap();
        assert!((d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        let s2 = SimilarityTransform::new(UnitQuaternion::IDENTITY, Vector3::zeros(), 2.0).unwrap();
        let scaled = cloud.transformed(&s2);
        for (a, b) in scaled.kernels().iter().zip(cloud.kernels()) {
            assert_eq!(a.radius, 2.0 * b.radius);
        }
        // centroid weights scale uniformly by 8, so the centroid doubles
        let c0 = cloud.centroid().unwrap();
        let c1 = scaled.centroid().unwrap();
        assert!((c1 - 2.0 * c0).norm() < 1e-12);
    }

    #[test]
    fn json_schema_and_parse_errors() {
        let cloud = GaussianCloud::new(vec![kernel([1.0, 2.0, 3.0], 0.25)]).unwrap();
        let text = cloud.to_json();
        assert!(text.contains("\"mu\"") && text.contains("\"alpha\""));
        assert_eq!(GaussianCloud::from_json(&text).unwrap(), cloud);

        let err = GaussianCloud::from_json("[{\"mu\":[1,2,3],\"r\":0.1,").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(
            GaussianCloud::from_json(r#"[{"mu":[0,0,0],"r":-1,"rgb":[0,0,0],"alpha":1}]"#).is_err()
        );
    }

    fn cloud_strategy() -> impl Strategy<Value = GaussianCloud> {
        prop::collection::vec(
            (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, 0.05..2.0f64),
            1..30,
        )
        .prop_map(|v| {
            GaussianCloud::new(
                v.into_iter()
                    .map(|(x, y, z, r)| kernel([x, y, z], r))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn centroid_commutes_with_similarity(
            cloud in cloud_strategy(),
            (ax, ay, az) in (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64),
            (tx, ty, tz) in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
            s in 0.2..4.0f64,
        ) {
            let t = SimilarityTransform::new(
                UnitQuaternion::from_axis_angle(&Vector3::new(ax, ay, az)),
                Vector3::new(tx, ty, tz),
                s,
            ).unwrap();
            let lhs = cloud.transformed(&t).centroid().unwrap();
            let rhs = t.apply(&cloud.centroid().unwrap());
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }
    }
}
