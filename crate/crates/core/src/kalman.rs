//! Constant-acceleration Kalman filter over `[displacement, velocity]`.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Innovation covariances with a larger condition number are rejected.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    #[serde(with = "rows")]
    pub x: Vector6<f64>,
    #[serde(with = "rows")]
    pub cov: Matrix6<f64>,
}

impl KalmanState {
    pub fn new(displacement: Vector3<f64>, velocity: Vector3<f64>, cov: Matrix6<f64>) -> Self {
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&displacement);
        x.fixed_rows_mut::<3>(3).copy_from(&velocity);
        Self { x, cov }
    }

    /// Zero displacement, the given velocity and the default prior covariance.
    pub fn initial(velocity: Vector3<f64>) -> Self {
        let mut cov = Matrix6::zeros();
        for i in 0..3 {
            cov[(i, i)] = 1e-2;
            cov[(i + 3, i + 3)] = 1e-1;
        }
        Self::new(Vector3::zeros(), velocity, cov)
    }

    pub fn displacement(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanParams {
    pub dt: f64,
    pub sigma_t2: f64,
    pub sigma_v2: f64,
    #[serde(with = "rows")]
    pub r_obs: Matrix3<f64>,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            dt: 1.0,
            sigma_t2: 1e-4,
            sigma_v2: 1e-3,
            r_obs: Matrix3::identity() * 1e-2,
        }
    }
}

impl KalmanParams {
    pub fn new(dt: f64, sigma_t2: f64, sigma_v2: f64, r_obs: Matrix3<f64>) -> Result<Self> {
        let p = Self {
            dt,
            sigma_t2,
            sigma_v2,
            r_obs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!(
                "kalman dt must be > 0, got {}",
                self.dt
            )));
        }
        if !(self.sigma_t2 >= 0.0 && self.sigma_v2 >= 0.0) {
            return Err(Error::invalid(
                "kalman process noise variances must be >= 0",
            ));
        }
        if (self.r_obs - self.r_obs.transpose()).amax() > 1e-12 {
            return Err(Error::invalid(
                "observation noise covariance must be symmetric",
            ));
        }
        if self.r_obs.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::invalid(
                "observation noise covariance must be positive semidefinite",
            ));
        }
        Ok(())
    }

    fn transition(&self) -> Matrix6<f64> {
        let mut f = Matrix6::identity();
        for i in 0..3 {
            f[(i, i + 3)] = self.dt;
        }
        f
    }

    fn control(&self) -> SMatrix<f64, 6, 3> {
        let mut g = SMatrix::<f64, 6, 3>::zeros();
        for i in 0..3 {
            g[(i, i)] = 0.5 * self.dt * self.dt;
            g[(i + 3, i)] = self.dt;
        }
        g
    }

    fn process_noise(&self) -> Matrix6<f64> {
        let mut q = Matrix6::zeros();
        for i in 0..3 {
            q[(i, i)] = self.sigma_t2;
            q[(i + 3, i + 3)] = self.sigma_v2;
        }
        q
    }
}

fn symmetrize(c: &Matrix6<f64>) -> Matrix6<f64> {
    (c + c.transpose()) * 0.5
}

pub fn predict(state: &KalmanState, accel: &Vector3<f64>, params: &KalmanParams) -> KalmanState {
    let f = params.transition();
    KalmanState {
        x: f * state.x + params.control() * accel,
        cov: symmetrize(&(f * state.cov * f.transpose() + params.process_noise())),
    }
}

pub fn update(state: &KalmanState, z: &Vector3<f64>, params: &KalmanParams) -> Result<KalmanState> {
    let prior_pos = state.cov.fixed_view::<3, 3>(0, 0).into_owned();
    let s = prior_pos + params.r_obs;
    let sv = s.singular_values();
    let cond = if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    if cond > MAX_CONDITION {
        return Err(Error::SingularInnovation(cond));
    }
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation(cond))?;
    // C H^T is the first three columns of C
    let ch = state.cov.fixed_view::<6, 3>(0, 0).into_owned();
    let gain = ch * s_inv;
    let innovation = z - state.displacement();
    let mut kh = Matrix6::zeros();
    kh.fixed_view_mut::<6, 3>(0, 0).copy_from(&gain);
    Ok(KalmanState {
        x: state.x + gain * innovation,
        cov: symmetrize(&((Matrix6::identity() - kh) * state.cov)),
    })
}

pub fn step(
    state: &KalmanState,
    accel: &Vector3<f64>,
    z: &Vector3<f64>,
    params: &KalmanParams,
) -> Result<KalmanState> {
    update(&predict(state, accel, params), z, params)
}

/// Matrices as JSON arrays of rows.
mod rows {
    use nalgebra::SMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const R: usize, const C: usize>(
        m: &SMatrix<f64, R, C>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        if C == 1 {
            rows.iter().map(|r| r[0]).collect::<Vec<_>>().serialize(s)
        } else {
            rows.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const R: usize, const C: usize>(
        d: D,
    ) -> Result<SMatrix<f64, R, C>, D::Error> {
        let flat: Vec<f64> = if C == 1 {
            Vec::<f64>::deserialize(d)?
        } else {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            if rows.iter().any(|r| r.len() != C) {
                return Err(D::Error::custom(format!("expected rows of length {C}")));
            }
            rows.concat()
        };
        if flat.len() != R * C {
            return Err(D::Error::custom(format!("expected a {R}x{C} matrix")));
        }
        Ok(SMatrix::from_row_slice(&flat))
    }
}
