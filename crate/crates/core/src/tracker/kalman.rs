//! Constant-velocity Kalman filter over `[x, y, z, vx, vz]`.
//!
//! Velocity is planar: `y` only moves through corrections, which anchor it
//! to the ground-plane bottom point.

use nalgebra::{Matrix3, Matrix3x5, Matrix5, SymmetricEigen, Vector5};

use crate::error::{Error, Result};
use crate::geometry::{project_to_ground, GroundPlane, Vec3};

const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: Vector5<f64>,
    pub cov: Matrix5<f64>,
}

fn transition() -> Matrix5<f64> {
    let mut f = Matrix5::identity();
    f[(0, 3)] = 1.0;
    f[(2, 4)] = 1.0;
    f
}

fn observation_model() -> Matrix3x5<f64> {
    let mut h = Matrix3x5::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 2)] = 1.0;
    h
}

/// Measurement vector for an observed position: `y` is replaced by the
/// height of the position's projection onto the ground plane.
pub fn measurement(obs_pos: &Vec3, plane: Option<&GroundPlane>) -> Vec3 {
    match plane {
        Some(plane) => Vec3::new(obs_pos.x, project_to_ground(obs_pos, plane).y, obs_pos.z),
        None => *obs_pos,
    }
}

impl KalmanState {
    pub fn new(pos: Vec3, vel: [f64; 2], pos_var: f64, vel_var: f64) -> Self {
        Self {
            mean: Vector5::new(pos.x, pos.y, pos.z, vel[0], vel[1]),
            cov: Matrix5::from_diagonal(&Vector5::new(pos_var, pos_var, pos_var, vel_var, vel_var)),
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.mean[0], self.mean[1], self.mean[2])
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.mean[3], self.mean[4]]
    }

    pub fn position_cov(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Same state with the velocity sign flipped, for filtering backwards in time.
    pub fn reversed(&self) -> Self {
        let flip = Matrix5::from_diagonal(&Vector5::new(1.0, 1.0, 1.0, -1.0, -1.0));
        Self {
            mean: flip * self.mean,
            cov: flip * self.cov * flip,
        }
    }

    pub fn predict(&self, process_noise: f64) -> Self {
        let f = transition();
        let mut cov = f * self.cov * f.transpose();
        for i in 0..5 {
            cov[(i, i)] += process_noise;
        }
        Self {
            mean: f * self.mean,
            cov,
        }
    }

    /// Innovation covariance of a position measurement.
    pub fn innovation_cov(&self, obs_noise: f64) -> Matrix3<f64> {
        self.position_cov() + Matrix3::identity() * obs_noise
    }

    /// Linear correction with a position measurement (already ground-anchored).
    pub fn correct(&self, z: &Vec3, obs_noise: f64) -> Result<Self> {
        let h = observation_model();
        let s = self.innovation_cov(obs_noise);
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Invariant("singular innovation covariance".into()))?;
        let gain = self.cov * h.transpose() * s_inv;
        let innovation = z - h * self.mean;
        let mean = self.mean + gain * innovation;
        // Joseph form keeps the covariance symmetric positive semi-definite.
        let ikh = Matrix5::identity() - gain * h;
        let mut cov = ikh * self.cov * ikh.transpose()
            + gain * Matrix3::identity() * obs_noise * gain.transpose();
        cov = (cov + cov.transpose()) * 0.5;
        let next = Self { mean, cov };
        if !next.is_psd() {
            return Err(Error::Invariant("covariance lost positive semi-definiteness".into()));
        }
        Ok(next)
    }

    pub fn is_psd(&self) -> bool {
        if (self.cov - self.cov.transpose()).abs().max() > PSD_TOLERANCE {
            return false;
        }
        if !self.cov.iter().all(|v| v.is_finite()) {
            return false;
        }
        SymmetricEigen::new(self.cov).eigenvalues.min() >= -PSD_TOLERANCE
    }
}

pub fn kalman_predict(state: &KalmanState, process_noise: f64) -> KalmanState {
    state.predict(process_noise)
}

pub fn kalman_correct(
    state: &KalmanState,
    obs_pos: &Vec3,
    plane: Option<&GroundPlane>,
    obs_noise: f64,
) -> Result<KalmanState> {
    state.correct(&measurement(obs_pos, plane), obs_noise)
}
