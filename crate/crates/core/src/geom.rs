//! Frames, rotations and angular-velocity matrices.
//!
//! Body frame: `x2` points forward, `x1` to the right, and the bearing of a
//! point `x` is `theta = atan2(x1, x2)`. Headings are measured in the global
//! frame counter-clockwise from the global `+x1` axis, so a vehicle with
//! heading `beta` and speed `u` moves with `(u cos beta, u sin beta)` and the
//! heading rate equals the body yaw rate `omega_z`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Shortest signed arc from `from` to `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle(to - from)
}

/// Planar rotation by a wrapped angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation2D {
    angle: f64,
}

impl Rotation2D {
    pub fn new(angle: f64) -> Result<Self> {
        if !angle.is_finite() {
            return Err(SlamError::NonFinite("rotation angle"));
        }
        Ok(Self {
            angle: wrap_angle(angle),
        })
    }

    pub fn identity() -> Self {
        Self { angle: 0.0 }
    }

    /// Rotation taking global coordinates into the body frame of a vehicle
    /// with the given heading: `x_body = T(beta) (x_global - p)`.
    pub fn body_from_global(heading: f64) -> Result<Self> {
        Self::new(FRAC_PI_2 - heading)
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// `[[cos, -sin], [sin, cos]]`
    pub fn matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn dmatrix(&self) -> DMatrix<f64> {
        let m = self.matrix();
        DMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
    }

    pub fn inverse(&self) -> Self {
        Self {
            angle: wrap_angle(-self.angle),
        }
    }

    pub fn compose(&self, other: &Rotation2D) -> Self {
        Self {
            angle: wrap_angle(self.angle + other.angle),
        }
    }

    pub fn apply(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.matrix() * v
    }
}

/// Skew-symmetric angular velocity matrix in 2D or 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularVelocity {
    rates: Vec<f64>,
}

impl AngularVelocity {
    /// 2D yaw rate.
    pub fn planar(omega_z: f64) -> Self {
        Self {
            rates: vec![omega_z],
        }
    }

    /// 3D body rates `(omega_x, omega_y, omega_z)`.
    pub fn spatial(omega_x: f64, omega_y: f64, omega_z: f64) -> Self {
        Self {
            rates: vec![omega_x, omega_y, omega_z],
        }
    }

    pub fn zero(dim: usize) -> Self {
        match dim {
            3 => Self::spatial(0.0, 0.0, 0.0),
            _ => Self::planar(0.0),
        }
    }

    pub fn dim(&self) -> usize {
        if self.rates.len() == 1 {
            2
        } else {
            3
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Yaw component.
    pub fn omega_z(&self) -> f64 {
        *self.rates.last().expect("non-empty rates")
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self.rates.as_slice() {
            [wz] => DMatrix::from_row_slice(2, 2, &[0.0, -wz, *wz, 0.0]),
            [wx, wy, wz] => DMatrix::from_row_slice(
                3,
                3,
                &[0.0, -wz, *wy, *wz, 0.0, -wx, -wy, *wx, 0.0],
            ),
            _ => unreachable!("angular velocity holds 1 or 3 rates"),
        }
    }
}

/// Convenience: planar skew matrix `[[0, -w], [w, 0]]`.
pub fn skew2(omega_z: f64) -> DMatrix<f64> {
    AngularVelocity::planar(omega_z).matrix()
}

pub fn skew3(omega_x: f64, omega_y: f64, omega_z: f64) -> DMatrix<f64> {
    AngularVelocity::spatial(omega_x, omega_y, omega_z).matrix()
}

/// `J = [[0, 1], [-1, 0]]`, the bilinear form used by the heading-alignment inputs.
pub fn j_matrix() -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, -1.0, 0.0)
}

pub fn vec2(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}
