//! Virtual measurements: each sensor reading is rewritten as a linear
//! constraint `y = H x + v` on the landmark position in the robot frame.
//!
//! 2D bearing vectors: `h = (cos th, -sin th)` annihilates `x = r (sin th, cos th)`
//! and `h* = (sin th, cos th)` recovers its range. The 3D versions add the
//! elevation row and use `x = r (cos ph sin th, cos ph cos th, sin ph)`.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::state::RobotInputs;

/// Below this speed (m/s) time-to-contact and range-rate rows are unreliable.
pub const EPS_U: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingObs {
    pub theta: f64,
    /// Elevation; present only in 3D.
    pub phi: Option<f64>,
    pub sigma_theta: f64,
    pub sigma_phi: f64,
}

impl BearingObs {
    pub fn planar(theta: f64, sigma_theta: f64) -> Self {
        Self {
            theta,
            phi: None,
            sigma_theta,
            sigma_phi: 0.0,
        }
    }

    pub fn spatial(theta: f64, phi: f64, sigma_theta: f64, sigma_phi: f64) -> Self {
        Self {
            theta,
            phi: Some(phi),
            sigma_theta,
            sigma_phi,
        }
    }

    pub fn dim(&self) -> usize {
        if self.phi.is_some() {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObs {
    pub r: f64,
    pub sigma_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingRateObs {
    pub theta_dot: f64,
    pub phi_dot: Option<f64>,
    pub sigma_theta_dot: f64,
    pub sigma_phi_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeToContactObs {
    pub tau: f64,
    /// Visual angle the value was derived from (rad), if known.
    pub alpha: Option<f64>,
    /// Feature size (m), if known.
    pub diameter: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerObs {
    pub r: f64,
    pub r_dot: f64,
    pub sigma_r: f64,
    pub sigma_r_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeObs {
    pub f: f64,
    pub y1: f64,
    pub y2: f64,
    /// Image-plane noise standard deviation (image units).
    pub sigma: f64,
}

/// Sensor combination feeding one landmark filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorCase {
    /// Bearing only.
    BearingOnly,
    /// Bearing and range.
    BearingRange,
    /// Bearing and bearing rate (optical flow).
    BearingRate,
    /// Bearing and time to contact.
    TimeToContact,
    /// Range and range rate, no bearing.
    RangeRate,
}

impl SensorCase {
    pub const ALL: [SensorCase; 5] = [
        SensorCase::BearingOnly,
        SensorCase::BearingRange,
        SensorCase::BearingRate,
        SensorCase::TimeToContact,
        SensorCase::RangeRate,
    ];

    /// Case number 1..=5.
    pub fn number(self) -> u8 {
        match self {
            SensorCase::BearingOnly => 1,
            SensorCase::BearingRange => 2,
            SensorCase::BearingRate => 3,
            SensorCase::TimeToContact => 4,
            SensorCase::RangeRate => 5,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.number() == n)
            .ok_or_else(|| SlamError::InvalidInput(format!("unknown sensor case {n}")))
    }

    pub fn has_bearing(self) -> bool {
        self != SensorCase::RangeRate
    }
}

/// One instant's readings of a single landmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Bearing(BearingObs),
    BearingRange(BearingObs, RangeObs),
    BearingRate(BearingObs, BearingRateObs),
    TimeToContact(BearingObs, TimeToContactObs),
    RangeRate(DopplerObs),
}

impl Observation {
    pub fn case(&self) -> SensorCase {
        match self {
            Observation::Bearing(_) => SensorCase::BearingOnly,
            Observation::BearingRange(..) => SensorCase::BearingRange,
            Observation::BearingRate(..) => SensorCase::BearingRate,
            Observation::TimeToContact(..) => SensorCase::TimeToContact,
            Observation::RangeRate(_) => SensorCase::RangeRate,
        }
    }

    pub fn bearing(&self) -> Option<&BearingObs> {
        match self {
            Observation::Bearing(b)
            | Observation::BearingRange(b, _)
            | Observation::BearingRate(b, _)
            | Observation::TimeToContact(b, _) => Some(b),
            Observation::RangeRate(_) => None,
        }
    }

    /// Measured range, if the sensor provides one directly.
    pub fn range(&self) -> Option<f64> {
        match self {
            Observation::BearingRange(_, r) => Some(r.r),
            Observation::RangeRate(d) => Some(d.r),
            _ => None,
        }
    }

    /// Range implied by the reading and the inputs, if any (time to contact
    /// yields `|tau h* u|`).
    pub fn range_hint(&self, inputs: &RobotInputs) -> Option<f64> {
        match self {
            Observation::TimeToContact(b, t) => {
                let (_, hs) = bearing_vectors(b);
                let radial = (&hs * &inputs.u)[0];
                (radial.abs() >= EPS_U).then(|| (t.tau * radial).abs())
            }
            other => other.range(),
        }
    }

    /// Spatial dimension of the reading, when it can be told (range-rate
    /// readings carry no direction).
    pub fn dim(&self) -> Option<usize> {
        self.bearing().map(BearingObs::dim)
    }
}

/// What a constraint row measures; drives how its noise variance is ported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    /// `h x = 0` azimuth row.
    Tangential,
    /// Second bearing row in 3D (elevation).
    Elevation,
    /// `h* x = r`.
    Range,
    /// Azimuth-rate row of the bearing-rate case.
    AzimuthRate,
    /// Elevation-rate row of the bearing-rate case (3D).
    ElevationRate,
    /// `h* x = |tau h* u|`.
    TimeToContact,
    /// `-u^T x = r r'`.
    RangeRate,
    /// Pinhole image row.
    Image,
    /// Consensus feedback row.
    Feedback,
}

/// Unweighted constraint rows `y = H x` together with their kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub kinds: Vec<RowKind>,
    /// Set when a row was dropped because the instant is degenerate.
    pub degraded: bool,
}

impl LinearConstraint {
    pub fn new(y: DVector<f64>, h: DMatrix<f64>, kinds: Vec<RowKind>) -> Self {
        debug_assert_eq!(y.len(), h.nrows());
        debug_assert_eq!(y.len(), kinds.len());
        Self {
            y,
            h,
            kinds,
            degraded: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// `y - H x`
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.h * x
    }

    /// Keeps only the rows whose index satisfies the predicate.
    pub fn select_rows(&self, keep: impl Fn(usize, RowKind) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.rows()).filter(|&i| keep(i, self.kinds[i])).collect();
        Self {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            h: self.h.select_rows(idx.iter()),
            kinds: idx.iter().map(|&i| self.kinds[i]).collect(),
            degraded: self.degraded,
        }
    }
}

/// A `(y, H, R)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMeasurement {
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl VirtualMeasurement {
    pub fn new(y: DVector<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = y.len();
        if h.nrows() != m || r.nrows() != m || r.ncols() != m {
            return Err(SlamError::Dimension(format!(
                "y has {m} rows, H has {}, R is {}x{}",
                h.nrows(),
                r.nrows(),
                r.ncols()
            )));
        }
        if y.iter().chain(h.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(SlamError::NonFinite("virtual measurement"));
        }
        if m > 0 && r.clone().cholesky().is_none() {
            return Err(SlamError::SingularNoise);
        }
        Ok(Self { y, h, r })
    }

    pub fn from_constraint(c: LinearConstraint, r: DMatrix<f64>) -> Result<Self> {
        Self::new(c.y, c.h, r)
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.h * x
    }

    /// Stacks two measurements over the same state; noise is block diagonal.
    pub fn stack(&self, other: &VirtualMeasurement) -> Result<Self> {
        if self.state_dim() != other.state_dim() {
            return Err(SlamError::Dimension("stacked measurements disagree on state size".into()));
        }
        let (m1, m2, n) = (self.rows(), other.rows(), self.state_dim());
        let mut y = DVector::zeros(m1 + m2);
        y.rows_mut(0, m1).copy_from(&self.y);
        y.rows_mut(m1, m2).copy_from(&other.y);
        let mut h = DMatrix::zeros(m1 + m2, n);
        h.view_mut((0, 0), (m1, n)).copy_from(&self.h);
        h.view_mut((m1, 0), (m2, n)).copy_from(&other.h);
        let mut r = DMatrix::zeros(m1 + m2, m1 + m2);
        r.view_mut((0, 0), (m1, m1)).copy_from(&self.r);
        r.view_mut((m1, m1), (m2, m2)).copy_from(&other.r);
        Self::new(y, h, r)
    }
}

/// 2D bearing vectors `(h, h*)` as 1x2 rows.
pub fn bearing_vectors_2d(theta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, c) = theta.sin_cos();
    (
        DMatrix::from_row_slice(1, 2, &[c, -s]),
        DMatrix::from_row_slice(1, 2, &[s, c]),
    )
}

/// 3D bearing vectors: `h` is 2x3, `h*` is 1x3.
pub fn bearing_vectors_3d(theta: f64, phi: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (
        DMatrix::from_row_slice(2, 3, &[ct, -st, 0.0, -sp * st, -sp * ct, cp]),
        DMatrix::from_row_slice(1, 3, &[cp * st, cp * ct, sp]),
    )
}

pub fn bearing_vectors(b: &BearingObs) -> (DMatrix<f64>, DMatrix<f64>) {
    match b.phi {
        Some(phi) => bearing_vectors_3d(b.theta, phi),
        None => bearing_vectors_2d(b.theta),
    }
}

fn bearing_kinds(b: &BearingObs) -> Vec<RowKind> {
    match b.phi {
        Some(_) => vec![RowKind::Tangential, RowKind::Elevation],
        None => vec![RowKind::Tangential],
    }
}

fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let n = top.ncols();
    let (a, b) = (top.nrows(), bottom.nrows());
    let mut out = DMatrix::zeros(a + b, n);
    out.view_mut((0, 0), (a, n)).copy_from(top);
    out.view_mut((a, 0), (b, n)).copy_from(bottom);
    out
}

fn concat(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(top.len() + bottom.len(), top.iter().chain(bottom.iter()).copied())
}

fn check_dim(inputs: &RobotInputs, dim: usize) -> Result<()> {
    if inputs.dim() != dim {
        return Err(SlamError::Dimension(format!(
            "{}D inputs for a {dim}D observation",
            inputs.dim()
        )));
    }
    Ok(())
}

/// Case I: `0 = h x`.
pub fn case1(b: &BearingObs) -> LinearConstraint {
    let (h, _) = bearing_vectors(b);
    LinearConstraint::new(DVector::zeros(h.nrows()), h, bearing_kinds(b))
}

/// Case II: `[0; r] = [h; h*] x`.
pub fn case2(b: &BearingObs, range: &RangeObs) -> LinearConstraint {
    let (h, hs) = bearing_vectors(b);
    let mut kinds = bearing_kinds(b);
    kinds.push(RowKind::Range);
    let y = concat(&DVector::zeros(h.nrows()), &DVector::from_element(1, range.r));
    LinearConstraint::new(y, vstack(&h, &hs), kinds)
}

/// Case III: bearing plus the rate row `(th' h* + h Omega) x = -h u`
/// (3D: the derivative of each bearing row, per azimuth and elevation rate).
pub fn case3(b: &BearingObs, rate: &BearingRateObs, inputs: &RobotInputs) -> Result<LinearConstraint> {
    check_dim(inputs, b.dim())?;
    let (h, hs) = bearing_vectors(b);
    let omega = inputs.omega.matrix();
    let d = match b.phi {
        None => &hs * rate.theta_dot,
        Some(_) => {
            let (st, ct) = b.theta.sin_cos();
            let phi_dot = rate.phi_dot.ok_or_else(|| {
                SlamError::InvalidInput("3D bearing-rate reading needs an elevation rate".into())
            })?;
            let mut d = DMatrix::zeros(2, 3);
            d[(0, 0)] = rate.theta_dot * st;
            d[(0, 1)] = rate.theta_dot * ct;
            d.row_mut(1).copy_from(&(&hs * phi_dot).row(0));
            d
        }
    };
    let rate_rows = d + &h * omega;
    let hu = &h * &inputs.u;
    let y = concat(&DVector::zeros(h.nrows()), &(-hu));
    let mut kinds = bearing_kinds(b);
    kinds.push(RowKind::AzimuthRate);
    if b.phi.is_some() {
        kinds.push(RowKind::ElevationRate);
    }
    Ok(LinearConstraint::new(y, vstack(&h, &rate_rows), kinds))
}

/// Case IV: `[0; |tau h* u|] = [h; h*] x`. When the radial speed `|h* u|` is
/// below [`EPS_U`] the radial row is dropped and the constraint degrades to
/// Case I.
pub fn case4(b: &BearingObs, ttc: &TimeToContactObs, inputs: &RobotInputs) -> Result<LinearConstraint> {
    check_dim(inputs, b.dim())?;
    if !(ttc.tau > 0.0) {
        return Err(SlamError::InvalidInput(format!("time to contact {} must be positive", ttc.tau)));
    }
    let (h, hs) = bearing_vectors(b);
    let radial = (&hs * &inputs.u)[0];
    if radial.abs() < EPS_U {
        let mut c = case1(b);
        c.degraded = true;
        return Ok(c);
    }
    let mut kinds = bearing_kinds(b);
    kinds.push(RowKind::TimeToContact);
    let y = concat(&DVector::zeros(h.nrows()), &DVector::from_element(1, (ttc.tau * radial).abs()));
    Ok(LinearConstraint::new(y, vstack(&h, &hs), kinds))
}

/// Case V: `r r' = -u^T x`, from differentiating `r^2 = x^T x` under
/// `x' = -Omega x - u`. Returns `None` when `|u|` is below [`EPS_U`].
pub fn case5(d: &DopplerObs, inputs: &RobotInputs) -> Option<LinearConstraint> {
    if inputs.u.norm() < EPS_U {
        return None;
    }
    let h = -inputs.u.transpose();
    Some(LinearConstraint::new(
        DVector::from_element(1, d.r * d.r_dot),
        DMatrix::from_row_slice(1, h.len(), h.as_slice()),
        vec![RowKind::RangeRate],
    ))
}

/// Builds the unweighted constraint for any observation. `None` means the
/// instant carries no usable rows.
pub fn constraint(obs: &Observation, inputs: &RobotInputs) -> Result<Option<LinearConstraint>> {
    Ok(Some(match obs {
        Observation::Bearing(b) => case1(b),
        Observation::BearingRange(b, r) => case2(b, r),
        Observation::BearingRate(b, rate) => case3(b, rate, inputs)?,
        Observation::TimeToContact(b, t) => case4(b, t, inputs)?,
        Observation::RangeRate(d) => match case5(d, inputs) {
            Some(c) => c,
            None => return Ok(None),
        },
    }))
}

/// Pinhole camera: `[[f, 0, y1], [0, f, y2]] x = 0` for image point `(y1, y2) = -f (x1, x2) / x3`.
pub fn pinhole(obs: &PinholeObs) -> Result<LinearConstraint> {
    if !(obs.f > 0.0) {
        return Err(SlamError::InvalidInput(format!("focal length {} must be positive", obs.f)));
    }
    Ok(LinearConstraint::new(
        DVector::zeros(2),
        pinhole_matrix(obs),
        vec![RowKind::Image, RowKind::Image],
    ))
}

fn pinhole_matrix(obs: &PinholeObs) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[obs.f, 0.0, obs.y1, 0.0, obs.f, obs.y2])
}

/// Structure-from-motion constraint on the stacked state `(x_feature, x_camera)`:
/// `M T (x_i - x_c) = 0` with `T` the global-to-camera rotation. The flag is
/// set when the current estimates put feature and camera at the same point.
pub fn sfm_constraint(
    obs: &PinholeObs,
    camera_from_global: &Matrix3<f64>,
    x_feature: &DVector<f64>,
    x_camera: &DVector<f64>,
) -> Result<LinearConstraint> {
    let base = pinhole(obs)?;
    let t = DMatrix::from_iterator(3, 3, camera_from_global.iter().copied());
    let mt = &base.h * t;
    let mut h = DMatrix::zeros(2, 6);
    h.view_mut((0, 0), (2, 3)).copy_from(&mt);
    h.view_mut((0, 3), (2, 3)).copy_from(&(-&mt));
    let mut c = LinearConstraint::new(DVector::zeros(2), h, base.kinds);
    c.degraded = (x_feature - x_camera).norm() < 1e-12;
    Ok(c)
}

/// Noise-free sensor values for a landmark at body-frame position `x`,
/// with rates from the relative kinematics `x' = -Omega x - u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdealReading {
    pub theta: f64,
    pub phi: Option<f64>,
    pub r: f64,
    pub theta_dot: f64,
    pub phi_dot: Option<f64>,
    pub r_dot: f64,
    /// `r / |r'|`; infinite when the range is not changing.
    pub tau: f64,
}

pub fn ideal_reading(x: &DVector<f64>, inputs: &RobotInputs) -> Result<IdealReading> {
    check_dim(inputs, x.len())?;
    let xdot = -(inputs.omega.matrix() * x) - &inputs.u;
    let r = x.norm();
    if r == 0.0 {
        return Err(SlamError::InvalidInput("landmark coincides with the robot".into()));
    }
    let r_dot = x.dot(&xdot) / r;
    let rho2 = x[0] * x[0] + x[1] * x[1];
    let theta = x[0].atan2(x[1]);
    let theta_dot = if rho2 > 0.0 {
        (x[1] * xdot[0] - x[0] * xdot[1]) / rho2
    } else {
        0.0
    };
    let (phi, phi_dot) = if x.len() == 3 {
        let rho = rho2.sqrt();
        let rho_dot = if rho > 0.0 {
            (x[0] * xdot[0] + x[1] * xdot[1]) / rho
        } else {
            0.0
        };
        (
            Some(x[2].atan2(rho)),
            Some((rho * xdot[2] - x[2] * rho_dot) / (r * r)),
        )
    } else {
        (None, None)
    };
    let tau = if r_dot == 0.0 { f64::INFINITY } else { r / r_dot.abs() };
    Ok(IdealReading {
        theta,
        phi,
        r,
        theta_dot,
        phi_dot,
        r_dot,
        tau,
    })
}

/// Body-frame position `r (cos ph sin th, cos ph cos th, sin ph)` (planar when `phi` is `None`).
pub fn position_from_bearing(theta: f64, phi: Option<f64>, r: f64) -> DVector<f64> {
    let (st, ct) = theta.sin_cos();
    match phi {
        None => DVector::from_vec(vec![r * st, r * ct]),
        Some(phi) => {
            let (sp, cp) = phi.sin_cos();
            DVector::from_vec(vec![r * cp * st, r * cp * ct, r * sp])
        }
    }
}
