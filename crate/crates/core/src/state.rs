use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SlamError};
use crate::geom::AngularVelocity;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

/// Estimate and covariance of one LTV Kalman filter instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

impl FilterState {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, t: f64) -> Result<Self> {
        if p.nrows() != x.len() || p.ncols() != x.len() {
            return Err(SlamError::Dimension(format!(
                "state has {} entries but covariance is {}x{}",
                x.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(SlamError::NonFinite("filter state"));
        }
        let asym = asymmetry(&p);
        if asym > SYMMETRY_TOL {
            return Err(SlamError::InvalidCovariance(format!(
                "relative asymmetry {asym:.3e}"
            )));
        }
        let min_eig = min_eigenvalue(&p);
        let tr = p.trace().abs().max(f64::MIN_POSITIVE);
        if min_eig < -PSD_TOL * tr {
            return Err(SlamError::InvalidCovariance(format!(
                "minimum eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { x, p, t })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Contraction metric `M = P^-1`, when `P` is invertible.
    pub fn metric(&self) -> Option<DMatrix<f64>> {
        self.p.clone().cholesky().map(|c| c.inverse())
    }
}

/// `||P - P^T|| / max(1, ||P||)`
pub fn asymmetry(p: &DMatrix<f64>) -> f64 {
    (p - p.transpose()).norm() / p.norm().max(1.0)
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let sym = (p + p.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Clamps negative eigenvalues of a symmetric matrix to zero.
pub fn clamp_psd(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(p.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return p.clone();
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Measured body twist driving the relative kinematics `x' = -Omega x - u`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotInputs {
    pub u: DVector<f64>,
    pub omega: AngularVelocity,
    /// Process noise intensity (m^2/s).
    pub q: DMatrix<f64>,
}

impl RobotInputs {
    pub fn new(u: DVector<f64>, omega: AngularVelocity, q: DMatrix<f64>) -> Result<Self> {
        let d = u.len();
        if omega.dim() != d || q.nrows() != d || q.ncols() != d {
            return Err(SlamError::Dimension(format!(
                "inputs: u has {d} entries, omega is {}D, Q is {}x{}",
                omega.dim(),
                q.nrows(),
                q.ncols()
            )));
        }
        if asymmetry(&q) > SYMMETRY_TOL || min_eigenvalue(&q) < -PSD_TOL * q.trace().abs().max(1.0) {
            return Err(SlamError::InvalidCovariance("process noise Q".into()));
        }
        Ok(Self { u, omega, q })
    }

    pub fn still(dim: usize) -> Self {
        Self {
            u: DVector::zeros(dim),
            omega: AngularVelocity::zero(dim),
            q: DMatrix::zeros(dim, dim),
        }
    }

    /// Planar twist with isotropic process noise.
    pub fn planar(u1: f64, u2: f64, omega_z: f64, q: f64) -> Self {
        Self {
            u: DVector::from_vec(vec![u1, u2]),
            omega: AngularVelocity::planar(omega_z),
            q: DMatrix::identity(2, 2) * q,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

/// Exponential decay rate fitted to an error series, plus the metric it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionDiagnostics {
    pub metric: Option<DMatrix<f64>>,
    /// Fitted decay rate (1/s); `+inf` when the series reached exactly zero.
    pub rate: f64,
    /// Coefficient of determination of the log-error regression.
    pub r_squared: f64,
}

/// Least-squares slope of `ln e` against `t`; the decay rate is the negated slope.
pub fn fit_contraction_rate(series: &[(f64, f64)]) -> Result<ContractionDiagnostics> {
    if series.len() < 10 {
        return Err(SlamError::InvalidInput(format!(
            "need at least 10 samples, got {}",
            series.len()
        )));
    }
    if series.iter().any(|(t, e)| !t.is_finite() || !e.is_finite()) {
        return Err(SlamError::NonFinite("error series"));
    }
    if series.iter().any(|&(_, e)| e <= 0.0) {
        return Ok(ContractionDiagnostics {
            metric: None,
            rate: f64::INFINITY,
            r_squared: 1.0,
        });
    }
    if series.iter().all(|&(_, e)| e == series[0].1) {
        return Ok(ContractionDiagnostics {
            metric: None,
            rate: 0.0,
            r_squared: 1.0,
        });
    }
    let n = series.len() as f64;
    let (mt, ml) = series
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, e)| (a + t / n, b + e.ln() / n));
    let (mut stt, mut stl, mut sll) = (0.0, 0.0, 0.0);
    for &(t, e) in series {
        let dt = t - mt;
        let dl = e.ln() - ml;
        stt += dt * dt;
        stl += dt * dl;
        sll += dl * dl;
    }
    if stt == 0.0 {
        return Err(SlamError::InvalidInput("all samples share one time".into()));
    }
    let slope = stl / stt;
    let r_squared = if sll == 0.0 { 1.0 } else { (stl * stl) / (stt * sll) };
    Ok(ContractionDiagnostics {
        metric: None,
        rate: if slope == 0.0 { 0.0 } else { -slope },
        r_squared,
    })
}
