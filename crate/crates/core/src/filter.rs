//! Continuous-time LTV Kalman filter engine.
//!
//! Every filter in the crate is an instance of
//!
//! ```text
//! x' = A x + b + K (y - H x),      K = P H^T R^-1
//! P' = A P + P A^T + Q - P H^T R^-1 H P
//! ```
//!
//! integrated with a fixed step. With small `R` the measurement part becomes
//! stiff, so explicit steps are subdivided when the estimated stiffness calls
//! for it, and past a cap the step switches to the exact solution of the
//! measurement flow.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::state::{clamp_psd, symmetrize, FilterState, RobotInputs};
use crate::vmeas::VirtualMeasurement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
    /// Strang splitting: half a step of the drift, the measurement flow
    /// solved exactly over the full step, half a step of the drift.
    Split,
}

impl std::str::FromStr for Integrator {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            "split" => Ok(Integrator::Split),
            other => Err(SlamError::InvalidInput(format!("unknown integrator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub dt: f64,
    pub integrator: Integrator,
    pub psd_repair: bool,
    /// Cap on the substeps an explicit integrator may take within one step.
    pub max_substeps: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            integrator: Integrator::Rk4,
            psd_repair: false,
            max_substeps: 64,
        }
    }
}

impl FilterConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self { dt, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SlamError::InvalidInput(format!("dt = {} must be positive", self.dt)));
        }
        if self.max_substeps == 0 {
            return Err(SlamError::InvalidInput("max_substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `K = P H^T R^-1`
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain {
    pub k: DMatrix<f64>,
}

pub fn gain(state: &FilterState, vm: &VirtualMeasurement) -> Result<KalmanGain> {
    check_measurement(state.dim(), vm)?;
    let chol = vm.r.clone().cholesky().ok_or(SlamError::SingularNoise)?;
    // K^T = R^-1 H P
    let kt = chol.solve(&(&vm.h * &state.p));
    Ok(KalmanGain { k: kt.transpose() })
}

/// Drift `A x + b` and process noise `Q` of one step. `a = None` means `A = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    pub a: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl LtvSystem {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `A = -blockdiag(Omega)`, `b = -(u, u, ...)`: every block is a point
    /// seen from the moving robot.
    pub fn robot_frame(inputs: &RobotInputs, blocks: usize) -> Self {
        let d = inputs.dim();
        let omega = inputs.omega.matrix();
        let mut a = DMatrix::zeros(d * blocks, d * blocks);
        let mut b = DVector::zeros(d * blocks);
        let mut q = DMatrix::zeros(d * blocks, d * blocks);
        for k in 0..blocks {
            a.view_mut((k * d, k * d), (d, d)).copy_from(&(-&omega));
            b.rows_mut(k * d, d).copy_from(&(-&inputs.u));
            q.view_mut((k * d, k * d), (d, d)).copy_from(&inputs.q);
        }
        let nonzero = omega.iter().any(|v| *v != 0.0);
        Self {
            a: nonzero.then_some(a),
            b,
            q,
        }
    }
}

struct Prepared<'a> {
    vm: &'a VirtualMeasurement,
    ht: DMatrix<f64>,
    rinv: DMatrix<f64>,
    /// `trace(H^T R^-1 H)`
    info_trace: f64,
}

impl<'a> Prepared<'a> {
    fn new(vm: &'a VirtualMeasurement) -> Result<Self> {
        let chol = vm.r.clone().cholesky().ok_or(SlamError::SingularNoise)?;
        let rinv = chol.inverse();
        let ht = vm.h.transpose();
        let info_trace = (&rinv * &vm.h).component_mul(&vm.h).sum();
        Ok(Self {
            vm,
            ht,
            rinv,
            info_trace,
        })
    }
}

fn check_measurement(n: usize, vm: &VirtualMeasurement) -> Result<()> {
    if vm.state_dim() != n {
        return Err(SlamError::Dimension(format!(
            "measurement acts on {} states, filter has {n}",
            vm.state_dim()
        )));
    }
    Ok(())
}

fn derivative(
    sys: &LtvSystem,
    meas: Option<&Prepared>,
    x: &DVector<f64>,
    p: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut dx = sys.b.clone();
    let mut dp = sys.q.clone();
    if let Some(a) = &sys.a {
        dx += a * x;
        let ap = a * p;
        dp += &ap + ap.transpose();
    }
    if let Some(m) = meas {
        let pht = p * &m.ht;
        let innovation = &m.vm.y - &m.vm.h * x;
        dx += &pht * (&m.rinv * innovation);
        dp -= &pht * &m.rinv * pht.transpose();
    }
    (dx, dp)
}

fn euler(sys: &LtvSystem, meas: Option<&Prepared>, x: &mut DVector<f64>, p: &mut DMatrix<f64>, h: f64) {
    let (dx, dp) = derivative(sys, meas, x, p);
    *x += dx * h;
    *p += dp * h;
}

fn rk4(sys: &LtvSystem, meas: Option<&Prepared>, x: &mut DVector<f64>, p: &mut DMatrix<f64>, h: f64) {
    let (k1x, k1p) = derivative(sys, meas, x, p);
    let (k2x, k2p) = derivative(sys, meas, &(&*x + &k1x * (h / 2.0)), &(&*p + &k1p * (h / 2.0)));
    let (k3x, k3p) = derivative(sys, meas, &(&*x + &k2x * (h / 2.0)), &(&*p + &k2p * (h / 2.0)));
    let (k4x, k4p) = derivative(sys, meas, &(&*x + &k3x * h), &(&*p + &k3p * h));
    *x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
    *p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
}

/// Exact solution of `x' = K (y - H x)`, `P' = -P H^T R^-1 H P` over `h`:
/// a discrete update with noise `R / h`, in Joseph form.
fn exact_measurement(m: &Prepared, x: &mut DVector<f64>, p: &mut DMatrix<f64>, h: f64) -> Result<()> {
    let vm = m.vm;
    let rd = &vm.r / h;
    let pht = &*p * &m.ht;
    let s = &vm.h * &pht + &rd;
    let chol = s.cholesky().ok_or(SlamError::SingularNoise)?;
    let k = chol.solve(&pht.transpose()).transpose();
    *x += &k * (&vm.y - &vm.h * &*x);
    let n = x.len();
    let ikh = DMatrix::identity(n, n) - &k * &vm.h;
    *p = &ikh * &*p * ikh.transpose() + &k * rd * k.transpose();
    Ok(())
}

fn drift_norm(sys: &LtvSystem) -> f64 {
    sys.a.as_ref().map_or(0.0, |a| a.norm())
}

/// Integrates one step of length `cfg.dt`.
pub fn step_system(
    state: &FilterState,
    sys: &LtvSystem,
    vm: Option<&VirtualMeasurement>,
    cfg: &FilterConfig,
) -> Result<FilterState> {
    cfg.validate()?;
    let n = state.dim();
    if sys.dim() != n || sys.q.nrows() != n || sys.a.as_ref().is_some_and(|a| a.nrows() != n) {
        return Err(SlamError::Dimension(format!("system of size {} for a {n}-state filter", sys.dim())));
    }
    let meas = match vm {
        Some(vm) if vm.rows() > 0 => {
            check_measurement(n, vm)?;
            Some(Prepared::new(vm)?)
        }
        _ => None,
    };
    let mut x = state.x.clone();
    let mut p = state.p.clone();
    let dt = cfg.dt;

    let stiffness = drift_norm(sys) + meas.as_ref().map_or(0.0, |m| p.trace().max(0.0) * m.info_trace);
    let limit = match cfg.integrator {
        Integrator::Euler => 1.0,
        _ => 2.0,
    };
    let substeps = ((stiffness * dt / limit).ceil() as usize).max(1);
    let integrator = match cfg.integrator {
        Integrator::Split => Integrator::Split,
        _ if substeps > cfg.max_substeps => Integrator::Split,
        other => other,
    };
    match integrator {
        Integrator::Euler | Integrator::Rk4 => {
            let h = dt / substeps as f64;
            for _ in 0..substeps {
                if integrator == Integrator::Euler {
                    euler(sys, meas.as_ref(), &mut x, &mut p, h);
                } else {
                    rk4(sys, meas.as_ref(), &mut x, &mut p, h);
                }
                symmetrize(&mut p);
            }
        }
        Integrator::Split => {
            let drift_steps = ((drift_norm(sys) * dt / 2.0).ceil() as usize).clamp(1, cfg.max_substeps);
            let half = dt / 2.0 / drift_steps as f64;
            for _ in 0..drift_steps {
                rk4(sys, None, &mut x, &mut p, half);
            }
            if let Some(m) = &meas {
                symmetrize(&mut p);
                exact_measurement(m, &mut x, &mut p, dt)?;
            }
            for _ in 0..drift_steps {
                rk4(sys, None, &mut x, &mut p, half);
            }
        }
    }
    symmetrize(&mut p);
    if cfg.psd_repair {
        p = clamp_psd(&p);
    }
    let t = state.t + dt;
    if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
        return Err(SlamError::Divergence {
            t,
            reason: "non-finite estimate or covariance".into(),
        });
    }
    Ok(FilterState { x, p, t })
}

/// One step in the robot-fixed frame: `A = -Omega` per block, `b = -u`.
/// The state may stack several points of the input's dimension.
pub fn step(
    state: &FilterState,
    inputs: &RobotInputs,
    vm: Option<&VirtualMeasurement>,
    cfg: &FilterConfig,
) -> Result<FilterState> {
    let d = inputs.dim();
    if !state.dim().is_multiple_of(d) {
        return Err(SlamError::Dimension(format!(
            "{}-state filter is not a stack of {d}D points",
            state.dim()
        )));
    }
    step_system(state, &LtvSystem::robot_frame(inputs, state.dim() / d), vm, cfg)
}

/// One step in a frame that rotates with the robot but does not translate:
/// state is `(landmarks..., vehicle)`, drift is `blockdiag(Omega) x` plus
/// `u` on the vehicle block, and `Q` acts on the vehicle block.
pub fn step_no_translation(
    state: &FilterState,
    inputs: &RobotInputs,
    vm: Option<&VirtualMeasurement>,
    cfg: &FilterConfig,
) -> Result<FilterState> {
    let d = inputs.dim();
    let n = state.dim();
    if !n.is_multiple_of(d) || n < d {
        return Err(SlamError::Dimension(format!("{n}-state filter is not a stack of {d}D points")));
    }
    let omega = inputs.omega.matrix();
    let blocks = n / d;
    let mut a = DMatrix::zeros(n, n);
    for k in 0..blocks {
        a.view_mut((k * d, k * d), (d, d)).copy_from(&omega);
    }
    let mut b = DVector::zeros(n);
    b.rows_mut(n - d, d).copy_from(&inputs.u);
    let mut q = DMatrix::zeros(n, n);
    q.view_mut((n - d, n - d), (d, d)).copy_from(&inputs.q);
    let nonzero = omega.iter().any(|v| *v != 0.0);
    let sys = LtvSystem {
        a: nonzero.then_some(a),
        b,
        q,
    };
    step_system(state, &sys, vm, cfg)
}
