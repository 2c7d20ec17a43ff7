//! Porting sensor noise onto virtual-measurement rows.
//!
//! Bearing noise enters through the model matrix, so `y - H x` is no longer
//! a plain copy of the sensor noise. This module provides the closed-form
//! bias and variance bounds for the bearing rows, a Monte Carlo estimator for
//! everything else, and the policy that turns both into an `R` matrix.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::state::RobotInputs;
use crate::vmeas::{
    self, BearingObs, BearingRateObs, DopplerObs, IdealReading, LinearConstraint, Observation,
    RangeObs, RowKind, SensorCase, TimeToContactObs, VirtualMeasurement,
};

/// Sensor noise standard deviations (radians, meters, seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_theta: f64,
    pub sigma_phi: f64,
    pub sigma_theta_dot: f64,
    pub sigma_phi_dot: f64,
    pub sigma_r: f64,
    pub sigma_r_dot: f64,
    /// Visual-angle noise behind time-to-contact readings.
    pub sigma_alpha: f64,
    /// Feature size used to derive the visual angle.
    pub diameter: f64,
    pub sigma_pixel: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_theta: 0.0,
            sigma_phi: 0.0,
            sigma_theta_dot: 0.0,
            sigma_phi_dot: 0.0,
            sigma_r: 0.0,
            sigma_r_dot: 0.0,
            sigma_alpha: 0.0,
            diameter: 2.0,
            sigma_pixel: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_theta,
            self.sigma_phi,
            self.sigma_theta_dot,
            self.sigma_phi_dot,
            self.sigma_r,
            self.sigma_r_dot,
            self.sigma_alpha,
            self.sigma_pixel,
        ];
        if all.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(SlamError::InvalidInput("noise deviations must be finite and non-negative".into()));
        }
        if !(self.diameter > 0.0) {
            return Err(SlamError::InvalidInput("feature diameter must be positive".into()));
        }
        Ok(())
    }

    /// Overrides the deviations the observation itself reports.
    pub fn with_observation(&self, obs: &Observation) -> Self {
        let mut s = *self;
        if let Some(b) = obs.bearing() {
            s.sigma_theta = b.sigma_theta;
            s.sigma_phi = b.sigma_phi;
        }
        match obs {
            Observation::BearingRange(_, r) => s.sigma_r = r.sigma_r,
            Observation::BearingRate(_, rate) => {
                s.sigma_theta_dot = rate.sigma_theta_dot;
                s.sigma_phi_dot = rate.sigma_phi_dot;
            }
            Observation::RangeRate(d) => {
                s.sigma_r = d.sigma_r;
                s.sigma_r_dot = d.sigma_r_dot;
            }
            _ => {}
        }
        s
    }

    fn key(&self) -> [u64; 9] {
        [
            self.sigma_theta.to_bits(),
            self.sigma_phi.to_bits(),
            self.sigma_theta_dot.to_bits(),
            self.sigma_phi_dot.to_bits(),
            self.sigma_r.to_bits(),
            self.sigma_r_dot.to_bits(),
            self.sigma_alpha.to_bits(),
            self.diameter.to_bits(),
            self.sigma_pixel.to_bits(),
        ]
    }
}

/// Mean and variance of `y - H x_true`, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct PortedNoise {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub samples: usize,
}

impl PortedNoise {
    /// Standard error of each row mean.
    pub fn standard_error(&self) -> DVector<f64> {
        self.variance.map(|v| (v / self.samples as f64).sqrt())
    }
}

/// The bearing row of the planar model carries no bias.
pub fn bias_bearing_2d(sigma_theta: f64) -> f64 {
    let _ = sigma_theta;
    0.0
}

/// Mean of `r - h* x` under Gaussian bearing noise: `(1 - e^(-s^2/2)) r`.
pub fn bias_range_2d(sigma_theta: f64, r: f64) -> f64 {
    -(-sigma_theta * sigma_theta / 2.0).exp_m1() * r
}

/// Inputs for the 3D bias vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bias3dParams {
    pub sigma_theta: f64,
    pub sigma_phi: f64,
    pub r: f64,
    pub phi: f64,
    pub theta_dot: f64,
    pub phi_dot: f64,
    pub u3: f64,
    pub tau: f64,
}

/// Closed-form mean of `y - H x` for the 3D cases with a radial or rate
/// block. Rows follow the constraint layout of the case.
pub fn bias_3d(case: SensorCase, p: &Bias3dParams) -> Result<DVector<f64>> {
    let eth = (-p.sigma_theta.powi(2) / 2.0).exp();
    let eph = (-p.sigma_phi.powi(2) / 2.0).exp();
    let eboth = (-(p.sigma_theta.powi(2) + p.sigma_phi.powi(2)) / 2.0).exp();
    let (sp, cp) = p.phi.sin_cos();
    let k = eph - eboth;
    let elevation = -p.r * k * cp * sp;
    Ok(match case {
        SensorCase::BearingRange => DVector::from_vec(vec![
            0.0,
            elevation,
            p.r * (1.0 - eph * sp * sp - eboth * cp * cp),
        ]),
        SensorCase::BearingRate => DVector::from_vec(vec![
            0.0,
            elevation,
            p.theta_dot * ((eth - eph) * p.r * sp * sp + (eth - eboth) * p.r * cp * cp),
            k * (p.u3 * cp - p.phi_dot * p.r * sp * sp),
        ]),
        SensorCase::TimeToContact => DVector::from_vec(vec![
            0.0,
            elevation,
            k * (p.tau * p.u3 * sp - p.r * sp * sp),
        ]),
        other => {
            return Err(SlamError::Unsupported(format!(
                "no closed-form 3D bias for sensor case {}",
                other.number()
            )))
        }
    })
}

/// Upper bounds on the bearing-row variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceBounds {
    /// `Var(h x) <= s^2 r*^2`
    pub tangential: f64,
    /// `Var(r - h* x) <= (s^4 / 4) r*^2`
    pub radial: f64,
    pub covariance: f64,
}

pub fn variance_bounds(sigma_theta: f64, r_star: f64) -> Result<VarianceBounds> {
    if !(r_star > 0.0) {
        return Err(SlamError::InvalidInput(format!("r* = {r_star} must be positive")));
    }
    let s2 = sigma_theta * sigma_theta;
    Ok(VarianceBounds {
        tangential: s2 * r_star * r_star,
        radial: s2 * s2 / 4.0 * r_star * r_star,
        covariance: 0.0,
    })
}

/// `min(r + 3 sigma_r, r_max)`; without a range reading the bound itself.
pub fn r_star(r_measured: Option<f64>, sigma_r: f64, r_max: f64) -> f64 {
    match r_measured {
        Some(r) => (r + 3.0 * sigma_r).min(r_max),
        None => r_max,
    }
}

/// Zero-mean Gaussian sample; draws nothing when `sigma` is zero.
pub fn gauss_sample(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

/// Time to contact as produced by a visual-angle sensor: the angle
/// `alpha = atan(d / r)` picks up Gaussian noise and the reading scales with it.
pub fn noisy_tau(tau: f64, r: f64, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let alpha = (spec.diameter / r).atan();
    let w = gauss_sample(rng, spec.sigma_alpha);
    let noisy_alpha = (alpha + w).max(1e-6 * alpha);
    (tau * noisy_alpha / alpha, noisy_alpha)
}

/// Samples a noisy observation of the given case around an ideal reading.
pub fn sample_observation(
    case: SensorCase,
    ideal: &IdealReading,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Observation {
    let bearing = BearingObs {
        theta: ideal.theta + gauss_sample(rng, spec.sigma_theta),
        phi: ideal.phi.map(|p| p + gauss_sample(rng, spec.sigma_phi)),
        sigma_theta: spec.sigma_theta,
        sigma_phi: if ideal.phi.is_some() { spec.sigma_phi } else { 0.0 },
    };
    match case {
        SensorCase::BearingOnly => Observation::Bearing(bearing),
        SensorCase::BearingRange => Observation::BearingRange(
            bearing,
            RangeObs {
                r: (ideal.r + gauss_sample(rng, spec.sigma_r)).max(0.0),
                sigma_r: spec.sigma_r,
            },
        ),
        SensorCase::BearingRate => Observation::BearingRate(
            bearing,
            BearingRateObs {
                theta_dot: ideal.theta_dot + gauss_sample(rng, spec.sigma_theta_dot),
                phi_dot: ideal.phi_dot.map(|p| p + gauss_sample(rng, spec.sigma_phi_dot)),
                sigma_theta_dot: spec.sigma_theta_dot,
                sigma_phi_dot: if ideal.phi_dot.is_some() { spec.sigma_phi_dot } else { 0.0 },
            },
        ),
        SensorCase::TimeToContact => {
            let (tau, alpha) = noisy_tau(ideal.tau.min(1e9), ideal.r, spec, rng);
            Observation::TimeToContact(
                bearing,
                TimeToContactObs {
                    tau,
                    alpha: Some(alpha),
                    diameter: Some(spec.diameter),
                },
            )
        }
        SensorCase::RangeRate => Observation::RangeRate(DopplerObs {
            r: (ideal.r + gauss_sample(rng, spec.sigma_r)).max(0.0),
            r_dot: ideal.r_dot + gauss_sample(rng, spec.sigma_r_dot),
            sigma_r: spec.sigma_r,
            sigma_r_dot: spec.sigma_r_dot,
        }),
    }
}

/// Empirical mean and variance of `y - H x_true` for a landmark at `x_true`
/// (robot frame). Samples whose constraint degenerates are skipped.
pub fn monte_carlo_port(
    case: SensorCase,
    x_true: &DVector<f64>,
    inputs: &RobotInputs,
    spec: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<PortedNoise> {
    if n < 100 {
        return Err(SlamError::InvalidInput(format!("need at least 100 samples, got {n}")));
    }
    spec.validate()?;
    let ideal = vmeas::ideal_reading(x_true, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Option<(usize, DVector<f64>, DVector<f64>)> = None;
    for _ in 0..n {
        let obs = sample_observation(case, &ideal, spec, &mut rng);
        let Some(c) = vmeas::constraint(&obs, inputs)? else {
            continue;
        };
        if c.degraded {
            continue;
        }
        let res = c.residual(x_true);
        let (count, mean, m2) = stats.get_or_insert_with(|| {
            (0, DVector::zeros(res.len()), DVector::zeros(res.len()))
        });
        // Welford update
        *count += 1;
        let delta = &res - &*mean;
        *mean += &delta / *count as f64;
        let delta2 = &res - &*mean;
        *m2 += delta.component_mul(&delta2);
    }
    let (count, mean, m2) = stats.ok_or_else(|| {
        SlamError::InvalidInput("every sample was degenerate".into())
    })?;
    let denom = (count.max(2) - 1) as f64;
    Ok(PortedNoise {
        mean,
        variance: m2 / denom,
        samples: count,
    })
}

/// How `R` is filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisePolicy {
    /// Known upper bound on landmark range (m).
    pub r_max: f64,
    /// Lower limit on every diagonal entry of `R`, keeping it invertible.
    pub variance_floor: f64,
    /// Subtract the closed-form bias from range rows.
    pub subtract_bias: bool,
    /// Monte Carlo samples per calibration.
    pub calibration_samples: usize,
    pub seed: u64,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            r_max: 100.0,
            variance_floor: 1e-6,
            subtract_bias: false,
            calibration_samples: 2000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CalibrationKey {
    case: u8,
    dim: usize,
    spec: [u64; 9],
    r_bucket: i64,
    speed_bucket: i64,
}

const R_BUCKET: f64 = 1.0;
const SPEED_BUCKET: f64 = 0.25;

/// Turns observations into weighted virtual measurements, calibrating and
/// caching rate and time-to-contact row variances on demand.
#[derive(Debug, Clone)]
pub struct NoisePorter {
    pub policy: NoisePolicy,
    /// Deviations for quantities the observations do not report themselves.
    pub spec: NoiseSpec,
    cache: BTreeMap<CalibrationKey, Vec<(RowKind, f64)>>,
}

impl NoisePorter {
    pub fn new(policy: NoisePolicy, spec: NoiseSpec) -> Self {
        Self {
            policy,
            spec,
            cache: BTreeMap::new(),
        }
    }

    pub fn cached_calibrations(&self) -> usize {
        self.cache.len()
    }

    /// Builds the full `(y, H, R)` for one observation; `None` when the
    /// instant carries no usable rows.
    pub fn measurement(&mut self, obs: &Observation, inputs: &RobotInputs) -> Result<Option<VirtualMeasurement>> {
        let Some(mut c) = vmeas::constraint(obs, inputs)? else {
            return Ok(None);
        };
        let spec = self.spec.with_observation(obs);
        let rs = self.r_star_for(obs, inputs, &spec);
        if self.policy.subtract_bias {
            self.subtract_bias(&mut c, obs, &spec);
        }
        let r = self.assemble_r(&c, obs.case(), &spec, rs, inputs.u.norm())?;
        VirtualMeasurement::from_constraint(c, r).map(Some)
    }

    pub fn r_star_for(&self, obs: &Observation, inputs: &RobotInputs, spec: &NoiseSpec) -> f64 {
        let rs = match obs {
            Observation::TimeToContact(..) => match obs.range_hint(inputs) {
                // the hint inherits the relative visual-angle error
                Some(r) => {
                    let alpha = (spec.diameter / r.max(1e-9)).atan();
                    r_star(Some(r), r * spec.sigma_alpha / alpha, self.policy.r_max)
                }
                None => self.policy.r_max,
            },
            other => r_star(other.range(), spec.sigma_r, self.policy.r_max),
        };
        rs.max(1e-3)
    }

    fn subtract_bias(&self, c: &mut LinearConstraint, obs: &Observation, spec: &NoiseSpec) {
        let Some(b) = obs.bearing() else { return };
        let Some(r) = obs.range() else { return };
        for (i, kind) in c.kinds.iter().enumerate() {
            if *kind != RowKind::Range {
                continue;
            }
            let bias = match b.phi {
                None => bias_range_2d(spec.sigma_theta, r),
                Some(phi) => {
                    let p = Bias3dParams {
                        sigma_theta: spec.sigma_theta,
                        sigma_phi: spec.sigma_phi,
                        r,
                        phi,
                        ..Default::default()
                    };
                    bias_3d(SensorCase::BearingRange, &p).map(|v| v[2]).unwrap_or(0.0)
                }
            };
            c.y[i] -= bias;
        }
    }

    /// Diagonal `R` for a constraint, one variance per row kind.
    pub fn assemble_r(
        &mut self,
        c: &LinearConstraint,
        case: SensorCase,
        spec: &NoiseSpec,
        r_star: f64,
        speed: f64,
    ) -> Result<DMatrix<f64>> {
        let needs_calibration = c.kinds.iter().any(|k| {
            matches!(k, RowKind::AzimuthRate | RowKind::ElevationRate | RowKind::TimeToContact)
        });
        let dim = c.h.ncols();
        let calibrated = if needs_calibration {
            self.calibrated(case, dim, spec, r_star, speed)?
        } else {
            Vec::new()
        };
        let lookup = |kind: RowKind| {
            calibrated
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, v)| *v)
                .unwrap_or(0.0)
        };
        let floor = self.policy.variance_floor;
        let diag = c.kinds.iter().map(|&kind| {
            let v = match kind {
                RowKind::Tangential => spec.sigma_theta.powi(2) * r_star * r_star,
                RowKind::Elevation => spec.sigma_phi.powi(2) * r_star * r_star,
                RowKind::Range => spec.sigma_r.powi(2),
                RowKind::RangeRate => {
                    spec.sigma_r.powi(2) * speed * speed + r_star * r_star * spec.sigma_r_dot.powi(2)
                }
                RowKind::Image => spec.sigma_pixel.powi(2) * r_star * r_star,
                RowKind::AzimuthRate | RowKind::ElevationRate | RowKind::TimeToContact => lookup(kind),
                RowKind::Feedback => 0.0,
            };
            v.max(floor)
        });
        Ok(DMatrix::from_diagonal(&DVector::from_iterator(c.rows(), diag)))
    }

    fn calibrated(
        &mut self,
        case: SensorCase,
        dim: usize,
        spec: &NoiseSpec,
        r_star: f64,
        speed: f64,
    ) -> Result<Vec<(RowKind, f64)>> {
        let key = CalibrationKey {
            case: case.number(),
            dim,
            spec: spec.key(),
            r_bucket: (r_star / R_BUCKET).ceil() as i64,
            speed_bucket: (speed / SPEED_BUCKET).round() as i64,
        };
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let r = key.r_bucket.max(1) as f64 * R_BUCKET;
        let s = (key.speed_bucket as f64 * SPEED_BUCKET).max(SPEED_BUCKET);
        let v = calibrate_rows(case, dim, spec, r, s, self.policy.calibration_samples, self.policy.seed ^ key_hash(&key))?;
        self.cache.insert(key, v.clone());
        Ok(v)
    }
}

fn key_hash(key: &CalibrationKey) -> u64 {
    // FNV-1a over the key fields; stable across runs and platforms
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(key.case as u64);
    eat(key.dim as u64);
    key.spec.iter().for_each(|&v| eat(v));
    eat(key.r_bucket as u64);
    eat(key.speed_bucket as u64);
    h
}

/// Row variances of the rate and time-to-contact rows at a nominal geometry:
/// a landmark at range `r` in a spread of directions ahead of a robot moving
/// forward at speed `s`, residuals pooled over directions.
fn calibrate_rows(
    case: SensorCase,
    dim: usize,
    spec: &NoiseSpec,
    r: f64,
    s: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<(RowKind, f64)>> {
    let inputs = if dim == 3 {
        RobotInputs::new(
            DVector::from_vec(vec![0.0, s, 0.0]),
            crate::geom::AngularVelocity::zero(3),
            DMatrix::zeros(3, 3),
        )?
    } else {
        RobotInputs::planar(0.0, s, 0.0, 0.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums: BTreeMap<usize, (RowKind, f64, usize)> = BTreeMap::new();
    let directions = 16;
    let per_direction = samples.div_ceil(directions).max(1);
    for k in 0..directions {
        let frac = (k as f64 + 0.5) / directions as f64;
        let theta = (frac - 0.5) * std::f64::consts::FRAC_PI_2 * 1.5;
        let phi = (dim == 3).then_some((frac - 0.5) * 0.5);
        let x = vmeas::position_from_bearing(theta, phi, r);
        let ideal = vmeas::ideal_reading(&x, &inputs)?;
        for _ in 0..per_direction {
            let obs = sample_observation(case, &ideal, spec, &mut rng);
            let Some(c) = vmeas::constraint(&obs, &inputs)? else { continue };
            if c.degraded {
                continue;
            }
            let res = c.residual(&x);
            for (i, kind) in c.kinds.iter().enumerate() {
                let e = sums.entry(i).or_insert((*kind, 0.0, 0));
                e.1 += res[i] * res[i];
                e.2 += 1;
            }
        }
    }
    Ok(sums
        .into_values()
        .filter(|(_, _, n)| *n > 0)
        .map(|(kind, ss, n)| (kind, ss / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn bearing_row_is_unbiased() {
        assert_eq!(bias_bearing_2d(deg(5.0)), 0.0);
        assert_eq!(bias_bearing_2d(0.0), 0.0);
    }

    #[test]
    fn range_bias_closed_form() {
        assert!((bias_range_2d(deg(5.0), 4.0) - 0.0152).abs() < 1e-4);
        assert_eq!(bias_range_2d(0.0, 4.0), 0.0);
    }

    #[test]
    fn bias_is_monotone_in_sigma_and_linear_in_r() {
        let mut last = -1.0;
        for i in 0..50 {
            let b = bias_range_2d(i as f64 * 0.01, 3.0);
            assert!(b > last);
            last = b;
            assert!((bias_range_2d(i as f64 * 0.01, 6.0) - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn three_dimensional_bias_special_values() {
        let zero = Bias3dParams { r: 4.0, phi: 0.3, theta_dot: 0.2, phi_dot: 0.1, u3: 1.0, tau: 2.0, ..Default::default() };
        for case in [SensorCase::BearingRange, SensorCase::BearingRate, SensorCase::TimeToContact] {
            assert_eq!(bias_3d(case, &zero).unwrap().norm(), 0.0);
        }
        let level = Bias3dParams { sigma_theta: 0.2, sigma_phi: 0.2, r: 4.0, phi: 0.0, ..Default::default() };
        assert_eq!(bias_3d(SensorCase::BearingRange, &level).unwrap()[1], 0.0);
        assert!(bias_3d(SensorCase::RangeRate, &level).is_err());
    }

    #[test]
    fn variance_bound_values() {
        let b = variance_bounds(0.0, 4.0).unwrap();
        assert_eq!((b.tangential, b.radial), (0.0, 0.0));
        let b = variance_bounds(0.1, 4.0).unwrap();
        assert!((b.tangential - 0.16).abs() < 1e-15);
        assert!((b.radial - 0.0004).abs() < 1e-15);
        assert!(variance_bounds(0.1, 0.0).is_err());
    }

    #[test]
    fn r_star_rule() {
        assert!((r_star(Some(4.0), 0.2, 100.0) - 4.6).abs() < 1e-12);
        assert_eq!(r_star(Some(4.0), 0.2, 3.0), 3.0);
        assert_eq!(r_star(None, 0.0, 50.0), 50.0);
    }

    #[test]
    fn zero_noise_monte_carlo_is_exact() {
        let x = vmeas::position_from_bearing(0.3, None, 5.0);
        let inputs = RobotInputs::planar(0.5, 1.0, 0.1, 0.0);
        for case in SensorCase::ALL {
            let p = monte_carlo_port(case, &x, &inputs, &NoiseSpec::noise_free(), 200, 1).unwrap();
            assert!(p.mean.amax() < 1e-12, "case {}", case.number());
            assert!(p.variance.amax() < 1e-20, "case {}", case.number());
        }
    }

    #[test]
    fn monte_carlo_matches_planar_analysis() {
        let x = vmeas::position_from_bearing(FRAC_PI_4, None, 4.0);
        let spec = NoiseSpec { sigma_theta: deg(5.0), sigma_r: 0.2, ..Default::default() };
        let p = monte_carlo_port(SensorCase::BearingRange, &x, &RobotInputs::still(2), &spec, 10_000, 42).unwrap();
        assert!(p.mean[0].abs() < 0.01);
        assert!((p.mean[1] - bias_range_2d(deg(5.0), 4.0)).abs() < 0.005);
        let bound = variance_bounds(deg(5.0), 4.0).unwrap();
        assert!(p.variance[0] <= bound.tangential * 1.05);
    }

    #[test]
    fn monte_carlo_matches_three_dimensional_bias() {
        let (r, phi) = (4.0, deg(30.0));
        let x = vmeas::position_from_bearing(0.4, Some(phi), r);
        let spec = NoiseSpec { sigma_theta: deg(10.0), sigma_phi: deg(10.0), ..Default::default() };
        let inputs = RobotInputs::still(3);
        let p = monte_carlo_port(SensorCase::BearingRange, &x, &inputs, &spec, 100_000, 3).unwrap();
        let expect = bias_3d(
            SensorCase::BearingRange,
            &Bias3dParams { sigma_theta: spec.sigma_theta, sigma_phi: spec.sigma_phi, r, phi, ..Default::default() },
        )
        .unwrap();
        let se = p.standard_error();
        for i in 0..3 {
            assert!((p.mean[i] - expect[i]).abs() <= 3.0 * se[i] + 1e-12, "row {i}: {} vs {}", p.mean[i], expect[i]);
        }
    }

    #[test]
    fn standard_error_scales_with_sample_count() {
        let x = vmeas::position_from_bearing(0.2, None, 4.0);
        let spec = NoiseSpec { sigma_theta: deg(5.0), ..Default::default() };
        let inputs = RobotInputs::still(2);
        let a = monte_carlo_port(SensorCase::BearingOnly, &x, &inputs, &spec, 20_000, 5).unwrap();
        let b = monte_carlo_port(SensorCase::BearingOnly, &x, &inputs, &spec, 40_000, 6).unwrap();
        let ratio = a.standard_error()[0] / b.standard_error()[0];
        assert!((ratio - 2f64.sqrt()).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn cosine_expectation_matches_gaussian_characteristic_function() {
        let theta = 0.7;
        for sigma_deg in [1.0, 5.0, 10.0] {
            let sigma = deg(sigma_deg);
            let mut rng = ChaCha8Rng::seed_from_u64(sigma_deg as u64);
            let n = 50_000;
            let vals: Vec<f64> = (0..n).map(|_| (theta + gauss_sample(&mut rng, sigma)).cos()).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let expect = (-sigma * sigma / 2.0).exp() * theta.cos();
            assert!((mean - expect).abs() <= 3.0 * se, "sigma {sigma_deg}");
        }
    }

    #[test]
    fn assembled_r_follows_policy() {
        let mut porter = NoisePorter::new(NoisePolicy { r_max: 30.0, ..Default::default() }, NoiseSpec::default());
        let b = BearingObs::planar(0.0, 0.1);
        let vm = porter.measurement(&Observation::Bearing(b), &RobotInputs::still(2)).unwrap().unwrap();
        assert!((vm.r[(0, 0)] - 0.01 * 900.0).abs() < 1e-12);

        let obs = Observation::BearingRange(b, RangeObs { r: 4.0, sigma_r: 0.2 });
        let vm = porter.measurement(&obs, &RobotInputs::still(2)).unwrap().unwrap();
        assert!((vm.r[(0, 0)] - 0.01 * 4.6 * 4.6).abs() < 1e-12);
        assert!((vm.r[(1, 1)] - 0.04).abs() < 1e-12);
        assert_eq!(vm.r[(0, 1)], 0.0);
    }

    #[test]
    fn calibrated_rows_are_positive_and_cached() {
        let spec = NoiseSpec { sigma_theta: deg(2.0), sigma_theta_dot: deg(5.0), sigma_alpha: deg(0.5), ..Default::default() };
        let mut porter = NoisePorter::new(NoisePolicy::default(), spec);
        let x = vmeas::position_from_bearing(0.2, None, 10.0);
        let inputs = RobotInputs::planar(0.0, 1.0, 0.0, 0.0);
        let ideal = vmeas::ideal_reading(&x, &inputs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in [SensorCase::BearingRate, SensorCase::TimeToContact] {
            let obs = sample_observation(case, &ideal, &spec, &mut rng);
            let vm = porter.measurement(&obs, &inputs).unwrap().unwrap();
            assert!(vm.r[(1, 1)] > porter.policy.variance_floor);
            assert!(vm.r.clone().cholesky().is_some());
        }
        let n = porter.cached_calibrations();
        let obs = sample_observation(SensorCase::BearingRate, &ideal, &spec, &mut rng);
        porter.measurement(&obs, &inputs).unwrap();
        assert_eq!(porter.cached_calibrations(), n);
    }
}
