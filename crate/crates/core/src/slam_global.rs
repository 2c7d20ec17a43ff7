//! Full-state SLAM in global coordinates.
//!
//! The state stacks the vehicle position (and, with second-order dynamics,
//! its velocity) ahead of every landmark position, with one joint
//! covariance. Body-frame virtual measurements become global rows through
//! the current heading estimate `H_G = H_L T(beta_hat)` on the landmark and
//! `-H_L T(beta_hat)` on the vehicle, so the filter itself stays linear.
//! The heading lives outside the filter and tracks the residue-minimizing
//! heading of each step.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Result, SlamError};
use crate::filter::{self, FilterConfig, LtvSystem};
use crate::geom::AngularVelocity;
use crate::heading::{beta_d_closed_form_2d, track_heading, HeadingRows};
use crate::noisecal::NoisePorter;
use crate::sim::body_rotation;
use crate::state::{FilterState, RobotInputs};
use crate::vmeas::{self, bearing_vectors, LinearConstraint, Observation, RowKind, SensorCase, VirtualMeasurement, EPS_U};

/// Bicycle model of a car-like vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleKinematics {
    /// Forward speed (m/s).
    pub u: f64,
    /// Axle distance (m).
    pub l: f64,
    /// Steering angle (rad).
    pub theta_s: f64,
}

impl VehicleKinematics {
    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0) || !(self.theta_s.abs() < std::f64::consts::FRAC_PI_2) || !self.u.is_finite() {
            return Err(SlamError::InvalidInput(format!("invalid vehicle kinematics {self:?}")));
        }
        Ok(())
    }

    /// Planar body twist: forward speed along `x2` and the bicycle yaw rate.
    pub fn inputs(&self, q: f64) -> Result<RobotInputs> {
        Ok(RobotInputs::planar(0.0, self.u, bicycle_omega(self)?, q))
    }
}

/// `omega = (u / L) tan(theta_s)`
pub fn bicycle_omega(k: &VehicleKinematics) -> Result<f64> {
    k.validate()?;
    Ok(k.u / k.l * k.theta_s.tan())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// The vehicle velocity is an input.
    FirstOrder,
    /// The vehicle velocity is part of the state and acceleration is the input.
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalConfig {
    pub filter: FilterConfig,
    pub gamma_beta: f64,
    /// Prior variance of a newly appended landmark (m^2 per axis).
    pub landmark_prior_variance: f64,
    /// Range assumed for a new landmark seen without range information.
    pub prior_radius: f64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            gamma_beta: 1.0,
            landmark_prior_variance: 100.0,
            prior_radius: 50.0,
        }
    }
}

/// Body-frame acceleration and yaw rate for second-order dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelInputs {
    pub accel: DVector<f64>,
    pub omega: AngularVelocity,
    /// Acceleration noise intensity.
    pub q: DMatrix<f64>,
}

/// Stacked estimate `(vehicle, [velocity], landmarks...)` with its heading.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub dim: usize,
    pub dynamics: Dynamics,
    pub filter: FilterState,
    /// Landmark ids in state order.
    pub ids: Vec<u64>,
    pub beta_hat: f64,
}

impl GlobalState {
    pub fn new(dim: usize, dynamics: Dynamics, vehicle: DVector<f64>, vehicle_variance: f64, beta_hat: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(SlamError::InvalidInput(format!("dimension {dim} must be 2 or 3")));
        }
        if vehicle.len() != dim {
            return Err(SlamError::Dimension(format!("{}-entry vehicle in a {dim}D map", vehicle.len())));
        }
        if !(vehicle_variance >= 0.0) {
            return Err(SlamError::InvalidInput("vehicle variance must be non-negative".into()));
        }
        let n = match dynamics {
            Dynamics::FirstOrder => dim,
            Dynamics::SecondOrder => 2 * dim,
        };
        let mut x = DVector::zeros(n);
        x.rows_mut(0, dim).copy_from(&vehicle);
        let p = DMatrix::identity(n, n) * vehicle_variance;
        Ok(Self {
            dim,
            dynamics,
            filter: FilterState::new(x, p, 0.0)?,
            ids: Vec::new(),
            beta_hat,
        })
    }

    fn base(&self) -> usize {
        match self.dynamics {
            Dynamics::FirstOrder => self.dim,
            Dynamics::SecondOrder => 2 * self.dim,
        }
    }

    fn offset_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&i| i == id).map(|k| self.base() + k * self.dim)
    }

    pub fn vehicle(&self) -> DVector<f64> {
        self.filter.x.rows(0, self.dim).into_owned()
    }

    pub fn velocity(&self) -> Option<DVector<f64>> {
        (self.dynamics == Dynamics::SecondOrder).then(|| self.filter.x.rows(self.dim, self.dim).into_owned())
    }

    pub fn landmark(&self, id: u64) -> Option<DVector<f64>> {
        self.offset_of(id).map(|o| self.filter.x.rows(o, self.dim).into_owned())
    }

    pub fn landmark_covariance(&self, id: u64) -> Option<DMatrix<f64>> {
        self.offset_of(id).map(|o| self.filter.p.view((o, o), (self.dim, self.dim)).into_owned())
    }

    pub fn vehicle_covariance(&self) -> DMatrix<f64> {
        self.filter.p.view((0, 0), (self.dim, self.dim)).into_owned()
    }

    /// Appends a landmark with no cross-correlation to the rest.
    fn append(&mut self, id: u64, position: DVector<f64>, variance: f64) {
        let n = self.filter.dim();
        let d = self.dim;
        let mut x = DVector::zeros(n + d);
        x.rows_mut(0, n).copy_from(&self.filter.x);
        x.rows_mut(n, d).copy_from(&position);
        let mut p = DMatrix::zeros(n + d, n + d);
        p.view_mut((0, 0), (n, n)).copy_from(&self.filter.p);
        p.view_mut((n, n), (d, d)).fill_with_identity();
        p.view_mut((n, n), (d, d)).scale_mut(variance);
        self.filter = FilterState { x, p, t: self.filter.t };
        self.ids.push(id);
    }
}

/// One landmark's rows in body coordinates, ready to be lifted.
struct BodyRows {
    offset: usize,
    c: LinearConstraint,
    r: DMatrix<f64>,
    /// Extra rows on the velocity block (second-order mode), already global.
    velocity: Option<DMatrix<f64>>,
}

/// Global-coordinates SLAM driver.
#[derive(Debug, Clone)]
pub struct GlobalSlam {
    pub state: GlobalState,
    pub cfg: GlobalConfig,
    pub porter: NoisePorter,
}

impl GlobalSlam {
    pub fn new(state: GlobalState, cfg: GlobalConfig, porter: NoisePorter) -> Result<Self> {
        cfg.filter.validate()?;
        if !(cfg.landmark_prior_variance > 0.0) || !(cfg.prior_radius > 0.0) || !(cfg.gamma_beta >= 0.0) {
            return Err(SlamError::InvalidInput("global config needs positive priors and a non-negative gain".into()));
        }
        Ok(Self { state, cfg, porter })
    }

    /// First-order step in 2D with the heading side-estimator.
    pub fn step(&mut self, inputs: &RobotInputs, obs: &[(u64, Observation)]) -> Result<()> {
        self.require(2, Dynamics::FirstOrder)?;
        let rot = body_rotation(self.state.beta_hat, 2);
        self.step_first_order(inputs, &rot, obs)?;
        self.update_heading(inputs.omega.omega_z(), obs, inputs)
    }

    /// Bicycle-model step: speed and steering instead of a twist.
    pub fn step_bicycle(&mut self, k: &VehicleKinematics, q: f64, obs: &[(u64, Observation)]) -> Result<()> {
        self.step(&k.inputs(q)?, obs)
    }

    /// First-order step with an externally supplied body-from-global
    /// attitude; the heading is not estimated.
    pub fn step_with_attitude(&mut self, inputs: &RobotInputs, attitude: &DMatrix<f64>, obs: &[(u64, Observation)]) -> Result<()> {
        self.require(self.state.dim, Dynamics::FirstOrder)?;
        if attitude.nrows() != self.state.dim || attitude.ncols() != self.state.dim {
            return Err(SlamError::Dimension("attitude does not match the map dimension".into()));
        }
        self.step_first_order(inputs, attitude, obs)
    }

    /// Second-order step in 2D: acceleration input, velocity estimated.
    pub fn step_second_order(&mut self, inputs: &AccelInputs, obs: &[(u64, Observation)]) -> Result<()> {
        self.require(2, Dynamics::SecondOrder)?;
        if obs.iter().any(|(_, o)| o.case() == SensorCase::RangeRate) {
            return Err(SlamError::Unsupported("range-rate readings with second-order dynamics".into()));
        }
        let d = 2;
        let rot = body_rotation(self.state.beta_hat, d);
        let v_hat = self.state.velocity().expect("second-order state");
        // body twist implied by the current velocity estimate
        let body = RobotInputs {
            u: &rot * &v_hat,
            omega: inputs.omega.clone(),
            q: DMatrix::zeros(d, d),
        };
        self.append_new(&body, &rot, obs)?;
        let still = RobotInputs {
            u: DVector::zeros(d),
            omega: inputs.omega.clone(),
            q: DMatrix::zeros(d, d),
        };
        let mut rows = Vec::new();
        for (id, o) in obs {
            let offset = self.state.offset_of(*id).expect("appended");
            if let Some(r) = self.second_order_rows(o, offset, &rot, &body, &still)? {
                rows.push(r);
            }
        }
        let vm = self.lift(&rows, &rot)?;
        let n = self.state.filter.dim();
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, d), (d, d)).fill_with_identity();
        let mut b = DVector::zeros(n);
        b.rows_mut(d, d).copy_from(&(rot.transpose() * &inputs.accel));
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((d, d), (d, d)).copy_from(&inputs.q);
        let sys = LtvSystem { a: Some(a), b, q };
        self.state.filter = filter::step_system(&self.state.filter, &sys, vm.as_ref(), &self.cfg.filter)?;
        // only the position rows say anything about the heading here
        self.update_heading_filtered(inputs.omega.omega_z(), obs, &body, true)
    }

    fn require(&self, dim: usize, dynamics: Dynamics) -> Result<()> {
        if self.state.dim != dim || self.state.dynamics != dynamics {
            return Err(SlamError::InvalidInput(format!(
                "step needs a {dim}D {dynamics:?} state, have {}D {:?}",
                self.state.dim, self.state.dynamics
            )));
        }
        Ok(())
    }

    fn step_first_order(&mut self, inputs: &RobotInputs, rot: &DMatrix<f64>, obs: &[(u64, Observation)]) -> Result<()> {
        if inputs.dim() != self.state.dim {
            return Err(SlamError::Dimension(format!("{}D inputs for a {}D map", inputs.dim(), self.state.dim)));
        }
        self.append_new(inputs, rot, obs)?;
        let mut rows = Vec::new();
        for (id, o) in obs {
            let offset = self.state.offset_of(*id).expect("appended");
            let Some(c) = vmeas::constraint(o, inputs)? else { continue };
            let r = self.weights(o, inputs, &c)?;
            rows.push(BodyRows { offset, c, r, velocity: None });
        }
        let vm = self.lift(&rows, rot)?;
        let d = self.state.dim;
        let n = self.state.filter.dim();
        let mut b = DVector::zeros(n);
        b.rows_mut(0, d).copy_from(&(rot.transpose() * &inputs.u));
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (d, d)).copy_from(&inputs.q);
        let sys = LtvSystem { a: None, b, q };
        self.state.filter = filter::step_system(&self.state.filter, &sys, vm.as_ref(), &self.cfg.filter)?;
        Ok(())
    }

    fn weights(&mut self, o: &Observation, inputs: &RobotInputs, c: &LinearConstraint) -> Result<DMatrix<f64>> {
        let spec = self.porter.spec.with_observation(o);
        let rs = self.porter.r_star_for(o, inputs, &spec);
        self.porter.assemble_r(c, o.case(), &spec, rs, inputs.u.norm())
    }

    fn append_new(&mut self, inputs: &RobotInputs, rot: &DMatrix<f64>, obs: &[(u64, Observation)]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, o) in obs {
            if !seen.insert(*id) {
                return Err(SlamError::InvalidInput(format!("two readings of landmark {id} in one step")));
            }
            if let Some(dim) = o.dim() {
                if dim != self.state.dim {
                    return Err(SlamError::Dimension(format!("{dim}D reading in a {}D map", self.state.dim)));
                }
            }
            if self.state.offset_of(*id).is_some() {
                continue;
            }
            let vehicle = self.state.vehicle();
            let position = match o.bearing() {
                Some(b) => {
                    let r = o.range_hint(inputs).unwrap_or(self.cfg.prior_radius);
                    let (_, hs) = bearing_vectors(b);
                    let body = DVector::from_column_slice(hs.as_slice()) * r;
                    vehicle + rot.transpose() * body
                }
                None => vehicle,
            };
            self.state.append(*id, position, self.cfg.landmark_prior_variance);
        }
        Ok(())
    }

    fn second_order_rows(
        &mut self,
        o: &Observation,
        offset: usize,
        rot: &DMatrix<f64>,
        body: &RobotInputs,
        still: &RobotInputs,
    ) -> Result<Option<BodyRows>> {
        match o {
            Observation::Bearing(_) | Observation::BearingRange(..) => {
                let c = vmeas::constraint(o, still)?.expect("bearing rows");
                let r = self.weights(o, body, &c)?;
                Ok(Some(BodyRows { offset, c, r, velocity: None }))
            }
            Observation::BearingRate(..) => {
                // the rate row reads -h u = -h T v, so h T moves onto the velocity
                let c = vmeas::constraint(o, still)?.expect("rate rows");
                let r = self.weights(o, body, &c)?;
                let (h, _) = bearing_vectors(o.bearing().expect("bearing"));
                let m = c.rows();
                let nb = h.nrows();
                let mut vel = DMatrix::zeros(m, 2);
                vel.view_mut((nb, 0), (nb, 2)).copy_from(&(&h * rot));
                Ok(Some(BodyRows { offset, c, r, velocity: Some(vel) }))
            }
            Observation::TimeToContact(b, ttc) => {
                let (h, hs) = bearing_vectors(b);
                let radial = (&hs * &body.u)[0];
                if radial.abs() < EPS_U {
                    let c = vmeas::case1(b);
                    let r = self.weights(o, body, &c)?;
                    return Ok(Some(BodyRows { offset, c, r, velocity: None }));
                }
                if !(ttc.tau > 0.0) {
                    return Err(SlamError::InvalidInput(format!("time to contact {} must be positive", ttc.tau)));
                }
                // |h* T v| linearized by the sign of the current velocity estimate
                let s = radial.signum();
                let mut hh = DMatrix::zeros(h.nrows() + 1, 2);
                hh.view_mut((0, 0), (h.nrows(), 2)).copy_from(&h);
                hh.view_mut((h.nrows(), 0), (1, 2)).copy_from(&hs);
                let mut kinds = vec![RowKind::Tangential; h.nrows()];
                kinds.push(RowKind::TimeToContact);
                let c = LinearConstraint::new(DVector::zeros(h.nrows() + 1), hh, kinds);
                let r = self.weights(o, body, &c)?;
                let mut vel = DMatrix::zeros(h.nrows() + 1, 2);
                vel.view_mut((h.nrows(), 0), (1, 2)).copy_from(&(&hs * rot * (-ttc.tau * s)));
                Ok(Some(BodyRows { offset, c, r, velocity: Some(vel) }))
            }
            Observation::RangeRate(_) => Err(SlamError::Unsupported("range-rate readings with second-order dynamics".into())),
        }
    }

    /// Stacks body rows into one global measurement.
    fn lift(&self, rows: &[BodyRows], rot: &DMatrix<f64>) -> Result<Option<VirtualMeasurement>> {
        let m: usize = rows.iter().map(|r| r.c.rows()).sum();
        if m == 0 {
            return Ok(None);
        }
        let n = self.state.filter.dim();
        let d = self.state.dim;
        let mut h = DMatrix::zeros(m, n);
        let mut y = DVector::zeros(m);
        let mut r = DMatrix::zeros(m, m);
        let mut at = 0;
        for br in rows {
            let k = br.c.rows();
            let g = &br.c.h * rot;
            h.view_mut((at, br.offset), (k, d)).copy_from(&g);
            h.view_mut((at, 0), (k, d)).copy_from(&(-&g));
            if let Some(v) = &br.velocity {
                h.view_mut((at, d), (k, d)).copy_from(v);
            }
            y.rows_mut(at, k).copy_from(&br.c.y);
            r.view_mut((at, at), (k, k)).copy_from(&br.r);
            at += k;
        }
        VirtualMeasurement::new(y, h, r).map(Some)
    }

    fn update_heading(&mut self, omega: f64, obs: &[(u64, Observation)], inputs: &RobotInputs) -> Result<()> {
        self.update_heading_filtered(omega, obs, inputs, false)
    }

    fn update_heading_filtered(&mut self, omega: f64, obs: &[(u64, Observation)], inputs: &RobotInputs, positions_only: bool) -> Result<()> {
        let still = RobotInputs {
            u: DVector::zeros(2),
            omega: inputs.omega.clone(),
            q: DMatrix::zeros(2, 2),
        };
        let vehicle = self.state.vehicle();
        let mut rows = Vec::new();
        for (id, o) in obs {
            let Some(x) = self.state.landmark(*id) else { continue };
            let c = if positions_only {
                match o {
                    Observation::Bearing(_) | Observation::BearingRange(..) => vmeas::constraint(o, &still)?,
                    _ => o.bearing().map(vmeas::case1),
                }
            } else {
                vmeas::constraint(o, inputs)?
            };
            let Some(c) = c else { continue };
            let c = if positions_only {
                c.select_rows(|_, k| matches!(k, RowKind::Tangential | RowKind::Range))
            } else {
                c
            };
            if c.rows() == 0 {
                continue;
            }
            let off = &x - &vehicle;
            rows.push(HeadingRows::new(Vector2::new(off[0], off[1]), c.h, c.y));
        }
        let beta_d = if rows.is_empty() {
            self.state.beta_hat
        } else {
            beta_d_closed_form_2d(&rows, self.state.beta_hat)
        };
        let gamma = if rows.is_empty() { 0.0 } else { self.cfg.gamma_beta };
        self.state.beta_hat = track_heading(self.state.beta_hat, omega, beta_d, gamma, self.cfg.filter.dt);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisecal::{NoisePolicy, NoiseSpec};
    use crate::sim::{standard_noise, scenario_accelerating, scenario_circle_2d, Scenario, Simulator};
    use crate::state::min_eigenvalue;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn bicycle_examples() {
        let k = |u, l, t| VehicleKinematics { u, l, theta_s: t };
        assert_eq!(bicycle_omega(&k(1.0, 1.0, 0.0)).unwrap(), 0.0);
        assert!((bicycle_omega(&k(1.0, 1.0, FRAC_PI_4)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bicycle_omega(&k(2.0, 4.0, 0.1)).unwrap(), 0.5 * 0.1f64.tan());
        assert!(bicycle_omega(&k(1.0, 0.0, 0.1)).is_err());
        assert!(bicycle_omega(&k(1.0, 1.0, 1.6)).is_err());
    }

    fn porter(spec: NoiseSpec) -> NoisePorter {
        NoisePorter::new(NoisePolicy { r_max: 50.0, ..Default::default() }, spec)
    }

    fn start(sc: &Scenario, dynamics: Dynamics, spec: NoiseSpec) -> GlobalSlam {
        let p0 = sc.vehicles[0].trajectory.pose(0.0, 2);
        let mut st = GlobalState::new(2, dynamics, p0.position.clone(), 1e-6, p0.heading).unwrap();
        if dynamics == Dynamics::SecondOrder {
            st.filter.x.rows_mut(2, 2).copy_from(&p0.velocity);
        }
        GlobalSlam::new(st, GlobalConfig::default(), porter(spec)).unwrap()
    }

    #[test]
    fn idle_step_leaves_state_unchanged() {
        let sc = scenario_circle_2d();
        let mut g = start(&sc, Dynamics::FirstOrder, NoiseSpec::noise_free());
        let before = g.state.clone();
        g.step(&RobotInputs::still(2), &[]).unwrap();
        assert_eq!(g.state.filter.x, before.filter.x);
        assert_eq!(g.state.beta_hat, before.beta_hat);
    }

    fn run(sc: &Scenario, case: SensorCase, dynamics: Dynamics, duration: f64) -> (GlobalSlam, Scenario) {
        let mut sc = sc.clone();
        sc.duration = duration;
        let mut g = start(&sc, dynamics, sc.noise);
        for frame in Simulator::new(sc.clone(), case).unwrap() {
            let rf = &frame.robots[0];
            let obs: Vec<(u64, Observation)> = rf.observations.iter().map(|o| (o.landmark, o.observation)).collect();
            match dynamics {
                Dynamics::FirstOrder => g.step(&rf.inputs, &obs).unwrap(),
                Dynamics::SecondOrder => {
                    let a = AccelInputs {
                        accel: rf.pose.body_acceleration(),
                        omega: rf.inputs.omega.clone(),
                        q: DMatrix::zeros(2, 2),
                    };
                    g.step_second_order(&a, &obs).unwrap()
                }
            }
        }
        (g, sc)
    }

    fn errors(g: &GlobalSlam, sc: &Scenario) -> (f64, f64) {
        let lm = sc
            .landmarks
            .iter()
            .map(|l| (g.state.landmark(l.id).unwrap() - DVector::from_column_slice(&l.position)).norm())
            .fold(0.0, f64::max);
        let truth = sc.vehicles[0].trajectory.pose(sc.duration, 2);
        (lm, (g.state.vehicle() - truth.position).norm())
    }

    #[test]
    fn noise_free_bearing_range_loop() {
        let mut sc = scenario_circle_2d();
        sc.noise = NoiseSpec::noise_free();
        let period = 2.0 * std::f64::consts::PI / 0.2;
        let (g, sc) = run(&sc, SensorCase::BearingRange, Dynamics::FirstOrder, period);
        let (lm, veh) = errors(&g, &sc);
        assert!(lm < 0.05 && veh < 0.05, "{lm} {veh}");
    }

    #[test]
    fn second_order_constant_acceleration() {
        let mut sc = scenario_accelerating();
        sc.noise = NoiseSpec::noise_free();
        let (g, sc) = run(&sc, SensorCase::BearingRange, Dynamics::SecondOrder, 20.0);
        let (lm, veh) = errors(&g, &sc);
        assert!(lm < 0.05 && veh < 0.05, "{lm} {veh}");
    }

    #[test]
    fn second_order_zero_acceleration_is_static() {
        let mut st = GlobalState::new(2, Dynamics::SecondOrder, DVector::from_vec(vec![1.0, 2.0]), 1e-3, 0.3).unwrap();
        st.filter.t = 0.0;
        let mut g = GlobalSlam::new(st, GlobalConfig::default(), porter(NoiseSpec::noise_free())).unwrap();
        let a = AccelInputs {
            accel: DVector::zeros(2),
            omega: AngularVelocity::planar(0.0),
            q: DMatrix::zeros(2, 2),
        };
        for _ in 0..100 {
            g.step_second_order(&a, &[]).unwrap();
        }
        assert_eq!(g.state.vehicle(), DVector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn second_order_rejects_range_rate() {
        let st = GlobalState::new(2, Dynamics::SecondOrder, DVector::zeros(2), 1e-3, 0.0).unwrap();
        let mut g = GlobalSlam::new(st, GlobalConfig::default(), porter(NoiseSpec::noise_free())).unwrap();
        let a = AccelInputs {
            accel: DVector::zeros(2),
            omega: AngularVelocity::planar(0.0),
            q: DMatrix::zeros(2, 2),
        };
        let obs = Observation::RangeRate(vmeas::DopplerObs { r: 3.0, r_dot: 0.0, sigma_r: 0.1, sigma_r_dot: 0.1 });
        assert!(matches!(g.step_second_order(&a, &[(1, obs)]), Err(SlamError::Unsupported(_))));
    }

    #[test]
    fn covariance_stays_psd_over_long_runs() {
        let mut sc = scenario_circle_2d();
        sc.noise = standard_noise();
        sc.process_noise = 0.01;
        sc.duration = 1000.0;
        let mut g = start(&sc, Dynamics::FirstOrder, sc.noise);
        for frame in Simulator::new(sc.clone(), SensorCase::BearingRange).unwrap() {
            let rf = &frame.robots[0];
            let obs: Vec<(u64, Observation)> = rf.observations.iter().map(|o| (o.landmark, o.observation)).collect();
            g.step(&rf.inputs, &obs).unwrap();
        }
        let p = &g.state.filter.p;
        assert!((p - p.transpose()).norm() < 1e-12 * p.norm());
        assert!(min_eigenvalue(p) > -1e-9 * p.trace());
        let (lm, _) = errors(&g, &sc);
        assert!(lm < 5.0, "{lm}");
    }

    #[test]
    fn rotating_the_world_rotates_the_estimate() {
        let mut sc = scenario_circle_2d();
        sc.noise = NoiseSpec::noise_free();
        sc.duration = 10.0;
        let delta: f64 = 0.7;
        let mut rotated = sc.clone();
        let (s, c) = delta.sin_cos();
        let rot = |p: &[f64]| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]];
        for l in &mut rotated.landmarks {
            l.position = rot(&l.position);
        }
        if let crate::sim::Trajectory::Circle { phase0, .. } = &mut rotated.vehicles[0].trajectory {
            *phase0 += delta;
        }
        let (a, _) = run(&sc, SensorCase::BearingOnly, Dynamics::FirstOrder, 10.0);
        let (b, _) = run(&rotated, SensorCase::BearingOnly, Dynamics::FirstOrder, 10.0);
        for l in &sc.landmarks {
            let xa = a.state.landmark(l.id).unwrap();
            let xb = b.state.landmark(l.id).unwrap();
            let expect = DVector::from_vec(rot(xa.as_slice()));
            assert!((xb - expect).norm() < 1e-6);
        }
    }
}
