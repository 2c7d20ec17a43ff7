//! SLAM-DUNK: one small filter per landmark, each with its own copy of the
//! vehicle.
//!
//! Every pair `(x_i, x_vi)` runs a 4-state LTV Kalman filter in global
//! coordinates. The virtual vehicles are fused into an information-weighted
//! consensus, which is fed back to every pair as a leader measurement. The
//! cost of a step is linear in the number of landmarks.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector2};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Result, SlamError};
use crate::filter::{self, FilterConfig, LtvSystem};
use crate::heading::{beta_d_closed_form_2d, track_heading, HeadingRows};
use crate::noisecal::NoisePorter;
use crate::sim::body_rotation;
use crate::state::{FilterState, RobotInputs};
use crate::vmeas::{self, bearing_vectors, Observation, SensorCase, VirtualMeasurement};

const DIM: usize = 2;

/// Landmark plus virtual vehicle, `[x_i; x_vi]`, with the joint covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub id: u64,
    pub filter: FilterState,
    pub case: Option<SensorCase>,
    pub last_seen: Option<f64>,
}

impl PairState {
    pub fn new(id: u64, landmark: &DVector<f64>, vehicle: &DVector<f64>, sigma_i: &DMatrix<f64>, sigma_v: &DMatrix<f64>, t: f64) -> Result<Self> {
        let mut x = DVector::zeros(2 * DIM);
        x.rows_mut(0, DIM).copy_from(landmark);
        x.rows_mut(DIM, DIM).copy_from(vehicle);
        let mut p = DMatrix::zeros(2 * DIM, 2 * DIM);
        p.view_mut((0, 0), (DIM, DIM)).copy_from(sigma_i);
        p.view_mut((DIM, DIM), (DIM, DIM)).copy_from(sigma_v);
        Ok(Self {
            id,
            filter: FilterState::new(x, p, t)?,
            case: None,
            last_seen: None,
        })
    }

    pub fn landmark(&self) -> DVector<f64> {
        self.filter.x.rows(0, DIM).into_owned()
    }

    pub fn vehicle(&self) -> DVector<f64> {
        self.filter.x.rows(DIM, DIM).into_owned()
    }

    pub fn sigma_landmark(&self) -> DMatrix<f64> {
        self.filter.p.view((0, 0), (DIM, DIM)).into_owned()
    }

    pub fn sigma_vehicle(&self) -> DMatrix<f64> {
        self.filter.p.view((DIM, DIM), (DIM, DIM)).into_owned()
    }
}

/// Information-weighted average of virtual vehicles.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub x_vc: DVector<f64>,
    /// `sum Sigma_vi^-1`
    pub info: DMatrix<f64>,
    pub observed: Vec<u64>,
}

impl Consensus {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.info.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(DIM, DIM) * f64::MAX.sqrt())
    }
}

fn regularized_info(sigma: &DMatrix<f64>, reg: f64) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    (sigma + DMatrix::identity(n, n) * reg)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| SlamError::InvalidCovariance("virtual vehicle covariance".into()))
}

/// `x_vc = (sum S_i^-1)^-1 sum S_i^-1 x_vi` over the given pairs; `None` when empty.
pub fn consensus<'a>(pairs: impl IntoIterator<Item = &'a PairState>, regularization: f64) -> Result<Option<Consensus>> {
    let mut info = DMatrix::zeros(DIM, DIM);
    let mut weighted = DVector::zeros(DIM);
    let mut observed = Vec::new();
    for p in pairs {
        let w = regularized_info(&p.sigma_vehicle(), regularization)?;
        weighted += &w * p.vehicle();
        info += w;
        observed.push(p.id);
    }
    if observed.is_empty() {
        return Ok(None);
    }
    observed.sort_unstable();
    let x_vc = info
        .clone()
        .cholesky()
        .map(|c| c.solve(&weighted))
        .ok_or_else(|| SlamError::InvalidCovariance("combined information".into()))?;
    Ok(Some(Consensus { x_vc, info, observed }))
}

/// Rows `[H_L T, -H_L T]` acting on `(x_i, x_vi)`, from the body-frame measurement.
pub fn pair_measurement(obs: &Observation, inputs: &RobotInputs, beta_hat: f64, porter: &mut NoisePorter) -> Result<Option<VirtualMeasurement>> {
    let Some(body) = porter.measurement(obs, inputs)? else {
        return Ok(None);
    };
    let g = &body.h * body_rotation(beta_hat, DIM);
    let mut h = DMatrix::zeros(body.rows(), 2 * DIM);
    h.view_mut((0, 0), (body.rows(), DIM)).copy_from(&g);
    h.view_mut((0, DIM), (body.rows(), DIM)).copy_from(&(-g));
    VirtualMeasurement::new(body.y, h, body.r).map(Some)
}

/// Leader rows `[0 I] x = x_vc` weighted by the consensus covariance.
pub fn feedback_measurement(c: &Consensus, regularization: f64) -> Result<VirtualMeasurement> {
    let mut h = DMatrix::zeros(DIM, 2 * DIM);
    h.view_mut((0, DIM), (DIM, DIM)).fill_with_identity();
    let r = c.covariance() + DMatrix::identity(DIM, DIM) * regularization;
    VirtualMeasurement::new(c.x_vc.clone(), h, r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DunkConfig {
    pub filter: FilterConfig,
    pub gamma_beta: f64,
    pub landmark_prior_variance: f64,
    /// Range assumed for a new landmark seen without range information.
    pub prior_radius: f64,
    pub vehicle_prior_variance: f64,
    /// Added to virtual-vehicle covariances before inversion.
    pub regularization: f64,
    /// Association gate as a chi-square probability.
    pub gate_probability: f64,
}

impl Default for DunkConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            gamma_beta: 1.0,
            landmark_prior_variance: 100.0,
            prior_radius: 50.0,
            vehicle_prior_variance: 1e-6,
            regularization: 1e-9,
            gate_probability: 0.95,
        }
    }
}

/// Extra drift for the landmark block of one pair (a moving target).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkDrift {
    pub velocity: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// New pair: virtual vehicle at the information-weighted average of all
/// existing virtual vehicles (or `fallback` with the prior variance), and the
/// landmark along the bearing at the best available range.
pub fn init_pair(
    id: u64,
    obs: &Observation,
    inputs: &RobotInputs,
    beta_hat: f64,
    pairs: &BTreeMap<u64, PairState>,
    fallback: &DVector<f64>,
    cfg: &DunkConfig,
    t: f64,
) -> Result<PairState> {
    let (vehicle, sigma_v) = match consensus(pairs.values(), cfg.regularization)? {
        Some(c) => {
            let cov = c.covariance();
            (c.x_vc, cov)
        }
        None => (fallback.clone(), DMatrix::identity(DIM, DIM) * cfg.vehicle_prior_variance),
    };
    let landmark = match obs.bearing() {
        Some(b) => {
            if b.dim() != DIM {
                return Err(SlamError::Dimension(format!("{}D reading in a planar map", b.dim())));
            }
            let r = obs.range_hint(inputs).unwrap_or(cfg.prior_radius);
            let (_, hs) = bearing_vectors(b);
            &vehicle + body_rotation(beta_hat, DIM).transpose() * DVector::from_column_slice(hs.as_slice()) * r
        }
        None => vehicle.clone(),
    };
    let mut p = PairState::new(id, &landmark, &vehicle, &(DMatrix::identity(DIM, DIM) * cfg.landmark_prior_variance), &sigma_v, t)?;
    p.case = Some(obs.case());
    Ok(p)
}

/// Nearest pair by Mahalanobis distance of the measurement residual, or
/// `None` when every pair lies outside the gate.
pub fn associate(
    obs: &Observation,
    inputs: &RobotInputs,
    beta_hat: f64,
    pairs: &BTreeMap<u64, PairState>,
    porter: &mut NoisePorter,
    gate_probability: f64,
) -> Result<Option<u64>> {
    if !(gate_probability > 0.0 && gate_probability < 1.0) {
        return Err(SlamError::InvalidInput(format!("gate probability {gate_probability} must be in (0, 1)")));
    }
    let Some(vm) = pair_measurement(obs, inputs, beta_hat, porter)? else {
        return Ok(None);
    };
    let chi = ChiSquared::new(vm.rows() as f64).map_err(|e| SlamError::InvalidInput(e.to_string()))?;
    let gate = chi.inverse_cdf(gate_probability);
    let mut best: Option<(f64, u64)> = None;
    for p in pairs.values() {
        if p.case.is_some_and(|c| c != obs.case()) {
            continue;
        }
        let nu = vm.residual(&p.filter.x);
        let s = &vm.h * &p.filter.p * vm.h.transpose() + &vm.r;
        let Some(chol) = s.cholesky() else { continue };
        let d2 = nu.dot(&chol.solve(&nu));
        if d2 <= gate && best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, p.id));
        }
    }
    Ok(best.map(|(_, id)| id))
}

/// The pair network of one robot.
#[derive(Debug, Clone)]
pub struct DunkSlam {
    pub cfg: DunkConfig,
    pub porter: NoisePorter,
    pub pairs: BTreeMap<u64, PairState>,
    pub beta_hat: f64,
    /// Current best vehicle estimate.
    pub vehicle: DVector<f64>,
    pub consensus: Option<Consensus>,
    pub t: f64,
}

impl DunkSlam {
    pub fn new(vehicle: DVector<f64>, beta_hat: f64, cfg: DunkConfig, porter: NoisePorter) -> Result<Self> {
        cfg.filter.validate()?;
        if vehicle.len() != DIM {
            return Err(SlamError::Dimension("the pair network is planar".into()));
        }
        if !(cfg.landmark_prior_variance > 0.0) || !(cfg.vehicle_prior_variance > 0.0) || !(cfg.regularization >= 0.0) {
            return Err(SlamError::InvalidInput("pair network priors must be positive".into()));
        }
        Ok(Self {
            cfg,
            porter,
            pairs: BTreeMap::new(),
            beta_hat,
            vehicle,
            consensus: None,
            t: 0.0,
        })
    }

    pub fn landmark(&self, id: u64) -> Option<DVector<f64>> {
        self.pairs.get(&id).map(PairState::landmark)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Global velocity for a body twist under the current heading.
    pub fn global_velocity(&self, inputs: &RobotInputs) -> DVector<f64> {
        body_rotation(self.beta_hat, DIM).transpose() * &inputs.u
    }

    /// One step of both levels.
    pub fn step(&mut self, inputs: &RobotInputs, obs: &[(u64, Observation)]) -> Result<()> {
        self.step_with_drift(inputs, obs, &BTreeMap::new())
    }

    /// As [`DunkSlam::step`], with per-landmark drift for moving targets.
    pub fn step_with_drift(&mut self, inputs: &RobotInputs, obs: &[(u64, Observation)], drift: &BTreeMap<u64, LandmarkDrift>) -> Result<()> {
        if inputs.dim() != DIM {
            return Err(SlamError::Dimension(format!("{}D inputs for a planar map", inputs.dim())));
        }
        let mut by_id: BTreeMap<u64, &Observation> = BTreeMap::new();
        for (id, o) in obs {
            if by_id.insert(*id, o).is_some() {
                return Err(SlamError::InvalidInput(format!("two readings of landmark {id} in one step")));
            }
        }
        for (&id, o) in &by_id {
            if !self.pairs.contains_key(&id) {
                let p = init_pair(id, o, inputs, self.beta_hat, &self.pairs, &self.vehicle, &self.cfg, self.t)?;
                self.pairs.insert(id, p);
            }
        }

        let observed: BTreeSet<u64> = by_id.keys().copied().collect();
        let leader = consensus(self.pairs.values().filter(|p| observed.contains(&p.id)), self.cfg.regularization)?;
        let feedback = leader.as_ref().map(|c| feedback_measurement(c, self.cfg.regularization)).transpose()?;

        let u_global = self.global_velocity(inputs);
        let mut heading_rows = Vec::new();
        for (id, pair) in self.pairs.iter_mut() {
            let own = match by_id.get(id) {
                Some(o) => {
                    if pair.case.is_some_and(|c| c != o.case()) {
                        return Err(SlamError::InvalidInput(format!("landmark {id} changed sensor case")));
                    }
                    pair_measurement(o, inputs, self.beta_hat, &mut self.porter)?
                }
                None => None,
            };
            let vm = match (own, &feedback) {
                (Some(a), Some(f)) => Some(a.stack(f)?),
                (Some(a), None) => Some(a),
                (None, Some(f)) => Some(f.clone()),
                (None, None) => None,
            };
            let mut b = DVector::zeros(2 * DIM);
            b.rows_mut(DIM, DIM).copy_from(&u_global);
            let mut q = DMatrix::zeros(2 * DIM, 2 * DIM);
            q.view_mut((DIM, DIM), (DIM, DIM)).copy_from(&inputs.q);
            if let Some(d) = drift.get(id) {
                b.rows_mut(0, DIM).copy_from(&d.velocity);
                q.view_mut((0, 0), (DIM, DIM)).copy_from(&d.q);
            }
            let sys = LtvSystem { a: None, b, q };
            pair.filter = filter::step_system(&pair.filter, &sys, vm.as_ref(), &self.cfg.filter)?;
            if let Some(o) = by_id.get(id) {
                pair.last_seen = Some(pair.filter.t);
                if let Some(c) = vmeas::constraint(o, inputs)? {
                    let off = pair.landmark() - pair.vehicle();
                    heading_rows.push(HeadingRows::new(Vector2::new(off[0], off[1]), c.h, c.y));
                }
            }
        }
        self.t += self.cfg.filter.dt;

        self.consensus = consensus(self.pairs.values().filter(|p| observed.contains(&p.id)), self.cfg.regularization)?;
        self.vehicle = match (&self.consensus, consensus(self.pairs.values(), self.cfg.regularization)?) {
            (Some(c), _) => c.x_vc.clone(),
            (None, Some(all)) => all.x_vc,
            (None, None) => &self.vehicle + &u_global * self.cfg.filter.dt,
        };

        let omega = inputs.omega.omega_z();
        self.beta_hat = if heading_rows.is_empty() {
            track_heading(self.beta_hat, omega, self.beta_hat, 0.0, self.cfg.filter.dt)
        } else {
            let beta_d = beta_d_closed_form_2d(&heading_rows, self.beta_hat);
            track_heading(self.beta_hat, omega, beta_d, self.cfg.gamma_beta, self.cfg.filter.dt)
        };
        Ok(())
    }

    /// Step with readings that carry no landmark identity; each is matched
    /// by [`associate`] or starts a new landmark.
    pub fn step_unlabeled(&mut self, inputs: &RobotInputs, obs: &[Observation]) -> Result<Vec<u64>> {
        let mut next = self.pairs.keys().next_back().map_or(0, |k| k + 1);
        let mut labeled = Vec::with_capacity(obs.len());
        let mut taken = BTreeSet::new();
        for o in obs {
            let candidates: BTreeMap<u64, PairState> =
                self.pairs.iter().filter(|(k, _)| !taken.contains(*k)).map(|(k, v)| (*k, v.clone())).collect();
            let id = match associate(o, inputs, self.beta_hat, &candidates, &mut self.porter, self.cfg.gate_probability)? {
                Some(id) => id,
                None => {
                    next += 1;
                    next - 1
                }
            };
            taken.insert(id);
            labeled.push((id, *o));
        }
        self.step(inputs, &labeled)?;
        Ok(labeled.iter().map(|(id, _)| *id).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisecal::{NoisePolicy, NoiseSpec};
    use crate::sim::{scenario_circle_2d, Simulator};
    use crate::vmeas::{BearingObs, RangeObs};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn pair(id: u64, lm: &[f64], veh: &[f64], sv: f64) -> PairState {
        PairState::new(id, &dv(lm), &dv(veh), &DMatrix::identity(2, 2), &(DMatrix::identity(2, 2) * sv), 0.0).unwrap()
    }

    fn porter() -> NoisePorter {
        NoisePorter::new(NoisePolicy { r_max: 50.0, ..Default::default() }, NoiseSpec::noise_free())
    }

    fn range_obs(theta: f64, r: f64) -> Observation {
        Observation::BearingRange(BearingObs::planar(theta, 0.01), RangeObs { r, sigma_r: 0.1 })
    }

    #[test]
    fn pair_rows_act_on_the_difference() {
        let vm = pair_measurement(&range_obs(0.0, 4.0), &RobotInputs::still(2), 0.0, &mut porter()).unwrap().unwrap();
        assert_eq!(vm.y.as_slice(), &[0.0, 4.0]);
        // heading 0 faces global +x1: a landmark 4 m along +x1 fits exactly
        let x = dv(&[5.0, 2.0, 1.0, 2.0]);
        assert!(vm.residual(&x).norm() < 1e-12);
        let shifted = dv(&[7.0, -1.0, 3.0, -1.0]);
        assert!(vm.residual(&shifted).norm() < 1e-12);
    }

    #[test]
    fn pair_rows_rotate_with_heading() {
        let obs = range_obs(0.3, 6.0);
        let mut po = porter();
        let body = po.measurement(&obs, &RobotInputs::still(2)).unwrap().unwrap();
        let vm = pair_measurement(&obs, &RobotInputs::still(2), FRAC_PI_2, &mut po).unwrap().unwrap();
        // heading pi/2 makes body and global axes coincide
        assert!((vm.h.view((0, 0), (2, 2)) - &body.h).norm() < 1e-15);
        assert!((vm.h.view((0, 2), (2, 2)) + &body.h).norm() < 1e-15);
    }

    #[test]
    fn consensus_examples() {
        let a = pair(1, &[0.0, 0.0], &[0.0, 0.0], 1.0);
        let b = pair(2, &[0.0, 0.0], &[2.0, 0.0], 1.0);
        let c = consensus([&a, &b], 0.0).unwrap().unwrap();
        assert!((c.x_vc - dv(&[1.0, 0.0])).norm() < 1e-12);
        let c = consensus([&b], 0.0).unwrap().unwrap();
        assert!((c.x_vc - dv(&[2.0, 0.0])).norm() < 1e-12);
        let d = pair(3, &[0.0, 0.0], &[5.0, 0.0], 4.0);
        let c = consensus([&a, &d], 0.0).unwrap().unwrap();
        assert!((c.x_vc - dv(&[1.0, 0.0])).norm() < 1e-12);
        assert!(consensus(std::iter::empty(), 0.0).unwrap().is_none());
    }

    #[test]
    fn feedback_at_consensus_is_silent() {
        let a = pair(1, &[3.0, 0.0], &[1.0, 1.0], 1.0);
        let c = consensus([&a], 0.0).unwrap().unwrap();
        let fb = feedback_measurement(&c, 1e-9).unwrap();
        assert!(fb.residual(&a.filter.x).norm() < 1e-15);
    }

    #[test]
    fn idle_network_is_unchanged() {
        let mut d = DunkSlam::new(dv(&[0.0, 0.0]), 0.2, DunkConfig::default(), porter()).unwrap();
        d.pairs.insert(1, pair(1, &[3.0, 4.0], &[0.0, 0.0], 1.0));
        d.pairs.insert(2, pair(2, &[-3.0, 4.0], &[0.5, 0.0], 1.0));
        let before = d.pairs.clone();
        d.step(&RobotInputs::still(2), &[]).unwrap();
        for (k, p) in &before {
            assert_eq!(p.filter.x, d.pairs[k].filter.x);
        }
        assert_eq!(d.beta_hat, 0.2);
    }

    #[test]
    fn feedback_only_updates_pull_virtual_vehicles_together() {
        let mut d = DunkSlam::new(dv(&[0.0, 0.0]), 0.0, DunkConfig::default(), porter()).unwrap();
        d.pairs.insert(1, pair(1, &[3.0, 4.0], &[0.0, 0.0], 1.0));
        d.pairs.insert(2, pair(2, &[-3.0, 4.0], &[1.0, 0.0], 1.0));
        d.pairs.insert(3, pair(3, &[-3.0, -4.0], &[0.0, 2.0], 1.0));
        let c = consensus(d.pairs.values(), 0.0).unwrap().unwrap();
        let fb = feedback_measurement(&c, 1e-9).unwrap();
        let cfg = FilterConfig::default();
        let mut q = DMatrix::zeros(4, 4);
        q.view_mut((2, 2), (2, 2)).fill_with_identity();
        q *= 0.1;
        for _ in 0..2000 {
            for p in d.pairs.values_mut() {
                p.filter = filter::step_system(
                    &p.filter,
                    &LtvSystem { a: None, b: DVector::zeros(4), q: q.clone() },
                    Some(&fb),
                    &cfg,
                )
                .unwrap();
            }
        }
        for p in d.pairs.values() {
            assert!((p.vehicle() - &c.x_vc).norm() < 1e-2);
        }
    }

    #[test]
    fn init_pair_examples() {
        let cfg = DunkConfig::default();
        let obs = range_obs(0.0, 4.0);
        let inputs = RobotInputs::still(2);
        let empty = BTreeMap::new();
        let p = init_pair(9, &obs, &inputs, FRAC_PI_2, &empty, &dv(&[1.0, 2.0]), &cfg, 0.0).unwrap();
        assert_eq!(p.vehicle(), dv(&[1.0, 2.0]));
        assert!((p.landmark() - dv(&[1.0, 6.0])).norm() < 1e-12);

        let mut pairs = BTreeMap::new();
        pairs.insert(1, pair(1, &[0.0, 0.0], &[0.0, 0.0], 1.0));
        pairs.insert(2, pair(2, &[0.0, 0.0], &[2.0, 2.0], 1.0));
        let p = init_pair(9, &obs, &inputs, FRAC_PI_2, &pairs, &dv(&[9.0, 9.0]), &cfg, 0.0).unwrap();
        assert!((p.vehicle() - dv(&[1.0, 1.0])).norm() < 1e-9);

        pairs.insert(2, pair(2, &[0.0, 0.0], &[5.0, 0.0], 4.0));
        let p = init_pair(9, &obs, &inputs, FRAC_PI_2, &pairs, &dv(&[9.0, 9.0]), &cfg, 0.0).unwrap();
        assert!((p.vehicle() - dv(&[1.0, 0.0])).norm() < 1e-9);
    }

    #[test]
    fn association_examples() {
        let mut pairs = BTreeMap::new();
        // heading pi/2: body and global axes coincide
        let mut a = pair(1, &[0.0, 4.0], &[0.0, 0.0], 1e-4);
        a.case = Some(SensorCase::BearingRange);
        let mut b = pair(2, &[3.0, 4.0], &[0.0, 0.0], 1e-4);
        b.case = Some(SensorCase::BearingRange);
        a.filter.p = DMatrix::identity(4, 4) * 1e-4;
        b.filter.p = DMatrix::identity(4, 4) * 1e-4;
        pairs.insert(1, a);
        pairs.insert(2, b);
        let inputs = RobotInputs::still(2);
        let mut po = porter();
        let hit = associate(&range_obs(0.0, 4.0), &inputs, FRAC_PI_2, &pairs, &mut po, 0.95).unwrap();
        assert_eq!(hit, Some(1));
        let far = associate(&range_obs(-1.0, 30.0), &inputs, FRAC_PI_2, &pairs, &mut po, 0.95).unwrap();
        assert_eq!(far, None);
        // between the two, nearer to the second
        let theta = 2.7f64.atan2(4.0);
        let r = (2.7f64 * 2.7 + 16.0).sqrt();
        let near_b = associate(&range_obs(theta, r), &inputs, FRAC_PI_2, &pairs, &mut { NoisePorter::new(NoisePolicy::default(), NoiseSpec::noise_free()) }, 0.999999).unwrap();
        assert_eq!(near_b, Some(2));
    }

    fn run_circle(duration: f64, case: SensorCase) -> (DunkSlam, crate::sim::Scenario) {
        let mut sc = scenario_circle_2d();
        sc.noise = NoiseSpec::noise_free();
        sc.duration = duration;
        let p0 = sc.vehicles[0].trajectory.pose(0.0, 2);
        let mut d = DunkSlam::new(p0.position.clone(), p0.heading, DunkConfig::default(), porter()).unwrap();
        for frame in Simulator::new(sc.clone(), case).unwrap() {
            let rf = &frame.robots[0];
            let obs: Vec<(u64, Observation)> = rf.observations.iter().map(|o| (o.landmark, o.observation)).collect();
            d.step(&rf.inputs, &obs).unwrap();
        }
        (d, sc)
    }

    #[test]
    fn three_landmark_run_converges() {
        // The map may settle with a small rigid offset that no reading
        // constrains, so shape is checked after alignment.
        let (d, sc) = run_circle(40.0, SensorCase::BearingOnly);
        let truth = sc.vehicles[0].trajectory.pose(sc.duration, 2);
        let mut est: Vec<_> = sc.landmarks.iter().map(|l| d.landmark(l.id).unwrap()).collect();
        let mut tru: Vec<_> = sc.landmarks.iter().map(|l| dv(&l.position)).collect();
        for (e, t) in est.iter().zip(&tru) {
            assert!((e - t).norm() < 0.25);
        }
        est.push(d.vehicle.clone());
        tru.push(truth.position.clone());
        for err in crate::align::aligned_errors(&est, &tru).unwrap() {
            assert!(err < 0.05, "aligned error {err}");
        }
        assert!((&d.vehicle - truth.position).norm() < 0.25);
    }

    #[test]
    fn unlabeled_readings_find_their_pairs() {
        let (mut d, sc) = run_circle(5.0, SensorCase::BearingRange);
        let pose = sc.vehicles[0].trajectory.pose(sc.duration, 2);
        let inputs = pose.inputs(0.0);
        let obs: Vec<Observation> = sc
            .landmarks
            .iter()
            .rev()
            .map(|l| {
                let ideal = crate::sim::ideal_for(&pose, &dv(&l.position)).unwrap();
                range_obs(ideal.theta, ideal.r)
            })
            .collect();
        let ids = d.step_unlabeled(&inputs, &obs).unwrap();
        assert_eq!(ids, vec![3, 2, 1]);
        assert_eq!(d.len(), 3);
    }

    proptest! {
        #[test]
        fn consensus_is_the_weighted_least_squares_point(
            raw in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.1f64..5.0, 0.1f64..5.0, -0.9f64..0.9), 1..6)
        ) {
            let pairs: Vec<PairState> = raw.iter().enumerate().map(|(i, &(x, y, a, b, rho))| {
                let c = rho * (a * b).sqrt();
                let mut p = pair(i as u64, &[0.0, 0.0], &[x, y], 1.0);
                p.filter.p.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[a, c, c, b]));
                p
            }).collect();
            let c = consensus(pairs.iter(), 0.0).unwrap().unwrap();
            // oracle: solve the normal equations of sum (x - x_i)^T W_i (x - x_i)
            let mut a = nalgebra::Matrix2::zeros();
            let mut rhs = nalgebra::Vector2::zeros();
            for p in &pairs {
                let s = p.sigma_vehicle();
                let w = nalgebra::Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]).try_inverse().unwrap();
                a += w;
                rhs += w * nalgebra::Vector2::new(p.vehicle()[0], p.vehicle()[1]);
            }
            let x = a.lu().solve(&rhs).unwrap();
            prop_assert!((c.x_vc[0] - x[0]).abs() < 1e-10 && (c.x_vc[1] - x[1]).abs() < 1e-10);
            let mut rev: Vec<&PairState> = pairs.iter().collect();
            rev.reverse();
            let c2 = consensus(rev, 0.0).unwrap().unwrap();
            prop_assert!((c2.x_vc - &c.x_vc).norm() < 1e-12);
        }
    }

    #[test]
    fn identical_pairs_stay_identical() {
        let mut d = DunkSlam::new(dv(&[0.0, 0.0]), 0.4, DunkConfig::default(), porter()).unwrap();
        d.pairs.insert(1, pair(1, &[3.0, 4.0], &[0.0, 0.0], 1.0));
        d.pairs.insert(2, pair(2, &[3.0, 4.0], &[0.0, 0.0], 1.0));
        let inputs = RobotInputs::planar(0.0, 1.0, 0.1, 0.01);
        let o = range_obs(0.2, 5.0);
        for _ in 0..300 {
            d.step(&inputs, &[(1, o), (2, o)]).unwrap();
        }
        assert_eq!(d.pairs[&1].filter.x, d.pairs[&2].filter.x);
    }
}
