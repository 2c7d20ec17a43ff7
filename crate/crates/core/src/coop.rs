//! Cooperative SLAM over several robots that share only map summaries.
//!
//! Each robot runs its own [`DunkSlam`] network in a private frame. A central
//! medium collects a summary of every map and answers with shared averages.
//! From those, each robot picks a translation `v_i` and rotation rate `w_i`
//! that move its whole map rigidly. A rigid motion of every state leaves all
//! relative constraints intact, so the maps drift toward a common frame
//! without disturbing what each robot has learned.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dunk::{DunkConfig, DunkSlam, LandmarkDrift};
use crate::error::{Result, SlamError};
use crate::geom::wrap_angle;
use crate::noisecal::NoisePorter;
use crate::sim::{CoopMode, Frame};
use crate::vmeas::Observation;

/// `J = [[0, 1], [-1, 0]]`
fn j_form(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn rot(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

fn v2(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

fn mean<'a>(it: impl IntoIterator<Item = &'a Vector2<f64>>) -> Option<Vector2<f64>> {
    let mut n = 0usize;
    let mut s = Vector2::zeros();
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

impl MapEntry {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Nearest observed neighbour `k'` of landmark `k` in one robot's map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnFeature {
    pub k: u64,
    pub neighbor: u64,
    /// `x_ik - x_ik'`
    pub a: Vector2<f64>,
    pub valid: bool,
}

/// What a robot sends to the medium each tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub robot_id: u64,
    pub tick: u64,
    pub map_summary: Vec<MapEntry>,
    pub center: Option<Vector2<f64>>,
    pub nn_features: Vec<NnFeature>,
}

impl MapSummary {
    pub fn build(robot_id: u64, tick: u64, entries: &BTreeMap<u64, Vector2<f64>>) -> Self {
        Self {
            robot_id,
            tick,
            map_summary: entries.iter().map(|(&id, p)| MapEntry { id, x: p.x, y: p.y }).collect(),
            center: mean(entries.values()),
            nn_features: nn_features(entries),
        }
    }

    pub fn entries(&self) -> BTreeMap<u64, Vector2<f64>> {
        self.map_summary.iter().map(|e| (e.id, e.point())).collect()
    }
}

/// What the medium sends back.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MediumResponse {
    pub tick: u64,
    pub x_cc: Option<Vector2<f64>>,
    pub x_ck: BTreeMap<u64, Vector2<f64>>,
    pub c_k: BTreeMap<u64, Vector2<f64>>,
    pub k_star: BTreeMap<u64, u64>,
    /// Summaries with invalidated features marked.
    #[serde(skip)]
    pub features: BTreeMap<u64, Vec<NnFeature>>,
}

/// Anything that turns a round of summaries into a response. A networked
/// medium can implement this without changes to the robots.
pub trait Medium {
    fn exchange(&mut self, summaries: &[MapSummary]) -> Result<MediumResponse>;
}

/// The medium as a plain function call.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcessMedium;

impl Medium for InProcessMedium {
    fn exchange(&mut self, summaries: &[MapSummary]) -> Result<MediumResponse> {
        Ok(medium(summaries))
    }
}

/// Per-robot centers `x_ic` and their mean `x_cc`.
pub fn centers(maps: &[BTreeMap<u64, Vector2<f64>>]) -> (Vec<Option<Vector2<f64>>>, Option<Vector2<f64>>) {
    let per: Vec<Option<Vector2<f64>>> = maps.iter().map(|m| mean(m.values())).collect();
    let all = mean(per.iter().flatten());
    (per, all)
}

/// Nearest neighbour of every entry among the others. Ties go to the lower id.
pub fn nn_features(entries: &BTreeMap<u64, Vector2<f64>>) -> Vec<NnFeature> {
    let mut out = Vec::new();
    for (&k, p) in entries {
        let mut best: Option<(f64, u64, Vector2<f64>)> = None;
        for (&k2, q) in entries {
            if k2 == k {
                continue;
            }
            let a = p - q;
            let d = a.norm();
            if best.is_none_or(|(b, _, _)| d < b) {
                best = Some((d, k2, a));
            }
        }
        if let Some((_, neighbor, a)) = best {
            out.push(NnFeature { k, neighbor, a, valid: true });
        }
    }
    out
}

/// The coordinator's choice of neighbour for each landmark: the candidate of
/// the robot reporting the shortest `a_ik`, lowest robot id on ties.
pub fn choose_k_star(summaries: &[MapSummary]) -> BTreeMap<u64, u64> {
    let mut best: BTreeMap<u64, (f64, u64, u64)> = BTreeMap::new();
    for s in summaries {
        for f in &s.nn_features {
            let cand = (f.a.norm(), s.robot_id, f.neighbor);
            best.entry(f.k)
                .and_modify(|b| {
                    if cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1) {
                        *b = cand;
                    }
                })
                .or_insert(cand);
        }
    }
    best.into_iter().map(|(k, (_, _, n))| (k, n)).collect()
}

/// Recompute every medium variable from one round of summaries.
pub fn medium(summaries: &[MapSummary]) -> MediumResponse {
    let tick = summaries.iter().map(|s| s.tick).max().unwrap_or(0);
    let x_cc = mean(summaries.iter().filter_map(|s| s.center.as_ref()));

    let mut sums: BTreeMap<u64, Vec<Vector2<f64>>> = BTreeMap::new();
    for s in summaries {
        for e in &s.map_summary {
            sums.entry(e.id).or_default().push(e.point());
        }
    }
    let x_ck = sums.iter().filter_map(|(&k, v)| mean(v).map(|m| (k, m))).collect();

    let k_star = choose_k_star(summaries);
    let mut features = BTreeMap::new();
    let mut valid: BTreeMap<u64, Vec<Vector2<f64>>> = BTreeMap::new();
    for s in summaries {
        let fs: Vec<NnFeature> = s
            .nn_features
            .iter()
            .map(|f| {
                let ok = k_star.get(&f.k) == Some(&f.neighbor);
                if ok {
                    valid.entry(f.k).or_default().push(f.a);
                }
                NnFeature { valid: ok, ..*f }
            })
            .collect();
        features.insert(s.robot_id, fs);
    }
    let c_k = valid.iter().filter_map(|(&k, v)| mean(v).map(|m| (k, m))).collect();
    MediumResponse {
        tick,
        x_cc,
        x_ck,
        c_k,
        k_star,
        features,
    }
}

/// `v_i = g (x_cc - x_ic)`
pub fn null_translation_full(x_ic: &Vector2<f64>, x_cc: &Vector2<f64>, gamma: f64) -> Vector2<f64> {
    (x_cc - x_ic) * gamma
}

/// `v_i = g sum_k (x_ck - x_ik)` over the landmarks robot `i` holds.
pub fn null_translation_partial(entries: &BTreeMap<u64, Vector2<f64>>, x_ck: &BTreeMap<u64, Vector2<f64>>, gamma: f64) -> Vector2<f64> {
    entries
        .iter()
        .filter_map(|(k, x)| x_ck.get(k).map(|c| c - x))
        .sum::<Vector2<f64>>()
        * gamma
}

/// `w_i = g sum_k (x_ik - x_ic)^T J x_ck`
pub fn null_rotation_full(entries: &BTreeMap<u64, Vector2<f64>>, x_ic: &Vector2<f64>, x_ck: &BTreeMap<u64, Vector2<f64>>, gamma: f64) -> f64 {
    gamma
        * entries
            .iter()
            .filter_map(|(k, x)| x_ck.get(k).map(|c| j_form(&(x - x_ic), c)))
            .sum::<f64>()
}

/// `w_i = g sum_k a_ik^T J c_k` over valid features.
pub fn null_rotation_partial(features: &[NnFeature], c_k: &BTreeMap<u64, Vector2<f64>>, gamma: f64) -> f64 {
    gamma
        * features
            .iter()
            .filter(|f| f.valid)
            .filter_map(|f| c_k.get(&f.k).map(|c| j_form(&f.a, c)))
            .sum::<f64>()
}

fn common<'a>(a: &'a BTreeMap<u64, Vector2<f64>>, b: &'a BTreeMap<u64, Vector2<f64>>) -> Vec<(&'a Vector2<f64>, &'a Vector2<f64>)> {
    a.iter().filter_map(|(k, x)| b.get(k).map(|y| (x, y))).collect()
}

/// Center error `e_c` and heading error `e_h`, summed over unordered robot
/// pairs.
///
/// In full mode centers cover each whole map and `e_h` compares centered
/// positions. In partial mode both use only what the two robots share:
/// centers over common landmarks, and `e_h` over features valid in both.
pub fn heading_errors(summaries: &[MapSummary], response: &MediumResponse, mode: CoopMode) -> (f64, f64) {
    let maps: Vec<BTreeMap<u64, Vector2<f64>>> = summaries.iter().map(MapSummary::entries).collect();
    let mut e_c = 0.0;
    let mut e_h = 0.0;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            match mode {
                CoopMode::Full | CoopMode::RobotsOnly => {
                    let (Some(ci), Some(cj)) = (summaries[i].center, summaries[j].center) else {
                        continue;
                    };
                    e_c += (ci - cj).norm_squared();
                    for (xi, xj) in common(&maps[i], &maps[j]) {
                        e_h += ((xi - ci) - (xj - cj)).norm_squared();
                    }
                }
                CoopMode::Partial => {
                    let pairs = common(&maps[i], &maps[j]);
                    if let (Some(ci), Some(cj)) = (mean(pairs.iter().map(|p| p.0)), mean(pairs.iter().map(|p| p.1))) {
                        e_c += (ci - cj).norm_squared();
                    }
                    let fi = response.features.get(&summaries[i].robot_id);
                    let fj = response.features.get(&summaries[j].robot_id);
                    let (Some(fi), Some(fj)) = (fi, fj) else { continue };
                    for a in fi.iter().filter(|f| f.valid) {
                        if let Some(b) = fj.iter().find(|f| f.valid && f.k == a.k) {
                            e_h += (a.a - b.a).norm_squared();
                        }
                    }
                }
            }
        }
    }
    (e_c, e_h)
}

/// Move every state of a map by the rigid motion `p -> c + R(w dt)(p - c) + v dt`
/// and rotate covariances and heading with it.
pub fn apply_null_motion(slam: &mut DunkSlam, center: &Vector2<f64>, v: &Vector2<f64>, omega: f64, dt: f64) {
    if omega == 0.0 && *v == Vector2::zeros() {
        return;
    }
    let r = rot(omega * dt);
    let shift = v * dt;
    let move_point = |p: &DVector<f64>| -> DVector<f64> {
        let q = center + r * (v2(p) - center) + shift;
        DVector::from_column_slice(q.as_slice())
    };
    let rd = DMatrix::from_column_slice(2, 2, r.as_slice());
    let mut r4 = DMatrix::zeros(4, 4);
    r4.view_mut((0, 0), (2, 2)).copy_from(&rd);
    r4.view_mut((2, 2), (2, 2)).copy_from(&rd);
    for pair in slam.pairs.values_mut() {
        let lm = move_point(&pair.landmark());
        let veh = move_point(&pair.vehicle());
        pair.filter.x.rows_mut(0, 2).copy_from(&lm);
        pair.filter.x.rows_mut(2, 2).copy_from(&veh);
        let p = &r4 * &pair.filter.p * r4.transpose();
        pair.filter.p = (&p + p.transpose()) * 0.5;
    }
    slam.vehicle = move_point(&slam.vehicle);
    if let Some(c) = slam.consensus.as_mut() {
        c.x_vc = move_point(&c.x_vc);
        c.info = &rd * &c.info * rd.transpose();
    }
    slam.beta_hat = wrap_angle(slam.beta_hat + omega * dt);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoopConfig {
    pub mode: CoopMode,
    pub dunk: DunkConfig,
    pub gamma_v: f64,
    pub gamma_omega: f64,
    /// Saturation of the null rotation rate (rad/s).
    pub omega_max: f64,
    /// Process noise on a tracked peer (robots-only mode).
    pub peer_q: f64,
}

impl CoopConfig {
    pub fn for_mode(mode: CoopMode) -> Self {
        let (gamma_v, gamma_omega) = match mode {
            CoopMode::Full => (1.0, 1e-4),
            CoopMode::Partial => (0.5, 5e-3),
            CoopMode::RobotsOnly => (1.0, 1e-3),
        };
        Self {
            mode,
            dunk: DunkConfig::default(),
            gamma_v,
            gamma_omega,
            omega_max: 2.0,
            peer_q: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dunk.filter.validate()?;
        if !(self.gamma_v >= 0.0 && self.gamma_omega >= 0.0 && self.omega_max > 0.0 && self.peer_q >= 0.0) {
            return Err(SlamError::InvalidInput("cooperative gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// One robot's map plus its null-space inputs.
#[derive(Debug, Clone)]
pub struct RobotMap {
    pub id: u64,
    pub slam: DunkSlam,
    pub v: Vector2<f64>,
    pub omega: f64,
    pub gamma_v: f64,
    pub gamma_omega: f64,
    peer_drift: BTreeMap<u64, LandmarkDrift>,
}

impl RobotMap {
    /// Starts at the origin of its own frame with zero heading.
    pub fn new(id: u64, cfg: &CoopConfig, porter: NoisePorter) -> Result<Self> {
        Ok(Self {
            id,
            slam: DunkSlam::new(DVector::zeros(2), 0.0, cfg.dunk, porter)?,
            v: Vector2::zeros(),
            omega: 0.0,
            gamma_v: cfg.gamma_v,
            gamma_omega: cfg.gamma_omega,
            peer_drift: BTreeMap::new(),
        })
    }

    /// Positions the robot shares. In robots-only mode this includes itself.
    pub fn entries(&self, mode: CoopMode) -> BTreeMap<u64, Vector2<f64>> {
        let mut m: BTreeMap<u64, Vector2<f64>> = self.slam.pairs.iter().map(|(&k, p)| (k, v2(&p.landmark()))).collect();
        if mode == CoopMode::RobotsOnly {
            m.insert(self.id, v2(&self.slam.vehicle));
        }
        m
    }

    pub fn summary(&self, tick: u64, mode: CoopMode) -> MapSummary {
        MapSummary::build(self.id, tick, &self.entries(mode))
    }
}

/// Result of one cooperative tick.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopTick {
    pub t: f64,
    pub summaries: Vec<MapSummary>,
    pub response: MediumResponse,
    pub e_c: f64,
    pub e_h: f64,
}

/// All robots plus the medium.
pub struct CoopSlam<M: Medium = InProcessMedium> {
    pub cfg: CoopConfig,
    pub robots: Vec<RobotMap>,
    pub medium: M,
    pub tick: u64,
}

impl CoopSlam<InProcessMedium> {
    pub fn new(ids: &[u64], cfg: CoopConfig, porter: NoisePorter) -> Result<Self> {
        Self::with_medium(ids, cfg, porter, InProcessMedium)
    }
}

impl<M: Medium> CoopSlam<M> {
    pub fn with_medium(ids: &[u64], cfg: CoopConfig, porter: NoisePorter, medium: M) -> Result<Self> {
        cfg.validate()?;
        let uniq: BTreeSet<u64> = ids.iter().copied().collect();
        if ids.is_empty() || uniq.len() != ids.len() {
            return Err(SlamError::InvalidInput("robot ids must be distinct and non-empty".into()));
        }
        let robots = ids.iter().map(|&id| RobotMap::new(id, &cfg, porter.clone())).collect::<Result<_>>()?;
        Ok(Self { cfg, robots, medium, tick: 0 })
    }

    /// Consensus position of every shared entry.
    pub fn consensus_map(&self) -> BTreeMap<u64, Vector2<f64>> {
        let summaries: Vec<MapSummary> = self.robots.iter().map(|r| r.summary(self.tick, self.cfg.mode)).collect();
        medium(&summaries).x_ck
    }

    /// Largest distance between two robots' estimates of one entry.
    pub fn max_discrepancy(&self) -> f64 {
        let maps: Vec<_> = self.robots.iter().map(|r| r.entries(self.cfg.mode)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                for (a, b) in common(&maps[i], &maps[j]) {
                    worst = worst.max((a - b).norm());
                }
            }
        }
        worst
    }

    fn robot_step(&mut self, idx: usize, frame: &Frame) -> Result<()> {
        let mode = self.cfg.mode;
        let peer_q = self.cfg.peer_q;
        let robot = &mut self.robots[idx];
        let Some(rf) = frame.robots.iter().find(|r| r.robot == robot.id) else {
            return Err(SlamError::InvalidInput(format!("frame has no entry for robot {}", robot.id)));
        };
        match mode {
            CoopMode::Full | CoopMode::Partial => {
                let obs: Vec<(u64, Observation)> = rf.observations.iter().map(|o| (o.landmark, o.observation)).collect();
                robot.slam.step(&rf.inputs, &obs)
            }
            CoopMode::RobotsOnly => {
                let obs: Vec<(u64, Observation)> = rf.peers.iter().map(|p| (p.peer, p.observation)).collect();
                for p in &rf.peers {
                    let heading = robot.slam.beta_hat + p.relative_heading;
                    robot.peer_drift.insert(
                        p.peer,
                        LandmarkDrift {
                            velocity: DVector::from_vec(vec![p.peer_speed * heading.cos(), p.peer_speed * heading.sin()]),
                            q: DMatrix::identity(2, 2) * peer_q,
                        },
                    );
                }
                robot.slam.step_with_drift(&rf.inputs, &obs, &robot.peer_drift)
            }
        }
    }

    /// One tick: every robot filters its own readings, the medium recomputes
    /// the shared variables, then every map takes its null-space motion.
    pub fn step(&mut self, frame: &Frame) -> Result<CoopTick> {
        for idx in 0..self.robots.len() {
            self.robot_step(idx, frame)?;
        }
        self.tick += 1;
        let mode = self.cfg.mode;
        let summaries: Vec<MapSummary> = self.robots.iter().map(|r| r.summary(self.tick, mode)).collect();
        let response = self.medium.exchange(&summaries)?;
        let dt = self.cfg.dunk.filter.dt;
        let contributing = summaries.iter().filter(|s| !s.map_summary.is_empty()).count();
        for (robot, s) in self.robots.iter_mut().zip(&summaries) {
            let entries = s.entries();
            let (v, omega) = match (contributing >= 2, s.center, response.x_cc) {
                (true, Some(x_ic), Some(x_cc)) => match mode {
                    CoopMode::Full | CoopMode::RobotsOnly => (
                        null_translation_full(&x_ic, &x_cc, robot.gamma_v),
                        null_rotation_full(&entries, &x_ic, &response.x_ck, robot.gamma_omega),
                    ),
                    CoopMode::Partial => {
                        let fs = response.features.get(&robot.id).map(Vec::as_slice).unwrap_or(&[]);
                        (
                            null_translation_partial(&entries, &response.x_ck, robot.gamma_v),
                            null_rotation_partial(fs, &response.c_k, robot.gamma_omega),
                        )
                    }
                },
                _ => (Vector2::zeros(), 0.0),
            };
            robot.v = v;
            robot.omega = omega.clamp(-self.cfg.omega_max, self.cfg.omega_max);
            if let Some(c) = s.center {
                apply_null_motion(&mut robot.slam, &c, &robot.v, robot.omega, dt);
            }
        }
        let (e_c, e_h) = heading_errors(&summaries, &response, mode);
        Ok(CoopTick {
            t: frame.t + dt,
            summaries,
            response,
            e_c,
            e_h,
        })
    }
}
