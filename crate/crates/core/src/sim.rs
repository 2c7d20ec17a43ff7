//! Synthetic worlds: ground-truth trajectories, landmark layouts and noisy
//! sensor streams.
//!
//! Vehicles move in the plane (optionally climbing in 3D) and only yaw, so
//! the body frame is the planar body frame with `x3` kept vertical.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::geom::{wrap_angle, AngularVelocity, Rotation2D};
use crate::noisecal::{sample_observation, NoiseSpec};
use crate::state::RobotInputs;
use crate::vmeas::{ideal_reading, IdealReading, Observation, SensorCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    /// Global position (m), 2 or 3 entries.
    pub position: Vec<f64>,
    /// Feature size (m) used for the visual angle.
    #[serde(default = "default_diameter")]
    pub diameter: f64,
}

fn default_diameter() -> f64 {
    2.0
}

impl Landmark {
    pub fn new(id: u64, position: &[f64]) -> Self {
        Self {
            id,
            position: position.to_vec(),
            diameter: default_diameter(),
        }
    }
}

/// Ground-truth motion of one vehicle. Angles in radians, rates in rad/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    /// Circle about `center`; `phase0` is the polar angle of the start point.
    /// `climb` (m/s) and `z0` lift it into a helix in 3D scenarios.
    Circle {
        center: [f64; 2],
        radius: f64,
        omega_m: f64,
        phase0: f64,
        #[serde(default)]
        z0: f64,
        #[serde(default)]
        climb: f64,
    },
    Line {
        start: [f64; 2],
        heading: f64,
        speed: f64,
    },
    /// Straight line from rest with constant forward acceleration (m/s^2).
    Accelerating {
        start: [f64; 2],
        heading: f64,
        accel: f64,
    },
    Stationary {
        position: [f64; 2],
        heading: f64,
    },
}

/// Ground truth at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub position: DVector<f64>,
    /// Counter-clockwise from global `+x1`.
    pub heading: f64,
    /// Global velocity.
    pub velocity: DVector<f64>,
    /// Global acceleration.
    pub acceleration: DVector<f64>,
    pub yaw_rate: f64,
}

impl Pose {
    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// Global-to-body rotation, yaw only.
    pub fn body_from_global(&self) -> DMatrix<f64> {
        body_rotation(self.heading, self.dim())
    }

    pub fn to_body(&self, global: &DVector<f64>) -> DVector<f64> {
        self.body_from_global() * (global - &self.position)
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Body-frame twist that generates this motion, with process noise `q` (m^2/s).
    pub fn inputs(&self, q: f64) -> RobotInputs {
        let d = self.dim();
        let omega = match d {
            2 => AngularVelocity::planar(self.yaw_rate),
            _ => AngularVelocity::spatial(0.0, 0.0, self.yaw_rate),
        };
        RobotInputs {
            u: self.body_from_global() * &self.velocity,
            omega,
            q: DMatrix::identity(d, d) * q,
        }
    }

    /// Body-frame acceleration.
    pub fn body_acceleration(&self) -> DVector<f64> {
        self.body_from_global() * &self.acceleration
    }
}

/// `blockdiag(T(beta), 1)` in 3D, `T(beta)` in 2D.
pub fn body_rotation(heading: f64, dim: usize) -> DMatrix<f64> {
    let t = Rotation2D::body_from_global(heading)
        .unwrap_or_else(|_| Rotation2D::identity())
        .matrix();
    let mut m = DMatrix::identity(dim, dim);
    m.view_mut((0, 0), (2, 2)).copy_from(&t);
    m
}

impl Trajectory {
    /// Circle through `x0` with heading `beta0`; the heading must be tangent
    /// in the direction of travel.
    pub fn circle_through(center: [f64; 2], radius: f64, omega_m: f64, x0: [f64; 2], beta0: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(SlamError::InvalidInput(format!("radius {radius} must be positive")));
        }
        let (dx, dy) = (x0[0] - center[0], x0[1] - center[1]);
        if ((dx * dx + dy * dy).sqrt() - radius).abs() > 1e-6 * radius {
            return Err(SlamError::InvalidInput("start point is not on the circle".into()));
        }
        let phase0 = dy.atan2(dx);
        let traj = Trajectory::Circle {
            center,
            radius,
            omega_m,
            phase0,
            z0: 0.0,
            climb: 0.0,
        };
        if omega_m != 0.0 && wrap_angle(traj.pose(0.0, 2).heading - beta0).abs() > 1e-6 {
            return Err(SlamError::InvalidInput(format!("heading {beta0} is not tangent to the circle")));
        }
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Trajectory::Circle { radius, omega_m, phase0, z0, climb, center } => {
                *radius > 0.0 && [*omega_m, *phase0, *z0, *climb, center[0], center[1]].iter().all(|v| v.is_finite())
            }
            Trajectory::Line { start, heading, speed } => [start[0], start[1], *heading, *speed].iter().all(|v| v.is_finite()),
            Trajectory::Accelerating { start, heading, accel } => {
                [start[0], start[1], *heading, *accel].iter().all(|v| v.is_finite())
            }
            Trajectory::Stationary { position, heading } => [position[0], position[1], *heading].iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(SlamError::InvalidInput(format!("invalid trajectory {self:?}")))
        }
    }

    pub fn pose(&self, t: f64, dim: usize) -> Pose {
        let mut position = DVector::zeros(dim);
        let mut velocity = DVector::zeros(dim);
        let mut acceleration = DVector::zeros(dim);
        let (heading, yaw_rate) = match *self {
            Trajectory::Circle {
                center,
                radius,
                omega_m,
                phase0,
                z0,
                climb,
            } => {
                let psi = phase0 + omega_m * t;
                let (s, c) = psi.sin_cos();
                position[0] = center[0] + radius * c;
                position[1] = center[1] + radius * s;
                velocity[0] = -radius * omega_m * s;
                velocity[1] = radius * omega_m * c;
                acceleration[0] = -radius * omega_m * omega_m * c;
                acceleration[1] = -radius * omega_m * omega_m * s;
                if dim == 3 {
                    position[2] = z0 + climb * t;
                    velocity[2] = climb;
                }
                let turn = if omega_m < 0.0 { -FRAC_PI_2 } else { FRAC_PI_2 };
                (wrap_angle(psi + turn), omega_m)
            }
            Trajectory::Line { start, heading, speed } => {
                let (s, c) = heading.sin_cos();
                position[0] = start[0] + speed * t * c;
                position[1] = start[1] + speed * t * s;
                velocity[0] = speed * c;
                velocity[1] = speed * s;
                (wrap_angle(heading), 0.0)
            }
            Trajectory::Accelerating { start, heading, accel } => {
                let (s, c) = heading.sin_cos();
                let dist = 0.5 * accel * t * t;
                position[0] = start[0] + dist * c;
                position[1] = start[1] + dist * s;
                velocity[0] = accel * t * c;
                velocity[1] = accel * t * s;
                acceleration[0] = accel * c;
                acceleration[1] = accel * s;
                (wrap_angle(heading), 0.0)
            }
            Trajectory::Stationary { position: p, heading } => {
                position[0] = p[0];
                position[1] = p[1];
                (wrap_angle(heading), 0.0)
            }
        };
        Pose {
            position,
            heading,
            velocity,
            acceleration,
            yaw_rate,
        }
    }

    /// Circle center, when the trajectory has one.
    pub fn center(&self) -> Option<[f64; 2]> {
        match self {
            Trajectory::Circle { center, .. } => Some(*center),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: u64,
    pub trajectory: Trajectory,
}

/// Which landmarks a vehicle can see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Visibility {
    Unlimited,
    /// Within `max_range` (m) and `half_fov` (rad) of the forward axis.
    RangeFov { max_range: f64, half_fov: f64 },
    /// The quadrant holding the vehicle's circle center (or its position),
    /// axes included.
    Quadrant,
}

impl Visibility {
    pub fn visible(&self, vehicle: &VehicleSpec, pose: &Pose, landmark: &DVector<f64>) -> bool {
        match *self {
            Visibility::Unlimited => true,
            Visibility::RangeFov { max_range, half_fov } => {
                let body = pose.to_body(landmark);
                body.norm() <= max_range && body[0].atan2(body[1]).abs() <= half_fov
            }
            Visibility::Quadrant => {
                let c = vehicle
                    .trajectory
                    .center()
                    .unwrap_or([pose.position[0], pose.position[1]]);
                landmark[0] * c[0].signum() >= 0.0 && landmark[1] * c[1].signum() >= 0.0
            }
        }
    }
}

/// A complete synthetic world. Units: meters, radians, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    pub landmarks: Vec<Landmark>,
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub visibility: Visibility,
    pub duration: f64,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Process noise intensity fed to the filters (m^2/s).
    #[serde(default)]
    pub process_noise: f64,
    /// Robots see and range each other (robots-only mode).
    #[serde(default)]
    pub peer_sensing: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(SlamError::InvalidInput(format!("dimension {} must be 2 or 3", self.dim)));
        }
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return Err(SlamError::InvalidInput("dt must be positive and duration non-negative".into()));
        }
        if !(self.process_noise >= 0.0) {
            return Err(SlamError::InvalidInput("process noise must be non-negative".into()));
        }
        self.noise.validate()?;
        if self.vehicles.is_empty() {
            return Err(SlamError::InvalidInput("scenario has no vehicles".into()));
        }
        for v in &self.vehicles {
            v.trajectory.validate()?;
        }
        for l in &self.landmarks {
            if l.position.len() != self.dim || l.position.iter().any(|v| !v.is_finite()) || !(l.diameter > 0.0) {
                return Err(SlamError::InvalidInput(format!("landmark {} is malformed", l.id)));
            }
        }
        let mut ids: Vec<u64> = self.landmarks.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.landmarks.len() {
            return Err(SlamError::InvalidInput("duplicate landmark ids".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn landmark_position(&self, id: u64) -> Option<DVector<f64>> {
        self.landmarks
            .iter()
            .find(|l| l.id == id)
            .map(|l| DVector::from_column_slice(&l.position))
    }
}

/// One synthesized reading with the truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRecord {
    pub t: f64,
    pub robot: u64,
    pub landmark: u64,
    pub observation: Observation,
    pub truth: IdealReading,
}

/// One robot's view of another robot.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerRecord {
    pub t: f64,
    pub robot: u64,
    pub peer: u64,
    pub observation: Observation,
    /// Noisy heading of the peer relative to the observer's.
    pub relative_heading: f64,
    pub peer_speed: f64,
}

/// Everything one robot gets at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotFrame {
    pub robot: u64,
    pub pose: Pose,
    pub inputs: RobotInputs,
    pub observations: Vec<ObsRecord>,
    pub peers: Vec<PeerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub robots: Vec<RobotFrame>,
}

/// Noise-free reading of a global point from a pose. `None` when the point
/// sits on the sensor.
pub fn ideal_for(pose: &Pose, point: &DVector<f64>) -> Option<IdealReading> {
    let body = pose.to_body(point);
    ideal_reading(&body, &pose.inputs(0.0)).ok()
}

/// One noisy reading of `landmark` from `pose`.
pub fn sense(
    pose: &Pose,
    landmark: &Landmark,
    case: SensorCase,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Option<(Observation, IdealReading)> {
    let ideal = ideal_for(pose, &DVector::from_column_slice(&landmark.position))?;
    let spec = NoiseSpec {
        diameter: landmark.diameter,
        ..*noise
    };
    Some((sample_observation(case, &ideal, &spec, rng), ideal))
}

/// Deterministic stream of frames for one scenario and sensor case.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub scenario: Scenario,
    pub case: SensorCase,
    rng: ChaCha8Rng,
    step: usize,
}

impl Simulator {
    pub fn new(scenario: Scenario, case: SensorCase) -> Result<Self> {
        scenario.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        Ok(Self {
            scenario,
            case,
            rng,
            step: 0,
        })
    }

    pub fn with_seed(mut scenario: Scenario, case: SensorCase, seed: u64) -> Result<Self> {
        scenario.seed = seed;
        Self::new(scenario, case)
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.scenario.dt
    }

    pub fn pose(&self, vehicle: usize, t: f64) -> Pose {
        self.scenario.vehicles[vehicle].trajectory.pose(t, self.scenario.dim)
    }

    fn frame_at(&mut self, t: f64) -> Frame {
        let sc = &self.scenario;
        let poses: Vec<Pose> = sc.vehicles.iter().map(|v| v.trajectory.pose(t, sc.dim)).collect();
        let mut robots = Vec::with_capacity(poses.len());
        for (vi, vehicle) in sc.vehicles.iter().enumerate() {
            let pose = &poses[vi];
            let mut observations = Vec::new();
            for lm in &sc.landmarks {
                let p = DVector::from_column_slice(&lm.position);
                if !sc.visibility.visible(vehicle, pose, &p) {
                    continue;
                }
                if let Some((observation, truth)) = sense(pose, lm, self.case, &sc.noise, &mut self.rng) {
                    observations.push(ObsRecord {
                        t,
                        robot: vehicle.id,
                        landmark: lm.id,
                        observation,
                        truth,
                    });
                }
            }
            let mut peers = Vec::new();
            if sc.peer_sensing {
                for (vj, other) in sc.vehicles.iter().enumerate() {
                    if vj == vi {
                        continue;
                    }
                    let target = Landmark {
                        id: other.id,
                        position: poses[vj].position.iter().copied().collect(),
                        diameter: default_diameter(),
                    };
                    if let Some((observation, _)) = sense(pose, &target, SensorCase::BearingRange, &sc.noise, &mut self.rng) {
                        let noise = crate::noisecal::gauss_sample(&mut self.rng, sc.noise.sigma_theta);
                        peers.push(PeerRecord {
                            t,
                            robot: vehicle.id,
                            peer: other.id,
                            observation,
                            relative_heading: wrap_angle(poses[vj].heading - pose.heading + noise),
                            peer_speed: poses[vj].speed(),
                        });
                    }
                }
            }
            robots.push(RobotFrame {
                robot: vehicle.id,
                inputs: pose.inputs(sc.process_noise),
                pose: pose.clone(),
                observations,
                peers,
            });
        }
        Frame { t, robots }
    }
}

impl Iterator for Simulator {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        if self.step >= self.scenario.steps() {
            return None;
        }
        let t = self.time();
        let frame = self.frame_at(t);
        self.step += 1;
        Some(frame)
    }
}

/// Sensor noise used for the single-vehicle scenarios.
pub fn standard_noise() -> NoiseSpec {
    let deg = PI / 180.0;
    NoiseSpec {
        sigma_theta: 2.0 * deg,
        sigma_phi: 2.0 * deg,
        sigma_theta_dot: 5.0 * deg,
        sigma_phi_dot: 5.0 * deg,
        sigma_r: 2.0,
        sigma_r_dot: 0.1,
        sigma_alpha: 0.5 * deg,
        diameter: 2.0,
        sigma_pixel: 0.0,
    }
}

/// Three landmarks of diameter 2 m around a vehicle circling at 2 m/s.
pub fn scenario_circle_2d() -> Scenario {
    Scenario {
        name: "circle-2d".into(),
        dim: 2,
        landmarks: vec![
            Landmark::new(1, &[3.0, 4.0]),
            Landmark::new(2, &[-12.0, 6.0]),
            Landmark::new(3, &[8.0, -15.0]),
        ],
        vehicles: vec![VehicleSpec {
            id: 1,
            trajectory: Trajectory::Circle {
                center: [0.0, 0.0],
                radius: 10.0,
                omega_m: 0.2,
                phase0: -FRAC_PI_2,
                z0: 0.0,
                climb: 0.0,
            },
        }],
        noise: standard_noise(),
        visibility: Visibility::Unlimited,
        duration: 40.0,
        dt: 0.01,
        seed: 42,
        process_noise: 0.0,
        peer_sensing: false,
    }
}

/// Three elevated landmarks around a slowly climbing helix.
pub fn scenario_circle_3d() -> Scenario {
    Scenario {
        name: "circle-3d".into(),
        dim: 3,
        landmarks: vec![
            Landmark::new(1, &[3.0, 4.0, 5.0]),
            Landmark::new(2, &[-12.0, 6.0, 2.0]),
            Landmark::new(3, &[8.0, -15.0, 8.0]),
        ],
        vehicles: vec![VehicleSpec {
            id: 1,
            trajectory: Trajectory::Circle {
                center: [0.0, 0.0],
                radius: 10.0,
                omega_m: 0.2,
                phase0: -FRAC_PI_2,
                z0: 0.0,
                climb: 0.1,
            },
        }],
        noise: standard_noise(),
        visibility: Visibility::Unlimited,
        duration: 40.0,
        dt: 0.01,
        seed: 42,
        process_noise: 0.0,
        peer_sensing: false,
    }
}

/// Straight drive from rest with constant acceleration past three landmarks.
pub fn scenario_accelerating() -> Scenario {
    Scenario {
        name: "accelerating".into(),
        dim: 2,
        landmarks: vec![
            Landmark::new(1, &[5.0, 10.0]),
            Landmark::new(2, &[-6.0, 20.0]),
            Landmark::new(3, &[4.0, 30.0]),
        ],
        vehicles: vec![VehicleSpec {
            id: 1,
            trajectory: Trajectory::Accelerating {
                start: [0.0, 0.0],
                heading: FRAC_PI_2,
                accel: 0.1,
            },
        }],
        noise: standard_noise(),
        visibility: Visibility::Unlimited,
        duration: 20.0,
        dt: 0.01,
        seed: 42,
        process_noise: 0.0,
        peer_sensing: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoopMode {
    Full,
    Partial,
    RobotsOnly,
}

/// The 13-landmark grid.
pub fn coop_landmarks() -> Vec<Landmark> {
    [
        [-30.0, 30.0],
        [0.0, 30.0],
        [30.0, 30.0],
        [-30.0, 0.0],
        [0.0, 0.0],
        [30.0, 0.0],
        [-30.0, -30.0],
        [0.0, -30.0],
        [30.0, -30.0],
        [0.0, 10.0],
        [0.0, -10.0],
        [-20.0, 0.0],
        [20.0, 0.0],
    ]
    .iter()
    .enumerate()
    .map(|(i, p)| Landmark::new(i as u64 + 1, p))
    .collect()
}

/// Four vehicles on radius-15 circles, one per quadrant.
pub fn coop_vehicles() -> Vec<VehicleSpec> {
    let s3 = 3f64.sqrt();
    let s2 = 2f64.sqrt();
    let specs = [
        ([-15.0, 15.0], 1.0, [-15.0, 0.0], 0.0),
        ([15.0, 15.0], 1.5, [0.0, 15.0], 1.5 * PI),
        ([-15.0, -15.0], -1.0, [-7.5, -15.0 - 7.5 * s3], 7.0 * PI / 6.0),
        ([15.0, -15.0], 0.5, [15.0 + 7.5 * s2, -15.0 + 7.5 * s2], 0.75 * PI),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, &(c, w, x0, b0))| VehicleSpec {
            id: i as u64 + 1,
            trajectory: Trajectory::circle_through(c, 15.0, w, x0, b0).expect("tangent start poses"),
        })
        .collect()
}

/// Sensor noise for the cooperative scenarios (bearing and range).
pub fn coop_noise() -> NoiseSpec {
    NoiseSpec {
        sigma_theta: 0.5 * PI / 180.0,
        sigma_r: 0.1,
        ..NoiseSpec::default()
    }
}

pub fn scenario_coop(mode: CoopMode) -> Scenario {
    let (name, landmarks, visibility, peer_sensing) = match mode {
        CoopMode::Full => ("coop-full", coop_landmarks(), Visibility::Unlimited, false),
        CoopMode::Partial => ("coop-partial", coop_landmarks(), Visibility::Quadrant, false),
        CoopMode::RobotsOnly => ("coop-robots", Vec::new(), Visibility::Unlimited, true),
    };
    Scenario {
        name: name.into(),
        dim: 2,
        landmarks,
        vehicles: coop_vehicles(),
        noise: coop_noise(),
        visibility,
        duration: 20.0,
        dt: 0.01,
        seed: 42,
        process_noise: 0.0,
        peer_sensing,
    }
}

pub const SCENARIO_NAMES: [&str; 6] = ["circle-2d", "circle-3d", "accelerating", "coop-full", "coop-partial", "coop-robots"];

pub fn scenario_by_name(name: &str) -> Option<Scenario> {
    Some(match name {
        "circle-2d" => scenario_circle_2d(),
        "circle-3d" => scenario_circle_3d(),
        "accelerating" => scenario_accelerating(),
        "coop-full" => scenario_coop(CoopMode::Full),
        "coop-partial" => scenario_coop(CoopMode::Partial),
        "coop-robots" => scenario_coop(CoopMode::RobotsOnly),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmeas::constraint;

    #[test]
    fn circle_speed_and_period() {
        let traj = Trajectory::Circle {
            center: [0.0, 0.0],
            radius: 15.0,
            omega_m: 1.0,
            phase0: 0.3,
            z0: 0.0,
            climb: 0.0,
        };
        let p0 = traj.pose(0.0, 2);
        assert!((p0.speed() - 15.0).abs() < 1e-12);
        let p1 = traj.pose(2.0 * PI, 2);
        assert!((p1.position - p0.position).norm() < 1e-9);
    }

    #[test]
    fn zero_rate_circle_is_stationary() {
        let traj = Trajectory::Circle {
            center: [1.0, 2.0],
            radius: 3.0,
            omega_m: 0.0,
            phase0: 0.0,
            z0: 0.0,
            climb: 0.0,
        };
        assert_eq!(traj.pose(0.0, 2).position, traj.pose(5.0, 2).position);
        assert_eq!(traj.pose(5.0, 2).speed(), 0.0);
    }

    #[test]
    fn circle_matches_closed_form() {
        let traj = Trajectory::circle_through([-15.0, 15.0], 15.0, 1.0, [-15.0, 0.0], 0.0).unwrap();
        for k in 0..50 {
            let t = 0.37 * k as f64;
            let p = traj.pose(t, 2);
            let psi = -FRAC_PI_2 + t;
            assert!((p.position[0] - (-15.0 + 15.0 * psi.cos())).abs() < 1e-9);
            assert!((p.position[1] - (15.0 + 15.0 * psi.sin())).abs() < 1e-9);
            // heading is the direction of travel
            assert!((p.velocity[1].atan2(p.velocity[0]) - p.heading).abs().min(2.0 * PI - (p.velocity[1].atan2(p.velocity[0]) - p.heading).abs()) < 1e-9);
        }
    }

    #[test]
    fn coop_layout() {
        let sc = scenario_coop(CoopMode::Full);
        assert_eq!(sc.landmarks[0].position, vec![-30.0, 30.0]);
        assert_eq!(sc.landmarks.len(), 13);
        let v2 = sc.vehicles[1].trajectory.pose(0.0, 2);
        assert!(wrap_angle(v2.heading - 1.5 * PI).abs() < 1e-9);
        assert!((v2.position - DVector::from_vec(vec![0.0, 15.0])).norm() < 1e-9);
        assert_eq!(scenario_circle_2d().noise.sigma_r, 2.0);
        for v in &sc.vehicles {
            let p = v.trajectory.pose(0.0, 2);
            assert!((p.speed() - 15.0 * v.trajectory.pose(0.0, 2).yaw_rate.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn non_tangent_start_is_rejected() {
        assert!(Trajectory::circle_through([0.0, 0.0], 15.0, 1.0, [15.0, 0.0], 0.0).is_err());
        assert!(Trajectory::circle_through([0.0, 0.0], 15.0, 1.0, [14.0, 0.0], FRAC_PI_2).is_err());
    }

    fn still_at(x: f64, y: f64, heading: f64) -> Pose {
        Trajectory::Stationary { position: [x, y], heading }.pose(0.0, 2)
    }

    #[test]
    fn dead_ahead_reading() {
        let pose = still_at(0.0, 0.0, FRAC_PI_2);
        let ideal = ideal_for(&pose, &DVector::from_vec(vec![0.0, 4.0])).unwrap();
        assert!(ideal.theta.abs() < 1e-15);
        assert!((ideal.r - 4.0).abs() < 1e-15);
    }

    #[test]
    fn approach_time_to_contact() {
        let traj = Trajectory::Line {
            start: [0.0, 0.0],
            heading: 0.0,
            speed: 2.0,
        };
        let ideal = ideal_for(&traj.pose(0.0, 2), &DVector::from_vec(vec![4.0, 0.0])).unwrap();
        assert!((ideal.tau - 2.0).abs() < 1e-12);
        assert!((ideal.r_dot + 2.0).abs() < 1e-12);
    }

    #[test]
    fn bearing_rate_matches_finite_difference() {
        let traj = Trajectory::circle_through([0.0, 0.0], 10.0, 0.2, [0.0, -10.0], 0.0).unwrap();
        let lm = DVector::from_vec(vec![3.0, 4.0]);
        let dt = 1e-5;
        for k in 0..20 {
            let t = 1.7 * k as f64;
            let a = ideal_for(&traj.pose(t, 2), &lm).unwrap();
            let b = ideal_for(&traj.pose(t + dt, 2), &lm).unwrap();
            let fd = wrap_angle(b.theta - a.theta) / dt;
            assert!((fd - a.theta_dot).abs() < 1e-3 * (1.0 + a.theta_dot.abs()), "{fd} vs {}", a.theta_dot);
            assert!(((b.r - a.r) / dt - a.r_dot).abs() < 1e-3);
        }
    }

    #[test]
    fn body_kinematics_match_finite_difference_in_3d() {
        let sc = scenario_circle_3d();
        let traj = &sc.vehicles[0].trajectory;
        let lm = DVector::from_column_slice(&sc.landmarks[2].position);
        let dt = 1e-6;
        let p = traj.pose(3.0, 3);
        let x = p.to_body(&lm);
        let fd = (traj.pose(3.0 + dt, 3).to_body(&lm) - &x) / dt;
        let inputs = p.inputs(0.0);
        let model = -(inputs.omega.matrix() * &x) - &inputs.u;
        assert!((fd - model).norm() < 1e-4);
    }

    #[test]
    fn noise_free_readings_satisfy_every_model() {
        for sc in [scenario_circle_2d(), scenario_circle_3d()] {
            let mut sc = sc;
            sc.noise = NoiseSpec::noise_free();
            sc.duration = 5.0;
            for case in SensorCase::ALL {
                let sim = Simulator::new(sc.clone(), case).unwrap();
                for frame in sim.step_by(37) {
                    for rf in &frame.robots {
                        for rec in &rf.observations {
                            let x = rf.pose.to_body(&sc.landmark_position(rec.landmark).unwrap());
                            if let Some(c) = constraint(&rec.observation, &rf.inputs).unwrap() {
                                let scale = 1.0 + x.norm() * (1.0 + rf.inputs.u.norm());
                                assert!(c.residual(&x).norm() < 1e-9 * scale, "{case:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn quadrant_visibility() {
        let sc = scenario_coop(CoopMode::Partial);
        let v1 = &sc.vehicles[0];
        let pose = v1.trajectory.pose(0.0, 2);
        let seen: Vec<u64> = sc
            .landmarks
            .iter()
            .filter(|l| sc.visibility.visible(v1, &pose, &DVector::from_column_slice(&l.position)))
            .map(|l| l.id)
            .collect();
        assert_eq!(seen, vec![1, 2, 4, 5, 10, 12]);
    }

    #[test]
    fn same_seed_same_stream() {
        let sc = scenario_circle_2d();
        let a: Vec<Frame> = Simulator::new(sc.clone(), SensorCase::BearingRange).unwrap().take(200).collect();
        let b: Vec<Frame> = Simulator::new(sc.clone(), SensorCase::BearingRange).unwrap().take(200).collect();
        assert_eq!(a, b);
        let c: Vec<Frame> = Simulator::with_seed(sc, SensorCase::BearingRange, 1).unwrap().take(200).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn peers_report_relative_heading() {
        let mut sc = scenario_coop(CoopMode::RobotsOnly);
        sc.noise = NoiseSpec::noise_free();
        let frame = Simulator::new(sc.clone(), SensorCase::BearingRange).unwrap().next().unwrap();
        let r1 = &frame.robots[0];
        assert_eq!(r1.peers.len(), 3);
        let p2 = &r1.peers[0];
        assert!(wrap_angle(p2.relative_heading - (1.5 * PI - 0.0)).abs() < 1e-12);
        assert!((p2.peer_speed - 22.5).abs() < 1e-9);
    }

    #[test]
    fn scenario_json_round_trip() {
        for name in SCENARIO_NAMES {
            let sc = scenario_by_name(name).unwrap();
            let json = serde_json::to_string(&sc).unwrap();
            let back: Scenario = serde_json::from_str(&json).unwrap();
            assert_eq!(sc, back);
        }
    }
}
