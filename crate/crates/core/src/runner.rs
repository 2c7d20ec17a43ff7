//! End-to-end runs: a simulated scenario or a recorded log goes in, a trace
//! CSV and a metrics JSON come out.
//!
//! Single-robot modes share one loop over prepared steps. Cooperative modes
//! drive [`CoopSlam`] straight from simulator frames, since they need every
//! robot's readings at once.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align;
use crate::coop::{CoopConfig, CoopSlam};
use crate::dunk::{DunkConfig, DunkSlam};
use crate::error::{Result, SlamError};
use crate::filter::{self, FilterConfig, Integrator};
use crate::logio::{self, LogStep, RowKind};
use crate::noisecal::{self, gauss_sample, NoisePolicy, NoisePorter, NoiseSpec};
use crate::sim::{self, body_rotation, CoopMode, Scenario, Simulator};
use crate::slam_global::{AccelInputs, Dynamics, GlobalConfig, GlobalSlam, GlobalState, VehicleKinematics};
use crate::slam_local::{LocalConfig, LocalSlam};
use crate::state::{fit_contraction_rate, FilterState, RobotInputs};
use crate::vmeas::{self, Observation, PinholeObs, SensorCase, VirtualMeasurement};

/// Estimates further than this from the origin count as diverged (m).
const DIVERGENCE_LIMIT: f64 = 1e8;
/// Pinhole readings need the feature at least this far in front (m).
const MIN_DEPTH: f64 = 0.1;
const FOCAL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Local,
    Global,
    Dunk,
    CoopFull,
    CoopPartial,
    CoopRobots,
}

impl RunMode {
    pub const ALL: [RunMode; 6] = [
        RunMode::Local,
        RunMode::Global,
        RunMode::Dunk,
        RunMode::CoopFull,
        RunMode::CoopPartial,
        RunMode::CoopRobots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Local => "local",
            RunMode::Global => "global",
            RunMode::Dunk => "dunk",
            RunMode::CoopFull => "coop-full",
            RunMode::CoopPartial => "coop-partial",
            RunMode::CoopRobots => "coop-robots",
        }
    }

    pub fn coop(self) -> Option<CoopMode> {
        match self {
            RunMode::CoopFull => Some(CoopMode::Full),
            RunMode::CoopPartial => Some(CoopMode::Partial),
            RunMode::CoopRobots => Some(CoopMode::RobotsOnly),
            _ => None,
        }
    }
}

impl FromStr for RunMode {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SlamError::InvalidInput(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sensor case `1..=5`, or a pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseSpec {
    Sensor(SensorCase),
    Pinhole,
}

impl FromStr for CaseSpec {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pinhole" {
            return Ok(CaseSpec::Pinhole);
        }
        let n: u8 = s
            .parse()
            .map_err(|_| SlamError::InvalidInput(format!("case must be 1-5 or pinhole, got {s:?}")))?;
        SensorCase::from_number(n).map(CaseSpec::Sensor)
    }
}

impl fmt::Display for CaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseSpec::Sensor(c) => write!(f, "{}", c.number()),
            CaseSpec::Pinhole => f.write_str("pinhole"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub case: CaseSpec,
    /// Built-in scenario name or path to a scenario JSON file.
    pub scenario: Option<String>,
    /// Recorded log (CSV or JSONL) to run instead of the simulator.
    pub log: Option<PathBuf>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    pub out: Option<PathBuf>,
    pub gamma_beta: f64,
    pub gamma_v: Option<f64>,
    pub gamma_omega: Option<f64>,
    pub r_max: f64,
    pub integrator: Integrator,
    /// Global mode with a velocity state driven by measured acceleration.
    pub second_order: bool,
    /// Axle distance for logged speed and steering odometry (m).
    pub axle: f64,
    /// Write every n-th step to the trace.
    pub trace_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Local,
            case: CaseSpec::Sensor(SensorCase::BearingRange),
            scenario: None,
            log: None,
            dt: None,
            seed: None,
            duration: None,
            out: None,
            gamma_beta: 1.0,
            gamma_v: None,
            gamma_omega: None,
            r_max: 100.0,
            integrator: Integrator::Rk4,
            second_order: false,
            axle: 2.83,
            trace_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationStats {
    /// Scalar constraint rows compared before their update.
    pub rows: usize,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub rate: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: RunMode,
    pub case: String,
    pub scenario: String,
    pub seed: u64,
    pub steps: usize,
    /// Whether any ground truth was available.
    pub truth: bool,
    /// Sample times of the series below (s).
    pub times: Vec<f64>,
    /// Per-landmark `||x - x_hat||` at each sample, `None` before the landmark is mapped.
    pub landmark_errors: BTreeMap<u64, Vec<Option<f64>>>,
    pub mean_error: Vec<Option<f64>>,
    pub final_errors: BTreeMap<u64, f64>,
    /// Rigid-aligned RMS of the final map (global-frame modes).
    pub map_residual_rms: Option<f64>,
    /// Vehicle trajectory RMS after rigid alignment (m).
    pub vehicle_ate: Option<f64>,
    pub contraction: Option<Contraction>,
    pub e_c: Vec<f64>,
    pub e_h: Vec<f64>,
    /// Largest inter-robot disagreement on one entry (m).
    pub discrepancy: Vec<f64>,
    /// Radius of a circle fitted to each robot's late trajectory estimate (m).
    pub trajectory_radii: BTreeMap<u64, f64>,
    pub innovation: Option<InnovationStats>,
    /// Mean wall time per filter step (s). Not serialized, so metrics files
    /// stay reproducible.
    #[serde(skip)]
    pub wall_time_per_step: f64,
}

/// Exit status for a failed run: 3 for numerical divergence, 2 otherwise.
pub fn exit_code(err: &SlamError) -> i32 {
    match err {
        SlamError::Divergence { .. } | SlamError::NonFinite(_) | SlamError::SingularNoise | SlamError::InvalidCovariance(_) => 3,
        _ => 2,
    }
}

/// Looks up a built-in scenario, else reads a scenario JSON file.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(sc) = sim::scenario_by_name(spec) {
        return Ok(sc);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(SlamError::InvalidInput(format!(
            "{spec:?} is neither a built-in scenario ({}) nor a file",
            sim::SCENARIO_NAMES.join(", ")
        )));
    }
    let sc: Scenario = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    sc.validate()?;
    Ok(sc)
}

fn default_scenario(cfg: &RunConfig) -> &'static str {
    match (cfg.mode, cfg.case) {
        (RunMode::CoopFull, _) => "coop-full",
        (RunMode::CoopPartial, _) => "coop-partial",
        (RunMode::CoopRobots, _) => "coop-robots",
        (_, CaseSpec::Pinhole) => "circle-3d",
        (_, _) if cfg.second_order => "accelerating",
        _ => "circle-2d",
    }
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let bad = |m: &str| Err(SlamError::InvalidInput(m.into()));
    if let Some(dt) = cfg.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return bad("dt must be positive");
        }
    }
    if let Some(d) = cfg.duration {
        if !(d >= 0.0 && d.is_finite()) {
            return bad("duration must be non-negative");
        }
    }
    if !(cfg.r_max > 0.0) || !(cfg.axle > 0.0) {
        return bad("r_max and axle must be positive");
    }
    if !(cfg.gamma_beta >= 0.0) || cfg.gamma_v.is_some_and(|g| !(g >= 0.0)) || cfg.gamma_omega.is_some_and(|g| !(g >= 0.0)) {
        return bad("gains must be non-negative");
    }
    if cfg.trace_every == 0 {
        return bad("trace_every must be at least 1");
    }
    if cfg.case == CaseSpec::Pinhole && cfg.mode != RunMode::Local {
        return Err(SlamError::Unsupported(format!("pinhole readings in {} mode", cfg.mode)));
    }
    if cfg.second_order && cfg.mode != RunMode::Global {
        return Err(SlamError::Unsupported("second-order dynamics outside global mode".into()));
    }
    if cfg.log.is_some() && (cfg.mode.coop().is_some() || cfg.case == CaseSpec::Pinhole || cfg.second_order) {
        return Err(SlamError::Unsupported(format!("{} runs from a log", cfg.mode)));
    }
    Ok(())
}

/// Executes one run and writes `trace.csv` and `metrics.json` under `cfg.out`
/// when it is set.
pub fn run(cfg: &RunConfig) -> Result<Metrics> {
    validate(cfg)?;
    let mut scenario = match (&cfg.scenario, &cfg.log) {
        (Some(s), _) => Some(load_scenario(s)?),
        (None, Some(_)) => None,
        (None, None) => sim::scenario_by_name(default_scenario(cfg)),
    };
    if let Some(sc) = scenario.as_mut() {
        if let Some(dt) = cfg.dt {
            sc.dt = dt;
        }
        if let Some(seed) = cfg.seed {
            sc.seed = seed;
        }
        if let Some(d) = cfg.duration {
            sc.duration = d;
        }
        if cfg.mode == RunMode::CoopRobots {
            sc.peer_sensing = true;
        }
        sc.validate()?;
    }
    let mut trace = match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(Trace::create(&dir.join("trace.csv"))?)
        }
        None => None,
    };
    let metrics = match (cfg.mode.coop(), &cfg.log) {
        (Some(mode), _) => {
            let sc = scenario.expect("coop modes always have a scenario");
            run_coop(cfg, mode, sc, trace.as_mut())?
        }
        (None, Some(log)) => {
            let rows = logio::read_path(log)?;
            run_single(cfg, Source::from_log(cfg, scenario.as_ref(), &rows)?, trace.as_mut())?
        }
        (None, None) => {
            let sc = scenario.expect("default scenario exists");
            run_single(cfg, Source::from_scenario(cfg, &sc)?, trace.as_mut())?
        }
    };
    if let Some(t) = trace {
        t.finish()?;
    }
    if let Some(dir) = &cfg.out {
        let mut w = BufWriter::new(File::create(dir.join("metrics.json"))?);
        serde_json::to_writer_pretty(&mut w, &metrics)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Serialize)]
struct TraceRow {
    t: f64,
    entity_kind: &'static str,
    robot: u64,
    id: Option<u64>,
    est1: f64,
    est2: Option<f64>,
    est3: Option<f64>,
    true1: Option<f64>,
    true2: Option<f64>,
    true3: Option<f64>,
    c11: Option<f64>,
    c12: Option<f64>,
    c13: Option<f64>,
    c22: Option<f64>,
    c23: Option<f64>,
    c33: Option<f64>,
}

struct Trace {
    w: csv::Writer<BufWriter<File>>,
}

impl Trace {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: csv::Writer::from_writer(BufWriter::new(File::create(path)?)),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&mut self, t: f64, kind: &'static str, robot: u64, id: Option<u64>, est: &[f64], truth: Option<&[f64]>, cov: Option<&DMatrix<f64>>) -> Result<()> {
        let at = |v: &[f64], i: usize| v.get(i).copied();
        let c = |i: usize, j: usize| cov.filter(|m| i < m.nrows() && j < m.ncols()).map(|m| m[(i, j)]);
        self.w.serialize(TraceRow {
            t,
            entity_kind: kind,
            robot,
            id,
            est1: est[0],
            est2: at(est, 1),
            est3: at(est, 2),
            true1: truth.and_then(|v| at(v, 0)),
            true2: truth.and_then(|v| at(v, 1)),
            true3: truth.and_then(|v| at(v, 2)),
            c11: c(0, 0),
            c12: c(0, 1),
            c13: c(0, 2),
            c22: c(1, 1),
            c23: c(1, 2),
            c33: c(2, 2),
        })?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics bookkeeping

#[derive(Debug, Clone, PartialEq)]
struct TruthPose {
    position: DVector<f64>,
    heading: Option<f64>,
}

struct Recorder {
    times: Vec<f64>,
    errors: BTreeMap<u64, Vec<Option<f64>>>,
    mean: Vec<Option<f64>>,
    vehicle_est: Vec<DVector<f64>>,
    vehicle_true: Vec<DVector<f64>>,
    innovation_sq: f64,
    innovation_rows: usize,
    wall: f64,
    steps: usize,
    truth: bool,
}

impl Recorder {
    fn new(ids: impl IntoIterator<Item = u64>) -> Self {
        Self {
            times: Vec::new(),
            errors: ids.into_iter().map(|id| (id, Vec::new())).collect(),
            mean: Vec::new(),
            vehicle_est: Vec::new(),
            vehicle_true: Vec::new(),
            innovation_sq: 0.0,
            innovation_rows: 0,
            wall: 0.0,
            steps: 0,
            truth: false,
        }
    }

    fn sample(&mut self, t: f64, errors: &BTreeMap<u64, f64>) {
        self.times.push(t);
        for (id, series) in self.errors.iter_mut() {
            series.push(errors.get(id).copied());
        }
        self.mean.push((!errors.is_empty()).then(|| errors.values().sum::<f64>() / errors.len() as f64));
        if !errors.is_empty() {
            self.truth = true;
        }
    }

    fn innovations(&mut self, residuals: &[f64]) {
        self.innovation_rows += residuals.len();
        self.innovation_sq += residuals.iter().map(|r| r * r).sum::<f64>();
    }

    fn finish(self, cfg: &RunConfig, scenario: &str, seed: u64) -> Result<Metrics> {
        let final_errors = self
            .errors
            .iter()
            .filter_map(|(id, s)| s.iter().rev().flatten().next().map(|e| (*id, *e)))
            .collect();
        let contraction = contraction_fit(&self.times, &self.mean);
        let vehicle_ate = if self.vehicle_true.len() >= 2 {
            Some(ate(&self.vehicle_est, &self.vehicle_true)?)
        } else {
            None
        };
        Ok(Metrics {
            mode: cfg.mode,
            case: cfg.case.to_string(),
            scenario: scenario.to_string(),
            seed,
            steps: self.steps,
            truth: self.truth || !self.vehicle_true.is_empty(),
            times: self.times,
            landmark_errors: self.errors,
            mean_error: self.mean,
            final_errors,
            map_residual_rms: None,
            vehicle_ate,
            contraction,
            e_c: Vec::new(),
            e_h: Vec::new(),
            discrepancy: Vec::new(),
            trajectory_radii: BTreeMap::new(),
            innovation: (self.innovation_rows > 0).then(|| InnovationStats {
                rows: self.innovation_rows,
                rms: (self.innovation_sq / self.innovation_rows as f64).sqrt(),
            }),
            wall_time_per_step: if self.steps > 0 { self.wall / self.steps as f64 } else { 0.0 },
        })
    }
}

/// Vehicle trajectory error after the best rigid alignment of the estimate
/// onto the truth (m).
pub fn ate(estimate: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    align::residual_rms(estimate, truth)
}

/// Exponential fit of an error series over its post-transient window: from
/// 10% of the run until the error first reaches the numerical floor.
pub fn contraction_fit(times: &[f64], errors: &[Option<f64>]) -> Option<Contraction> {
    let t_end = *times.last()?;
    let t_start = times.first().copied().unwrap_or(0.0);
    let from = t_start + 0.1 * (t_end - t_start);
    let peak = errors.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let mut series = Vec::new();
    for (&t, e) in times.iter().zip(errors) {
        let Some(e) = *e else { continue };
        if t < from {
            continue;
        }
        if e <= peak * 1e-9 {
            break;
        }
        series.push((t, e));
    }
    let d = fit_contraction_rate(&series).ok()?;
    Some(Contraction {
        rate: d.rate,
        r_squared: d.r_squared,
    })
}

fn check_finite(t: f64, values: impl IntoIterator<Item = DVector<f64>>) -> Result<()> {
    for v in values {
        if v.iter().any(|x| !x.is_finite()) || v.norm() > DIVERGENCE_LIMIT {
            return Err(SlamError::Divergence {
                t,
                reason: "estimate left the finite range".into(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single-robot runs

struct Step {
    t: f64,
    dt: f64,
    inputs: RobotInputs,
    accel: Option<DVector<f64>>,
    /// True heading used as the attitude of 3D global runs.
    heading: Option<f64>,
    observations: Vec<(u64, Observation)>,
    pinhole: Vec<(u64, PinholeObs)>,
    /// Truth at `t + dt`.
    truth_after: Option<TruthPose>,
}

struct Source {
    name: String,
    seed: u64,
    dim: usize,
    robot: u64,
    noise: NoiseSpec,
    start: Option<TruthPose>,
    steps: Vec<Step>,
    landmarks: BTreeMap<u64, DVector<f64>>,
}

impl Source {
    fn from_scenario(cfg: &RunConfig, sc: &Scenario) -> Result<Self> {
        let vehicle = &sc.vehicles[0];
        let case = match cfg.case {
            CaseSpec::Sensor(c) => c,
            CaseSpec::Pinhole => {
                if sc.dim != 3 {
                    return Err(SlamError::Unsupported("pinhole readings need a 3D scenario".into()));
                }
                SensorCase::BearingOnly
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5eed_cafe);
        let pose_at = |t: f64| vehicle.trajectory.pose(t, sc.dim);
        let mut steps = Vec::with_capacity(sc.steps());
        for frame in Simulator::new(sc.clone(), case)? {
            let rf = frame
                .robots
                .iter()
                .find(|r| r.robot == vehicle.id)
                .expect("simulator emits every vehicle");
            let mut pinhole = Vec::new();
            if cfg.case == CaseSpec::Pinhole {
                for lm in &sc.landmarks {
                    let p = DVector::from_column_slice(&lm.position);
                    if !sc.visibility.visible(vehicle, &rf.pose, &p) {
                        continue;
                    }
                    if let Some((y1, y2)) = project(&rf.pose.to_body(&p), FOCAL) {
                        pinhole.push((
                            lm.id,
                            PinholeObs {
                                f: FOCAL,
                                y1: y1 + gauss_sample(&mut rng, sc.noise.sigma_pixel),
                                y2: y2 + gauss_sample(&mut rng, sc.noise.sigma_pixel),
                                sigma: sc.noise.sigma_pixel,
                            },
                        ));
                    }
                }
            }
            let after = pose_at(frame.t + sc.dt);
            steps.push(Step {
                t: frame.t,
                dt: sc.dt,
                inputs: rf.inputs.clone(),
                accel: Some(rf.pose.body_acceleration()),
                heading: Some(rf.pose.heading),
                observations: rf.observations.iter().map(|o| (o.landmark, o.observation)).collect(),
                pinhole,
                truth_after: Some(TruthPose {
                    position: after.position,
                    heading: Some(after.heading),
                }),
            });
        }
        let p0 = pose_at(0.0);
        Ok(Self {
            name: sc.name.clone(),
            seed: sc.seed,
            dim: sc.dim,
            robot: vehicle.id,
            noise: sc.noise,
            start: Some(TruthPose {
                position: p0.position,
                heading: Some(p0.heading),
            }),
            steps,
            landmarks: sc.landmarks.iter().map(|l| (l.id, DVector::from_column_slice(&l.position))).collect(),
        })
    }

    fn from_log(cfg: &RunConfig, scenario: Option<&Scenario>, rows: &[logio::LogRow]) -> Result<Self> {
        let (log_steps, landmarks) = logio::group(rows)?;
        let Some(first) = log_steps.first() else {
            return Err(SlamError::InvalidInput("log has no rows".into()));
        };
        let robot = first.robot;
        if log_steps.iter().any(|s| s.robot != robot) {
            return Err(SlamError::Unsupported("logs with more than one robot".into()));
        }
        let dim = log_dim(&log_steps);
        let mut noise = scenario.map(|s| s.noise).unwrap_or_default();
        if scenario.is_none() {
            if let Some(r) = rows.iter().find(|r| r.kind == RowKind::Alpha) {
                noise.sigma_alpha = r.sigma;
            }
        }
        let fallback_dt = cfg.dt.or(scenario.map(|s| s.dt)).unwrap_or(0.01);
        let truth_of = |s: &LogStep| {
            s.truth.clone().map(|position| TruthPose {
                position,
                heading: s.truth_heading,
            })
        };
        let mut steps = Vec::with_capacity(log_steps.len());
        for (k, s) in log_steps.iter().enumerate() {
            let next = log_steps.get(k + 1);
            let dt = next.map(|n| n.t - s.t).unwrap_or(fallback_dt);
            let inputs = match (&s.inputs, &s.odometry) {
                (Some(i), _) => i.clone(),
                (None, Some(o)) => VehicleKinematics {
                    u: o.speed,
                    l: cfg.axle,
                    theta_s: o.steer,
                }
                .inputs(0.0)?,
                (None, None) => {
                    return Err(SlamError::InvalidInput(format!("log step at t = {} has no motion inputs", s.t)));
                }
            };
            if inputs.dim() != dim {
                return Err(SlamError::Dimension(format!("{}D inputs in a {dim}D log", inputs.dim())));
            }
            steps.push(Step {
                t: s.t,
                dt,
                inputs,
                accel: None,
                heading: s.truth_heading,
                observations: s.observations.clone(),
                pinhole: Vec::new(),
                truth_after: next.and_then(truth_of),
            });
        }
        let name = cfg
            .log
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "log".into());
        Ok(Self {
            name,
            seed: cfg.seed.unwrap_or(0),
            dim,
            robot,
            noise,
            start: truth_of(first),
            steps,
            landmarks,
        })
    }
}

fn log_dim(steps: &[LogStep]) -> usize {
    for s in steps {
        if let Some(i) = &s.inputs {
            return i.dim();
        }
        if let Some(d) = s.observations.iter().find_map(|(_, o)| o.dim()) {
            return d;
        }
    }
    2
}

/// Maps body coordinates (x1 right, x2 forward, x3 up) to camera
/// coordinates with the optical axis as the third axis.
pub fn camera_from_body() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
}

/// Image point `-f (c1, c2) / c3` of a body-frame point, if it lies in front.
pub fn project(body: &DVector<f64>, f: f64) -> Option<(f64, f64)> {
    let c = camera_from_body() * body;
    (c[2] >= MIN_DEPTH).then(|| (-f * c[0] / c[2], -f * c[1] / c[2]))
}

/// Local 3D SLAM from pinhole image points: one filter per feature in the
/// body frame.
#[derive(Debug, Clone)]
pub struct PinholeSlam {
    pub filters: BTreeMap<u64, FilterState>,
    pub cfg: FilterConfig,
    /// Variance of each image constraint row.
    pub variance: f64,
    pub prior_radius: f64,
    pub prior_variance: f64,
    pub t: f64,
}

impl PinholeSlam {
    pub fn new(cfg: FilterConfig, sigma_pixel: f64, r_max: f64, floor: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            filters: BTreeMap::new(),
            cfg,
            variance: (sigma_pixel * r_max).powi(2).max(floor),
            prior_radius: r_max / 2.0,
            prior_variance: 100.0,
            t: 0.0,
        })
    }

    pub fn measurement(&self, obs: &PinholeObs) -> Result<VirtualMeasurement> {
        let c = vmeas::pinhole(obs)?;
        let h = &c.h * camera_from_body();
        VirtualMeasurement::new(c.y, h, DMatrix::identity(2, 2) * self.variance)
    }

    pub fn step(&mut self, inputs: &RobotInputs, readings: &[(u64, PinholeObs)]) -> Result<()> {
        if inputs.dim() != 3 {
            return Err(SlamError::Dimension("pinhole SLAM runs in 3D".into()));
        }
        let mut by_id = BTreeMap::new();
        for (id, o) in readings {
            if by_id.insert(*id, self.measurement(o)?).is_some() {
                return Err(SlamError::InvalidInput(format!("two readings of feature {id} in one step")));
            }
            if !self.filters.contains_key(id) {
                let ray = DVector::from_vec(vec![-o.y1 / o.f, -o.y2 / o.f, 1.0]).normalize();
                let x = camera_from_body().transpose() * ray * self.prior_radius;
                self.filters.insert(*id, FilterState::new(x, DMatrix::identity(3, 3) * self.prior_variance, self.t)?);
            }
        }
        for (id, state) in self.filters.iter_mut() {
            *state = filter::step(state, inputs, by_id.get(id), &self.cfg)?;
        }
        self.t += self.cfg.dt;
        Ok(())
    }
}

enum Engine {
    Local(LocalSlam),
    Pinhole(PinholeSlam),
    Global(GlobalSlam),
    Dunk(DunkSlam),
}

impl Engine {
    fn build(cfg: &RunConfig, src: &Source, porter: NoisePorter) -> Result<Self> {
        let dt = src.steps.first().map(|s| s.dt).unwrap_or(0.01);
        let filter = FilterConfig {
            dt,
            integrator: cfg.integrator,
            ..FilterConfig::default()
        };
        let start = src.start.clone().unwrap_or(TruthPose {
            position: DVector::zeros(src.dim),
            heading: None,
        });
        let beta = start.heading.unwrap_or(0.0);
        Ok(match (cfg.mode, cfg.case) {
            (RunMode::Local, CaseSpec::Pinhole) => {
                Engine::Pinhole(PinholeSlam::new(filter, src.noise.sigma_pixel, cfg.r_max, porter.policy.variance_floor)?)
            }
            (RunMode::Local, _) => {
                let local = LocalConfig {
                    filter,
                    ..LocalConfig::for_max_range(cfg.r_max)
                };
                Engine::Local(LocalSlam::new(src.dim, local, porter)?)
            }
            (RunMode::Global, _) => {
                if src.dim == 3 && src.steps.iter().any(|s| s.heading.is_none()) {
                    return Err(SlamError::Unsupported("3D global runs need the vehicle attitude".into()));
                }
                let dynamics = if cfg.second_order { Dynamics::SecondOrder } else { Dynamics::FirstOrder };
                let mut state = GlobalState::new(src.dim, dynamics, start.position.clone(), 1e-6, beta)?;
                if cfg.second_order {
                    if src.dim != 2 {
                        return Err(SlamError::Unsupported("second-order dynamics in 3D".into()));
                    }
                    let v0 = src.steps.first().map(|s| global_velocity(&s.inputs, beta)).unwrap_or_else(|| DVector::zeros(2));
                    state.filter.x.rows_mut(2, 2).copy_from(&v0);
                }
                let gcfg = GlobalConfig {
                    filter,
                    gamma_beta: cfg.gamma_beta,
                    prior_radius: cfg.r_max / 2.0,
                    ..GlobalConfig::default()
                };
                Engine::Global(GlobalSlam::new(state, gcfg, porter)?)
            }
            (RunMode::Dunk, _) => {
                if src.dim != 2 {
                    return Err(SlamError::Unsupported("the DUNK network is planar".into()));
                }
                let dcfg = DunkConfig {
                    filter,
                    gamma_beta: cfg.gamma_beta,
                    prior_radius: cfg.r_max / 2.0,
                    ..DunkConfig::default()
                };
                Engine::Dunk(DunkSlam::new(start.position.clone(), beta, dcfg, porter)?)
            }
            (mode, _) => unreachable!("{mode} is not a single-robot mode"),
        })
    }

    fn set_dt(&mut self, dt: f64) {
        match self {
            Engine::Local(s) => s.cfg.filter.dt = dt,
            Engine::Pinhole(s) => s.cfg.dt = dt,
            Engine::Global(s) => s.cfg.filter.dt = dt,
            Engine::Dunk(s) => s.cfg.filter.dt = dt,
        }
    }

    fn body_frame(&self) -> bool {
        matches!(self, Engine::Local(_) | Engine::Pinhole(_))
    }

    /// Constraint residuals `y - H x_hat` of this step's readings against the
    /// current estimates, for landmarks already mapped.
    fn innovations(&self, step: &Step, porter: &mut NoisePorter) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut push = |vm: &VirtualMeasurement, rel: &DVector<f64>| {
            out.extend((&vm.y - &vm.h * rel).iter().copied());
        };
        match self {
            Engine::Pinhole(s) => {
                for (id, o) in &step.pinhole {
                    if let Some(f) = s.filters.get(id) {
                        push(&s.measurement(o)?, &f.x);
                    }
                }
            }
            _ => {
                for (id, o) in &step.observations {
                    let Some(rel) = self.relative(*id, step) else { continue };
                    if let Some(vm) = porter.measurement(o, &step.inputs)? {
                        if vm.h.ncols() == rel.len() {
                            push(&vm, &rel);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Estimated landmark position in the body frame.
    fn relative(&self, id: u64, step: &Step) -> Option<DVector<f64>> {
        match self {
            Engine::Local(s) => s.estimate(id).cloned(),
            Engine::Pinhole(s) => s.filters.get(&id).map(|f| f.x.clone()),
            Engine::Global(g) => {
                let heading = if g.state.dim == 3 { step.heading? } else { g.state.beta_hat };
                let x = g.state.landmark(id)?;
                Some(body_rotation(heading, g.state.dim) * (x - g.state.vehicle()))
            }
            Engine::Dunk(d) => {
                let p = d.pairs.get(&id)?;
                Some(body_rotation(d.beta_hat, 2) * (p.landmark() - p.vehicle()))
            }
        }
    }

    fn advance(&mut self, step: &Step) -> Result<()> {
        match self {
            Engine::Local(s) => s.step(&step.inputs, &step.observations),
            Engine::Pinhole(s) => s.step(&step.inputs, &step.pinhole),
            Engine::Global(g) => {
                if g.state.dynamics == Dynamics::SecondOrder {
                    let accel = step
                        .accel
                        .clone()
                        .ok_or_else(|| SlamError::Unsupported("second-order runs need measured acceleration".into()))?;
                    let inputs = AccelInputs {
                        accel,
                        omega: step.inputs.omega.clone(),
                        q: step.inputs.q.clone(),
                    };
                    g.step_second_order(&inputs, &step.observations)
                } else if g.state.dim == 3 {
                    let heading = step.heading.expect("checked when the engine was built");
                    g.step_with_attitude(&step.inputs, &body_rotation(heading, 3), &step.observations)
                } else {
                    g.step(&step.inputs, &step.observations)
                }
            }
            Engine::Dunk(d) => d.step(&step.inputs, &step.observations),
        }
    }

    /// `(id, estimate, covariance)` of every mapped landmark.
    fn landmarks(&self) -> Vec<(u64, DVector<f64>, DMatrix<f64>)> {
        match self {
            Engine::Local(s) => s.filters.iter().map(|(id, f)| (*id, f.state.x.clone(), f.state.p.clone())).collect(),
            Engine::Pinhole(s) => s.filters.iter().map(|(id, f)| (*id, f.x.clone(), f.p.clone())).collect(),
            Engine::Global(g) => g
                .state
                .ids
                .iter()
                .map(|&id| {
                    (
                        id,
                        g.state.landmark(id).expect("listed id"),
                        g.state.landmark_covariance(id).expect("listed id"),
                    )
                })
                .collect(),
            Engine::Dunk(d) => d.pairs.iter().map(|(id, p)| (*id, p.landmark(), p.sigma_landmark())).collect(),
        }
    }

    /// Vehicle estimate, its covariance and the heading estimate.
    fn vehicle(&self) -> Option<(DVector<f64>, Option<DMatrix<f64>>, f64)> {
        match self {
            Engine::Local(_) | Engine::Pinhole(_) => None,
            Engine::Global(g) => Some((g.state.vehicle(), Some(g.state.vehicle_covariance()), g.state.beta_hat)),
            Engine::Dunk(d) => Some((d.vehicle.clone(), d.consensus.as_ref().map(|c| c.covariance()), d.beta_hat)),
        }
    }
}

fn global_velocity(inputs: &RobotInputs, beta: f64) -> DVector<f64> {
    body_rotation(beta, inputs.dim()).transpose() * &inputs.u
}

fn run_single(cfg: &RunConfig, src: Source, mut trace: Option<&mut Trace>) -> Result<Metrics> {
    let porter = NoisePorter::new(
        NoisePolicy {
            r_max: cfg.r_max,
            ..NoisePolicy::default()
        },
        src.noise,
    );
    let mut probe = porter.clone();
    let mut engine = Engine::build(cfg, &src, porter)?;
    let mut rec = Recorder::new(src.landmarks.keys().copied());
    let n = src.steps.len();
    for (k, step) in src.steps.iter().enumerate() {
        engine.set_dt(step.dt);
        let residuals = engine.innovations(step, &mut probe)?;
        rec.innovations(&residuals);
        let clock = Instant::now();
        engine.advance(step)?;
        rec.wall += clock.elapsed().as_secs_f64();
        rec.steps += 1;
        let t = step.t + step.dt;
        let lms = engine.landmarks();
        let vehicle = engine.vehicle();
        check_finite(t, lms.iter().map(|l| l.1.clone()).chain(vehicle.iter().map(|v| v.0.clone())))?;

        let truth = step.truth_after.as_ref();
        let rot = truth.and_then(|p| p.heading).map(|h| body_rotation(h, src.dim));
        let true_of = |id: u64| -> Option<DVector<f64>> {
            let p = src.landmarks.get(&id)?;
            if engine.body_frame() {
                Some(rot.as_ref()? * (p - &truth?.position))
            } else {
                Some(p.clone())
            }
        };
        let mut errors = BTreeMap::new();
        for (id, est, _) in &lms {
            if let Some(tr) = true_of(*id) {
                errors.insert(*id, (est - tr).norm());
            }
        }
        rec.sample(t, &errors);
        if let (Some((v, _, _)), Some(tp)) = (&vehicle, truth) {
            rec.vehicle_est.push(v.clone());
            rec.vehicle_true.push(tp.position.clone());
        }

        if let Some(tr) = trace.as_deref_mut() {
            if k % cfg.trace_every == 0 || k + 1 == n {
                for (id, est, cov) in &lms {
                    let tv = true_of(*id);
                    tr.row(t, "landmark", src.robot, Some(*id), est.as_slice(), tv.as_ref().map(|v| v.as_slice()), Some(cov))?;
                }
                if let Some((v, cov, beta)) = &vehicle {
                    tr.row(t, "vehicle", src.robot, None, v.as_slice(), truth.map(|p| p.position.as_slice()), cov.as_ref())?;
                    let th = truth.and_then(|p| p.heading).map(|h| [h]);
                    tr.row(t, "heading", src.robot, None, &[*beta], th.as_ref().map(|h| &h[..]), None)?;
                }
            }
        }
    }
    let mut metrics = rec.finish(cfg, &src.name, src.seed)?;
    if !engine.body_frame() {
        let (est, tru): (Vec<_>, Vec<_>) = engine
            .landmarks()
            .into_iter()
            .filter_map(|(id, e, _)| src.landmarks.get(&id).map(|t| (e, t.clone())))
            .unzip();
        if !est.is_empty() {
            metrics.map_residual_rms = Some(align::residual_rms(&est, &tru)?);
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Cooperative runs

fn run_coop(cfg: &RunConfig, mode: CoopMode, sc: Scenario, mut trace: Option<&mut Trace>) -> Result<Metrics> {
    if sc.dim != 2 {
        return Err(SlamError::Unsupported("cooperative SLAM is planar".into()));
    }
    let case = match (mode, cfg.case) {
        (CoopMode::RobotsOnly, _) => SensorCase::BearingRange,
        (_, CaseSpec::Sensor(c)) => c,
        (_, CaseSpec::Pinhole) => unreachable!("rejected by validation"),
    };
    let mut ccfg = CoopConfig::for_mode(mode);
    ccfg.dunk.filter = FilterConfig {
        dt: sc.dt,
        integrator: cfg.integrator,
        ..FilterConfig::default()
    };
    ccfg.dunk.gamma_beta = cfg.gamma_beta;
    ccfg.dunk.prior_radius = cfg.r_max / 2.0;
    if let Some(g) = cfg.gamma_v {
        ccfg.gamma_v = g;
    }
    if let Some(g) = cfg.gamma_omega {
        ccfg.gamma_omega = g;
    }
    let porter = NoisePorter::new(
        NoisePolicy {
            r_max: cfg.r_max,
            ..NoisePolicy::default()
        },
        sc.noise,
    );
    let ids: Vec<u64> = sc.vehicles.iter().map(|v| v.id).collect();
    let mut coop = CoopSlam::new(&ids, ccfg, porter)?;
    let entity_ids: Vec<u64> = match mode {
        CoopMode::RobotsOnly => ids.clone(),
        _ => sc.landmarks.iter().map(|l| l.id).collect(),
    };
    let mut rec = Recorder::new(entity_ids);
    let (mut e_c, mut e_h, mut discrepancy) = (Vec::new(), Vec::new(), Vec::new());
    let mut tracks: BTreeMap<u64, Vec<(f64, DVector<f64>)>> = BTreeMap::new();
    let n = sc.steps();
    let xy = |v: &Vector2<f64>| DVector::from_vec(vec![v.x, v.y]);
    let mut last_truth = BTreeMap::new();
    let mut last_consensus = BTreeMap::new();
    for (k, frame) in Simulator::new(sc.clone(), case)?.enumerate() {
        let clock = Instant::now();
        let tick = coop.step(&frame)?;
        rec.wall += clock.elapsed().as_secs_f64();
        rec.steps += 1;
        let t = tick.t;
        check_finite(t, coop.robots.iter().map(|r| r.slam.vehicle.clone()))?;
        e_c.push(tick.e_c);
        e_h.push(tick.e_h);
        discrepancy.push(coop.max_discrepancy());

        let poses: BTreeMap<u64, sim::Pose> = sc.vehicles.iter().map(|v| (v.id, v.trajectory.pose(t, 2))).collect();
        let truth: BTreeMap<u64, DVector<f64>> = match mode {
            CoopMode::RobotsOnly => poses.iter().map(|(id, p)| (*id, p.position.clone())).collect(),
            _ => sc.landmarks.iter().map(|l| (l.id, DVector::from_column_slice(&l.position))).collect(),
        };
        let consensus: BTreeMap<u64, DVector<f64>> = coop
            .consensus_map()
            .iter()
            .filter(|(id, _)| truth.contains_key(id))
            .map(|(id, v)| (*id, xy(v)))
            .collect();
        let mut errors = BTreeMap::new();
        if !consensus.is_empty() {
            let est: Vec<_> = consensus.values().cloned().collect();
            let tru: Vec<_> = consensus.keys().map(|id| truth[id].clone()).collect();
            for ((id, _), e) in consensus.iter().zip(align::aligned_errors(&est, &tru)?) {
                errors.insert(*id, e);
            }
        }
        rec.sample(t, &errors);
        for r in &coop.robots {
            rec.vehicle_est.push(r.slam.vehicle.clone());
            rec.vehicle_true.push(poses[&r.id].position.clone());
            tracks.entry(r.id).or_default().push((t, r.slam.vehicle.clone()));
        }

        if let Some(tr) = trace.as_deref_mut() {
            if k % cfg.trace_every == 0 || k + 1 == n {
                for r in &coop.robots {
                    for (id, p) in &r.slam.pairs {
                        let kind = if mode == CoopMode::RobotsOnly { "peer" } else { "landmark" };
                        let tv = truth.get(id);
                        tr.row(t, kind, r.id, Some(*id), p.landmark().as_slice(), tv.map(|v| v.as_slice()), Some(&p.sigma_landmark()))?;
                    }
                    let pose = &poses[&r.id];
                    let cov = r.slam.consensus.as_ref().map(|c| c.covariance());
                    tr.row(t, "vehicle", r.id, None, r.slam.vehicle.as_slice(), Some(pose.position.as_slice()), cov.as_ref())?;
                    tr.row(t, "heading", r.id, None, &[r.slam.beta_hat], Some(&[pose.heading]), None)?;
                }
                for (id, v) in &consensus {
                    tr.row(t, "consensus", 0, Some(*id), v.as_slice(), truth.get(id).map(|v| v.as_slice()), None)?;
                }
            }
        }
        last_truth = truth;
        last_consensus = consensus;
    }
    let mut metrics = rec.finish(cfg, &sc.name, sc.seed)?;
    metrics.e_c = e_c;
    metrics.e_h = e_h;
    metrics.discrepancy = discrepancy;
    if !last_consensus.is_empty() {
        let est: Vec<_> = last_consensus.values().cloned().collect();
        let tru: Vec<_> = last_consensus.keys().map(|id| last_truth[id].clone()).collect();
        metrics.map_residual_rms = Some(align::residual_rms(&est, &tru)?);
    }
    let late = sc.duration / 2.0;
    for (id, track) in tracks {
        let pts: Vec<_> = track.into_iter().filter(|(t, _)| *t >= late).map(|(_, p)| p).collect();
        if let Ok((_, r)) = align::fit_circle(&pts) {
            metrics.trajectory_radii.insert(id, r);
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Noise report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub sigma_theta_deg: f64,
    pub range: f64,
    pub bearing_deg: f64,
    pub samples: usize,
    /// Monte Carlo mean of the tangential row residual.
    pub mean_tangential: f64,
    /// Monte Carlo mean of the radial row residual.
    pub mean_radial: f64,
    pub analytic_radial_bias: f64,
    pub var_tangential: f64,
    pub var_radial: f64,
    pub bound_tangential: f64,
    pub bound_radial: f64,
}

/// Bearing and range readings of a landmark at range `r`, bearing 45 deg,
/// with bearing noise only: empirical residual statistics of the two
/// constraint rows next to the analytic values.
pub fn noise_report(sigma_theta_deg: f64, r: f64, samples: usize, seed: u64) -> Result<NoiseReport> {
    if !(sigma_theta_deg >= 0.0) || !(r > 0.0) {
        return Err(SlamError::InvalidInput("sigma must be non-negative and range positive".into()));
    }
    let sigma = sigma_theta_deg.to_radians();
    let bearing = std::f64::consts::FRAC_PI_4;
    let x = vmeas::position_from_bearing(bearing, None, r);
    let spec = NoiseSpec {
        sigma_theta: sigma,
        ..NoiseSpec::default()
    };
    let p = noisecal::monte_carlo_port(SensorCase::BearingRange, &x, &RobotInputs::still(2), &spec, samples, seed)?;
    let bounds = noisecal::variance_bounds(sigma, r)?;
    Ok(NoiseReport {
        sigma_theta_deg,
        range: r,
        bearing_deg: bearing.to_degrees(),
        samples: p.samples,
        mean_tangential: p.mean[0],
        mean_radial: p.mean[1],
        analytic_radial_bias: noisecal::bias_range_2d(sigma, r),
        var_tangential: p.variance[0],
        var_radial: p.variance[1],
        bound_tangential: bounds.tangential,
        bound_radial: bounds.radial,
    })
}
