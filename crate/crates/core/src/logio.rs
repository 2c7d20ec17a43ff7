//! Flat observation logs.
//!
//! A log is a list of rows `t, robot, landmark, kind, value, sigma`. Readings
//! carry a landmark id; inputs and truth rows leave it empty unless they
//! describe a landmark. The same rows can be stored as CSV or JSON lines.
//! Converted real-world logs use `speed` and `steer` rows for wheel odometry
//! and may carry sparse `truth_*` rows (GPS fixes) or none at all.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::geom::AngularVelocity;
use crate::sim::{Frame, Scenario};
use crate::state::RobotInputs;
use crate::vmeas::{BearingObs, BearingRateObs, DopplerObs, Observation, RangeObs, TimeToContactObs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Theta,
    Phi,
    R,
    ThetaDot,
    PhiDot,
    Tau,
    Alpha,
    Diameter,
    RDot,
    U1,
    U2,
    U3,
    Wx,
    Wy,
    Wz,
    Q,
    Speed,
    Steer,
    TruthX,
    TruthY,
    TruthZ,
    TruthHeading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub robot: u64,
    pub landmark: Option<u64>,
    pub kind: RowKind,
    pub value: f64,
    pub sigma: f64,
}

impl LogRow {
    fn new(t: f64, robot: u64, landmark: Option<u64>, kind: RowKind, value: f64, sigma: f64) -> Self {
        Self { t, robot, landmark, kind, value, sigma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl LogFormat {
    /// Guess from a file extension; CSV unless it ends in `.jsonl` or `.json`.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => LogFormat::Jsonl,
            _ => LogFormat::Csv,
        }
    }
}

fn observation_rows(t: f64, robot: u64, id: u64, o: &Observation, out: &mut Vec<LogRow>) {
    let lm = Some(id);
    if let Some(b) = o.bearing() {
        out.push(LogRow::new(t, robot, lm, RowKind::Theta, b.theta, b.sigma_theta));
        if let Some(phi) = b.phi {
            out.push(LogRow::new(t, robot, lm, RowKind::Phi, phi, b.sigma_phi));
        }
    }
    match o {
        Observation::Bearing(_) => {}
        Observation::BearingRange(_, r) => out.push(LogRow::new(t, robot, lm, RowKind::R, r.r, r.sigma_r)),
        Observation::BearingRate(_, d) => {
            out.push(LogRow::new(t, robot, lm, RowKind::ThetaDot, d.theta_dot, d.sigma_theta_dot));
            if let Some(pd) = d.phi_dot {
                out.push(LogRow::new(t, robot, lm, RowKind::PhiDot, pd, d.sigma_phi_dot));
            }
        }
        Observation::TimeToContact(_, c) => {
            out.push(LogRow::new(t, robot, lm, RowKind::Tau, c.tau, 0.0));
            if let Some(a) = c.alpha {
                out.push(LogRow::new(t, robot, lm, RowKind::Alpha, a, 0.0));
            }
            if let Some(d) = c.diameter {
                out.push(LogRow::new(t, robot, lm, RowKind::Diameter, d, 0.0));
            }
        }
        Observation::RangeRate(d) => {
            out.push(LogRow::new(t, robot, lm, RowKind::R, d.r, d.sigma_r));
            out.push(LogRow::new(t, robot, lm, RowKind::RDot, d.r_dot, d.sigma_r_dot));
        }
    }
}

fn input_rows(t: f64, robot: u64, inputs: &RobotInputs, out: &mut Vec<LogRow>) {
    let u_kinds = [RowKind::U1, RowKind::U2, RowKind::U3];
    for (k, v) in u_kinds.iter().zip(inputs.u.iter()) {
        out.push(LogRow::new(t, robot, None, *k, *v, 0.0));
    }
    match inputs.omega.rates() {
        [wz] => out.push(LogRow::new(t, robot, None, RowKind::Wz, *wz, 0.0)),
        rates => {
            for (k, v) in [RowKind::Wx, RowKind::Wy, RowKind::Wz].iter().zip(rates) {
                out.push(LogRow::new(t, robot, None, *k, *v, 0.0));
            }
        }
    }
    out.push(LogRow::new(t, robot, None, RowKind::Q, inputs.q[(0, 0)], 0.0));
}

fn truth_rows(t: f64, robot: u64, landmark: Option<u64>, p: &DVector<f64>, heading: Option<f64>, out: &mut Vec<LogRow>) {
    for (k, v) in [RowKind::TruthX, RowKind::TruthY, RowKind::TruthZ].iter().zip(p.iter()) {
        out.push(LogRow::new(t, robot, landmark, *k, *v, 0.0));
    }
    if let Some(h) = heading {
        out.push(LogRow::new(t, robot, landmark, RowKind::TruthHeading, h, 0.0));
    }
}

/// Rows for simulated frames. Landmark truth goes in at the first frame,
/// under the first robot.
pub fn frames_to_rows(scenario: &Scenario, frames: &[Frame]) -> Vec<LogRow> {
    let mut out = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for rf in &f.robots {
            input_rows(f.t, rf.robot, &rf.inputs, &mut out);
            truth_rows(f.t, rf.robot, None, &rf.pose.position, Some(rf.pose.heading), &mut out);
            if fi == 0 && Some(rf.robot) == scenario.vehicles.first().map(|v| v.id) {
                for lm in &scenario.landmarks {
                    truth_rows(f.t, rf.robot, Some(lm.id), &DVector::from_column_slice(&lm.position), None, &mut out);
                }
            }
            for o in &rf.observations {
                observation_rows(f.t, rf.robot, o.landmark, &o.observation, &mut out);
            }
        }
    }
    out
}

fn check_order(last: &mut BTreeMap<u64, f64>, row: &LogRow, line: usize) -> Result<()> {
    if !row.t.is_finite() || !row.value.is_finite() || !row.sigma.is_finite() || row.sigma < 0.0 {
        return Err(SlamError::Parse { line, msg: "non-finite value or negative sigma".into() });
    }
    if let Some(prev) = last.get(&row.robot) {
        if row.t < *prev {
            return Err(SlamError::Parse {
                line,
                msg: format!("time {} goes back from {prev} for robot {}", row.t, row.robot),
            });
        }
    }
    last.insert(row.robot, row.t);
    Ok(())
}

pub fn write_csv<W: Write>(w: W, rows: &[LogRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads CSV rows with a header line. Line numbers in errors count the header.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<LogRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let mut out = Vec::new();
    let mut last = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: LogRow = rec.deserialize(Some(&headers)).map_err(|e| SlamError::Parse { line, msg: e.to_string() })?;
        check_order(&mut last, &row, line)?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LogRow>> {
    let mut out = Vec::new();
    let mut last = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LogRow = serde_json::from_str(&line).map_err(|e| SlamError::Parse { line: i + 1, msg: e.to_string() })?;
        check_order(&mut last, &row, i + 1)?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_path(path: &std::path::Path) -> Result<Vec<LogRow>> {
    let f = std::fs::File::open(path)?;
    match LogFormat::from_path(path) {
        LogFormat::Csv => read_csv(f),
        LogFormat::Jsonl => read_jsonl(std::io::BufReader::new(f)),
    }
}

pub fn write_path(path: &std::path::Path, rows: &[LogRow]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match LogFormat::from_path(path) {
        LogFormat::Csv => write_csv(f, rows),
        LogFormat::Jsonl => write_jsonl(f, rows),
    }
}

/// Wheel odometry as logged by a car-like vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Odometry {
    pub speed: f64,
    pub steer: f64,
}

/// Everything one robot logged at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogStep {
    pub t: f64,
    pub robot: u64,
    pub inputs: Option<RobotInputs>,
    pub odometry: Option<Odometry>,
    pub observations: Vec<(u64, Observation)>,
    pub truth: Option<DVector<f64>>,
    pub truth_heading: Option<f64>,
}

/// Recorded positions of landmarks, when the log has them.
pub type LandmarkTruth = BTreeMap<u64, DVector<f64>>;

type Fields = BTreeMap<RowKind, (f64, f64)>;

fn get(f: &Fields, k: RowKind) -> Option<(f64, f64)> {
    f.get(&k).copied()
}

fn point(f: &Fields) -> Option<DVector<f64>> {
    let (x, _) = get(f, RowKind::TruthX)?;
    let (y, _) = get(f, RowKind::TruthY)?;
    Some(match get(f, RowKind::TruthZ) {
        Some((z, _)) => DVector::from_vec(vec![x, y, z]),
        None => DVector::from_vec(vec![x, y]),
    })
}

fn observation(f: &Fields, id: u64, t: f64) -> Result<Option<Observation>> {
    let bad = |msg: &str| SlamError::InvalidInput(format!("landmark {id} at t = {t}: {msg}"));
    let bearing = get(f, RowKind::Theta).map(|(th, s)| match get(f, RowKind::Phi) {
        Some((phi, sp)) => BearingObs::spatial(th, phi, s, sp),
        None => BearingObs::planar(th, s),
    });
    let Some(b) = bearing else {
        return match (get(f, RowKind::R), get(f, RowKind::RDot)) {
            (Some((r, sr)), Some((rd, srd))) => Ok(Some(Observation::RangeRate(DopplerObs {
                r,
                r_dot: rd,
                sigma_r: sr,
                sigma_r_dot: srd,
            }))),
            (None, None) => Ok(None),
            _ => Err(bad("range-rate reading needs both r and r_dot")),
        };
    };
    if let Some((r, sr)) = get(f, RowKind::R) {
        return Ok(Some(Observation::BearingRange(b, RangeObs { r, sigma_r: sr })));
    }
    if let Some((td, s)) = get(f, RowKind::ThetaDot) {
        let pd = get(f, RowKind::PhiDot);
        return Ok(Some(Observation::BearingRate(
            b,
            BearingRateObs {
                theta_dot: td,
                phi_dot: pd.map(|p| p.0),
                sigma_theta_dot: s,
                sigma_phi_dot: pd.map_or(0.0, |p| p.1),
            },
        )));
    }
    if let Some((tau, _)) = get(f, RowKind::Tau) {
        return Ok(Some(Observation::TimeToContact(
            b,
            TimeToContactObs {
                tau,
                alpha: get(f, RowKind::Alpha).map(|a| a.0),
                diameter: get(f, RowKind::Diameter).map(|d| d.0),
            },
        )));
    }
    Ok(Some(Observation::Bearing(b)))
}

fn inputs(f: &Fields) -> Result<Option<RobotInputs>> {
    let Some((u1, _)) = get(f, RowKind::U1) else { return Ok(None) };
    let (u2, _) = get(f, RowKind::U2).ok_or_else(|| SlamError::InvalidInput("u1 without u2".into()))?;
    let q = get(f, RowKind::Q).map_or(0.0, |v| v.0);
    let wz = get(f, RowKind::Wz).map_or(0.0, |v| v.0);
    let (u, omega) = match get(f, RowKind::U3) {
        Some((u3, _)) => (
            DVector::from_vec(vec![u1, u2, u3]),
            AngularVelocity::spatial(get(f, RowKind::Wx).map_or(0.0, |v| v.0), get(f, RowKind::Wy).map_or(0.0, |v| v.0), wz),
        ),
        None => (DVector::from_vec(vec![u1, u2]), AngularVelocity::planar(wz)),
    };
    let d = u.len();
    RobotInputs::new(u, omega, DMatrix::identity(d, d) * q).map(Some)
}

/// Groups rows into per-robot steps in file order, and pulls out landmark
/// truth rows.
pub fn group(rows: &[LogRow]) -> Result<(Vec<LogStep>, LandmarkTruth)> {
    let mut steps = Vec::new();
    let mut truth = LandmarkTruth::new();
    let mut i = 0;
    while i < rows.len() {
        let (t, robot) = (rows[i].t, rows[i].robot);
        let mut own = Fields::new();
        let mut per_lm: BTreeMap<u64, Fields> = BTreeMap::new();
        let mut lm_truth: BTreeMap<u64, Fields> = BTreeMap::new();
        while i < rows.len() && rows[i].t == t && rows[i].robot == robot {
            let r = &rows[i];
            let is_truth = matches!(r.kind, RowKind::TruthX | RowKind::TruthY | RowKind::TruthZ | RowKind::TruthHeading);
            let slot = match (r.landmark, is_truth) {
                (None, _) => &mut own,
                (Some(k), true) => lm_truth.entry(k).or_default(),
                (Some(k), false) => per_lm.entry(k).or_default(),
            };
            slot.insert(r.kind, (r.value, r.sigma));
            i += 1;
        }
        for (k, f) in &lm_truth {
            if let Some(p) = point(f) {
                truth.insert(*k, p);
            }
        }
        let mut observations = Vec::new();
        for (k, f) in &per_lm {
            if let Some(o) = observation(f, *k, t)? {
                observations.push((*k, o));
            }
        }
        let odometry = match (get(&own, RowKind::Speed), get(&own, RowKind::Steer)) {
            (Some((speed, _)), Some((steer, _))) => Some(Odometry { speed, steer }),
            (Some((speed, _)), None) => Some(Odometry { speed, steer: 0.0 }),
            _ => None,
        };
        steps.push(LogStep {
            t,
            robot,
            inputs: inputs(&own)?,
            odometry,
            observations,
            truth: point(&own),
            truth_heading: get(&own, RowKind::TruthHeading).map(|v| v.0),
        });
    }
    Ok((steps, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisecal::NoiseSpec;
    use crate::sim::{scenario_circle_2d, scenario_circle_3d, Simulator};
    use crate::vmeas::SensorCase;

    fn sim_rows(sc: &Scenario, case: SensorCase, n: usize) -> (Vec<Frame>, Vec<LogRow>) {
        let frames: Vec<Frame> = Simulator::new(sc.clone(), case).unwrap().take(n).collect();
        let rows = frames_to_rows(sc, &frames);
        (frames, rows)
    }

    fn assert_matches_frames(steps: &[LogStep], frames: &[Frame]) {
        assert_eq!(steps.len(), frames.len());
        for (s, f) in steps.iter().zip(frames) {
            let rf = &f.robots[0];
            assert_eq!(s.t, f.t);
            assert_eq!(s.inputs.as_ref(), Some(&rf.inputs));
            let obs: Vec<(u64, Observation)> = rf.observations.iter().map(|o| (o.landmark, o.observation)).collect();
            assert_eq!(s.observations, obs);
            assert_eq!(s.truth.as_ref(), Some(&rf.pose.position));
        }
    }

    #[test]
    fn csv_round_trip_every_case() {
        for case in SensorCase::ALL {
            let sc = scenario_circle_2d();
            let (frames, rows) = sim_rows(&sc, case, 20);
            let mut buf = Vec::new();
            write_csv(&mut buf, &rows).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            assert_eq!(back, rows);
            let (steps, truth) = group(&back).unwrap();
            assert_matches_frames(&steps, &frames);
            assert_eq!(truth.len(), sc.landmarks.len());
        }
    }

    #[test]
    fn jsonl_round_trip_3d() {
        let sc = scenario_circle_3d();
        for case in [SensorCase::BearingRange, SensorCase::BearingRate, SensorCase::TimeToContact] {
            let (frames, rows) = sim_rows(&sc, case, 10);
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &rows).unwrap();
            let back = read_jsonl(buf.as_slice()).unwrap();
            assert_eq!(back, rows);
            let (steps, _) = group(&back).unwrap();
            assert_matches_frames(&steps, &frames);
        }
    }

    #[test]
    fn out_of_order_reports_line() {
        let text = "t,robot,landmark,kind,value,sigma\n0.0,1,,u1,1.0,0.0\n0.1,1,,u1,1.0,0.0\n0.05,1,,u1,1.0,0.0\n";
        match read_csv(text.as_bytes()) {
            Err(SlamError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "{\"t\":1.0,\"robot\":1,\"landmark\":null,\"kind\":\"u1\",\"value\":1.0,\"sigma\":0.0}\n{\"t\":0.5,\"robot\":1,\"landmark\":null,\"kind\":\"u1\",\"value\":1.0,\"sigma\":0.0}\n";
        match read_jsonl(text.as_bytes()) {
            Err(SlamError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn other_robots_may_interleave() {
        let text = "t,robot,landmark,kind,value,sigma\n0.1,1,,u1,1,0\n0.0,2,,u1,1,0\n0.2,1,,u1,1,0\n";
        assert_eq!(read_csv(text.as_bytes()).unwrap().len(), 3);
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        let text = "t,robot,landmark,kind,value,sigma\n0.0,1,3,bogus,1,0\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(SlamError::Parse { line: 2, .. })));
    }

    #[test]
    fn logs_without_truth_group_cleanly() {
        let mut sc = scenario_circle_2d();
        sc.noise = NoiseSpec::noise_free();
        let (_, rows) = sim_rows(&sc, SensorCase::BearingOnly, 5);
        let rows: Vec<LogRow> = rows
            .into_iter()
            .filter(|r| !matches!(r.kind, RowKind::TruthX | RowKind::TruthY | RowKind::TruthZ | RowKind::TruthHeading))
            .collect();
        let (steps, truth) = group(&rows).unwrap();
        assert!(truth.is_empty());
        assert!(steps.iter().all(|s| s.truth.is_none() && !s.observations.is_empty()));
    }

    #[test]
    fn odometry_rows() {
        let text = "t,robot,landmark,kind,value,sigma\n0.0,1,,speed,2.0,0\n0.0,1,,steer,0.1,0\n0.0,1,4,theta,0.3,0.01\n0.0,1,4,r,5.0,0.1\n";
        let (steps, _) = group(&read_csv(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(steps[0].odometry, Some(Odometry { speed: 2.0, steer: 0.1 }));
        assert!(steps[0].inputs.is_none());
        assert_eq!(steps[0].observations[0].1.case(), SensorCase::BearingRange);
    }
}
