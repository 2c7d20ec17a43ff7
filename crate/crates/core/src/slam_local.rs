//! Decoupled SLAM in the robot-fixed frame: one small filter per landmark.
//!
//! Landmark positions are tracked relative to the robot, so each landmark's
//! filter is driven only by the robot's own twist and its own readings.
//! Filters never share covariance, which keeps the cost per step linear in
//! the number of landmarks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlamError};
use crate::filter::{self, FilterConfig};
use crate::noisecal::NoisePorter;
use crate::state::{FilterState, RobotInputs};
use crate::vmeas::{bearing_vectors, Observation, SensorCase};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLandmarkFilter {
    pub id: u64,
    pub state: FilterState,
    pub case: SensorCase,
    pub last_seen: Option<f64>,
}

/// Starts a filter from the first reading: along the bearing at the measured
/// range (bearing and range) or the prior radius, or at the origin when the
/// reading has no direction.
pub fn init_landmark(id: u64, obs: &Observation, t: f64, r0: f64, p0: f64, dim: usize) -> Result<LocalLandmarkFilter> {
    if !(p0 > 0.0) {
        return Err(SlamError::InvalidInput(format!("prior variance {p0} must be positive")));
    }
    let x = match obs.bearing() {
        Some(b) => {
            if b.dim() != dim {
                return Err(SlamError::Dimension(format!("{}D reading in a {dim}D map", b.dim())));
            }
            let r = obs.range().unwrap_or(r0);
            let (_, hs) = bearing_vectors(b);
            DVector::from_column_slice(hs.as_slice()) * r
        }
        None => DVector::zeros(dim),
    };
    Ok(LocalLandmarkFilter {
        id,
        state: FilterState::new(x, DMatrix::identity(dim, dim) * p0, t)?,
        case: obs.case(),
        last_seen: Some(t),
    })
}

/// One step of a landmark filter, with or without a reading.
pub fn update_landmark(
    f: &mut LocalLandmarkFilter,
    inputs: &RobotInputs,
    obs: Option<&Observation>,
    porter: &mut NoisePorter,
    cfg: &FilterConfig,
) -> Result<()> {
    let vm = match obs {
        Some(o) => {
            if o.case() != f.case {
                return Err(SlamError::InvalidInput(format!(
                    "landmark {} runs case {} but got a case {} reading",
                    f.id,
                    f.case.number(),
                    o.case().number()
                )));
            }
            porter.measurement(o, inputs)?
        }
        None => None,
    };
    f.state = filter::step(&f.state, inputs, vm.as_ref(), cfg)?;
    if obs.is_some() {
        f.last_seen = Some(f.state.t);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub filter: FilterConfig,
    /// Initial range along the first bearing (m).
    pub prior_radius: f64,
    /// Initial variance per axis (m^2).
    pub prior_variance: f64,
}

impl LocalConfig {
    /// Prior radius at half the sensor's maximum range.
    pub fn for_max_range(r_max: f64) -> Self {
        Self {
            filter: FilterConfig::default(),
            prior_radius: r_max / 2.0,
            prior_variance: 100.0,
        }
    }
}

/// A map of independent landmark filters sharing one robot.
#[derive(Debug, Clone)]
pub struct LocalSlam {
    pub dim: usize,
    pub cfg: LocalConfig,
    pub porter: NoisePorter,
    pub filters: BTreeMap<u64, LocalLandmarkFilter>,
    pub t: f64,
}

impl LocalSlam {
    pub fn new(dim: usize, cfg: LocalConfig, porter: NoisePorter) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(SlamError::InvalidInput(format!("dimension {dim} must be 2 or 3")));
        }
        cfg.filter.validate()?;
        Ok(Self {
            dim,
            cfg,
            porter,
            filters: BTreeMap::new(),
            t: 0.0,
        })
    }

    /// Advances every landmark by one step. Readings of unknown landmarks
    /// start new filters at the current time, which then take this step too.
    pub fn step(&mut self, inputs: &RobotInputs, observations: &[(u64, Observation)]) -> Result<()> {
        if inputs.dim() != self.dim {
            return Err(SlamError::Dimension(format!("{}D inputs for a {}D map", inputs.dim(), self.dim)));
        }
        let mut by_id: BTreeMap<u64, &Observation> = BTreeMap::new();
        for (id, obs) in observations {
            if by_id.insert(*id, obs).is_some() {
                return Err(SlamError::InvalidInput(format!("two readings of landmark {id} in one step")));
            }
        }
        for (&id, obs) in &by_id {
            if !self.filters.contains_key(&id) {
                let f = init_landmark(id, obs, self.t, self.cfg.prior_radius, self.cfg.prior_variance, self.dim)?;
                self.filters.insert(id, f);
            }
        }
        for (id, f) in self.filters.iter_mut() {
            update_landmark(f, inputs, by_id.get(id).copied(), &mut self.porter, &self.cfg.filter)?;
        }
        self.t += self.cfg.filter.dt;
        Ok(())
    }

    pub fn estimate(&self, id: u64) -> Option<&DVector<f64>> {
        self.filters.get(&id).map(|f| &f.state.x)
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}
