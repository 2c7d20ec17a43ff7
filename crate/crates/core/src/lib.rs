//! Linearization-free SLAM built on linear time-varying Kalman filters.
//!
//! Nonlinear bearing, range, optical-flow, time-to-contact and Doppler
//! readings become linear constraints on the landmark position expressed in
//! a robot-fixed frame. The crate provides the filter engine, decoupled
//! per-landmark SLAM, a global-frame filter with heading estimation, the
//! SLAM-DUNK filter network, cooperative multi-robot SLAM, noise porting
//! and a scenario simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod align;
pub mod coop;
pub mod dunk;
pub mod error;
pub mod filter;
pub mod geom;
pub mod heading;
pub mod logio;
pub mod noisecal;
pub mod runner;
pub mod sim;
pub mod slam_global;
pub mod slam_local;
pub mod state;
pub mod vmeas;

pub use error::{Result, SlamError};
