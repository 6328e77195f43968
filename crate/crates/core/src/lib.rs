//! Sensor-independent stimulus maps.
//!
//! A stimulus moving through a d-dimensional state space is observed by a
//! machine through an unknown sensor suite. The machine reduces its raw
//! measurements to a chart ([`embedding`]), estimates the local velocity
//! covariance of the observed trajectory and inverts it into a metric
//! ([`statistics`]), and then uses the induced affine connection to express
//! stimulus locations as parallel-transport counts relative to three anchor
//! stimuli ([`geometry`]). Two machines with very different sensors produce
//! the same counts because the metric is a property of the trajectory
//! statistics, not of the chart.
//!
//! [`world`] and [`sensors`] simulate the observed system and the observers;
//! [`harness`] wires the full two-observer experiment together and owns all
//! file I/O.

pub mod embedding;
pub mod exec;
pub mod geometry;
pub mod harness;
pub(crate) mod linalg;
pub mod sensors;
pub mod statistics;
pub mod world;

pub use exec::Strategy;
