//! Deterministic discrete-event simulation of a highway information
//! sharing system: roadside management nodes with bounded stretches of
//! road, vehicle onboard units with seamless link handover, lossy
//! distance-dependent radio channels, imperfect device clocks, and merged
//! spatio-temporal views distributed along the deployment.

// Validation guards are written as `!(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod deployment;
pub mod globalview;
pub mod protocol;
pub mod sim;
pub mod timesync;
pub mod topology;
pub mod types;

pub use sim::config::ScenarioConfig;
pub use sim::metrics::MetricsReport;
pub use sim::{run, RunOptions, RunOutput};
