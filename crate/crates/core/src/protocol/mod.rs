//! Link management and reporting protocol between vehicles and roadside
//! nodes.
//!
//! A vehicle unit is admitted pessimistically: it keeps requesting an
//! exclusive link each report period and only treats itself as linked once
//! an accept arrives. Handover between adjacent nodes is optimistic: close
//! to the outbound boundary the vehicle pre-admits itself with the next
//! node while still reporting to the current one, and on crossing it
//! releases the old link and immediately reports to the new owner. Loss on
//! any of those messages is healed by the node-side rules in [`rsmu`].
//!
//! Periodic actions fire on true-time boundaries (`now % period == 0`,
//! skipping t = 0), so configs must keep the periods on the tick grid.

pub mod message;
pub mod rsmu;
pub mod viu;

pub use message::{Address, LinkRequestMode, Message, MessageBody, Outgoing};
pub use rsmu::{LinkPhase, RsmuState, VehicleRecord};
pub use viu::{LinkMode, ViuState};

use crate::topology::RoadPosition;
use crate::types::{Direction, JunctionId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("protocol parameter {name} must be positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("full snapshot cadence must be at least 1")]
    ZeroSnapshotCadence,
}

/// Self-measured kinematic state a vehicle reports upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleStatus {
    pub position: RoadPosition,
    pub speed_mps: f64,
    pub heading: Direction,
    pub acceleration_mps2: f64,
    pub braking: bool,
    pub steering_angle_deg: f64,
    /// Stamp from the vehicle's own clock at measurement time.
    pub device_ts_ms: f64,
}

/// Planned maneuver a vehicle announces alongside its status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    KeepLane,
    ExitAt(JunctionId),
    Merge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingIntent {
    pub intended_speed_mps: f64,
    pub maneuver: Maneuver,
    pub horizon_s: f64,
}

impl DrivingIntent {
    pub fn keep_lane(speed_mps: f64) -> Self {
        DrivingIntent {
            intended_speed_mps: speed_mps,
            maneuver: Maneuver::KeepLane,
            horizon_s: 10.0,
        }
    }
}

/// Timing and distance knobs of the link protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolParams {
    /// Vehicle status report period.
    pub report_period_ms: f64,
    /// Node view broadcast period.
    pub broadcast_period_ms: f64,
    /// Node-to-node view sync period.
    pub neighbor_sync_period_ms: f64,
    /// Remaining distance to the outbound boundary at which a vehicle opens
    /// the second link.
    pub dual_link_distance_m: f64,
    /// Every n-th neighbor sync ships the full view instead of a delta.
    pub full_snapshot_every: u32,
    /// A managed record not refreshed for this long is dropped (lost link).
    pub record_expiry_ms: f64,
    /// Pre-admitted records live longer: the vehicle is still approaching.
    pub preadmit_expiry_ms: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            report_period_ms: 100.0,
            broadcast_period_ms: 100.0,
            neighbor_sync_period_ms: 200.0,
            dual_link_distance_m: 200.0,
            full_snapshot_every: 10,
            record_expiry_ms: 2_000.0,
            preadmit_expiry_ms: 15_000.0,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let positives = [
            ("report_period_ms", self.report_period_ms),
            ("broadcast_period_ms", self.broadcast_period_ms),
            ("neighbor_sync_period_ms", self.neighbor_sync_period_ms),
            ("dual_link_distance_m", self.dual_link_distance_m),
            ("record_expiry_ms", self.record_expiry_ms),
            ("preadmit_expiry_ms", self.preadmit_expiry_ms),
        ];
        for (name, value) in positives {
            if !(value > 0.0) {
                return Err(ProtocolError::NonPositiveParam { name, value });
            }
        }
        if self.full_snapshot_every == 0 {
            return Err(ProtocolError::ZeroSnapshotCadence);
        }
        Ok(())
    }
}

/// True when a periodic action with `period_ms` fires at `now_us`. The
/// t = 0 boundary is skipped so initialization does not double as the first
/// period.
pub fn period_due(now_us: crate::types::Micros, period_ms: f64) -> bool {
    let period_us = crate::types::ms_to_micros(period_ms);
    period_us > 0 && now_us > 0 && now_us.is_multiple_of(period_us)
}
