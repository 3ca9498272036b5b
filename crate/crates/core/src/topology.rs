//! Road geometry: a straight dual-carriageway mainline with optional exit and
//! entrance ramps, plus the planar embedding used for radio distances.
//!
//! Conventions (all distances in meters):
//!
//! * The mainline runs along the x axis from station 0 to `mainline_length_m`.
//! * The forward carriageway centerline sits at `y = -separation/2`, the
//!   reverse centerline at `y = +separation/2`. Two points on opposite
//!   carriageways at the same station are therefore exactly `separation`
//!   apart.
//! * Ramps are straight segments leaving the mainline at the junction
//!   station, diverging outward (away from the median) at a fixed 30 degree
//!   angle. Exit ramps extend downstream of the exit point; entrance ramps
//!   approach the merge point from upstream.
//! * Radio distance is planar Euclidean distance; antenna height is tracked
//!   on deployment specs but excluded from link geometry.

use crate::types::{Direction, JunctionId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// cos/sin of the fixed ramp divergence angle (30 degrees).
const RAMP_COS: f64 = 0.866_025_403_784_438_6;
const RAMP_SIN: f64 = 0.5;

pub const DEFAULT_CARRIAGEWAY_SEPARATION_M: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("mainline length must be positive, got {0}")]
    NonPositiveMainline(f64),
    #[error("carriageway separation must be positive, got {0}")]
    NonPositiveSeparation(f64),
    #[error("junction {id} station {station_m} outside mainline [0, {mainline_m}]")]
    JunctionOutOfRange {
        id: JunctionId,
        station_m: f64,
        mainline_m: f64,
    },
    #[error("junction {0} ramp length must be positive, got {1}")]
    NonPositiveRampLength(JunctionId, f64),
    #[error("duplicate junction id {0}")]
    DuplicateJunctionId(JunctionId),
    #[error("junctions {0} and {1} share kind and station {2}")]
    DuplicateJunctionStation(JunctionId, JunctionId, f64),
    #[error("unknown junction {0}")]
    UnknownJunction(JunctionId),
    #[error("position references junction {junction} on carriageway {expected}, not {actual}")]
    CarriagewayMismatch {
        junction: JunctionId,
        expected: Direction,
        actual: Direction,
    },
}

/// Point in the planar embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Planar radio distance between two embedded points.
pub fn radio_distance(a: Point, b: Point) -> f64 {
    a.distance(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    Exit,
    Entrance,
}

/// A ramp joining the mainline on one carriageway. For exits the station is
/// the departure point; for entrances it is the merge point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampJunction {
    pub id: JunctionId,
    pub kind: RampKind,
    pub station_m: f64,
    pub ramp_length_m: f64,
    #[serde(default)]
    pub carriageway: Direction,
}

/// Scenario geometry description consumed by [`RoadNetwork::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub mainline_length_m: f64,
    #[serde(default = "default_separation")]
    pub carriageway_separation_m: f64,
    #[serde(default)]
    pub junctions: Vec<RampJunction>,
}

fn default_separation() -> f64 {
    DEFAULT_CARRIAGEWAY_SEPARATION_M
}

/// Validated road network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    mainline_length_m: f64,
    carriageway_separation_m: f64,
    /// Sorted by station, then id.
    junctions: Vec<RampJunction>,
}

impl RoadNetwork {
    pub fn build(config: &GeometryConfig) -> Result<Self, TopologyError> {
        if !(config.mainline_length_m > 0.0) {
            return Err(TopologyError::NonPositiveMainline(config.mainline_length_m));
        }
        if !(config.carriageway_separation_m > 0.0) {
            return Err(TopologyError::NonPositiveSeparation(
                config.carriageway_separation_m,
            ));
        }
        let mut junctions = config.junctions.clone();
        for j in &junctions {
            if !(0.0..=config.mainline_length_m).contains(&j.station_m) {
                return Err(TopologyError::JunctionOutOfRange {
                    id: j.id,
                    station_m: j.station_m,
                    mainline_m: config.mainline_length_m,
                });
            }
            if !(j.ramp_length_m > 0.0) {
                return Err(TopologyError::NonPositiveRampLength(j.id, j.ramp_length_m));
            }
        }
        for (i, a) in junctions.iter().enumerate() {
            for b in &junctions[i + 1..] {
                if a.id == b.id {
                    return Err(TopologyError::DuplicateJunctionId(a.id));
                }
                if a.kind == b.kind && a.carriageway == b.carriageway && a.station_m == b.station_m
                {
                    return Err(TopologyError::DuplicateJunctionStation(
                        a.id, b.id, a.station_m,
                    ));
                }
            }
        }
        junctions.sort_by(|a, b| {
            a.station_m
                .partial_cmp(&b.station_m)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        Ok(RoadNetwork {
            mainline_length_m: config.mainline_length_m,
            carriageway_separation_m: config.carriageway_separation_m,
            junctions,
        })
    }

    pub fn mainline_length_m(&self) -> f64 {
        self.mainline_length_m
    }

    pub fn carriageway_separation_m(&self) -> f64 {
        self.carriageway_separation_m
    }

    pub fn junctions(&self) -> &[RampJunction] {
        &self.junctions
    }

    pub fn junction(&self, id: JunctionId) -> Result<&RampJunction, TopologyError> {
        self.junctions
            .iter()
            .find(|j| j.id == id)
            .ok_or(TopologyError::UnknownJunction(id))
    }

    /// y coordinate of a carriageway centerline.
    pub fn carriageway_y(&self, dir: Direction) -> f64 {
        let half = self.carriageway_separation_m / 2.0;
        match dir {
            Direction::Forward => -half,
            Direction::Reverse => half,
        }
    }

    /// Outward lateral unit sign for a carriageway (away from the median).
    fn outward_sign(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Forward => -1.0,
            Direction::Reverse => 1.0,
        }
    }

    /// Embed a mainline station on a carriageway centerline.
    pub fn embed_station(&self, dir: Direction, station_m: f64) -> Point {
        Point {
            x: station_m,
            y: self.carriageway_y(dir),
        }
    }

    /// Embed a road position into the plane.
    pub fn embed(&self, pos: &RoadPosition) -> Point {
        let base_y = self.carriageway_y(pos.carriageway);
        match &pos.on_ramp {
            None => Point {
                x: pos.station_m,
                y: base_y + pos.lateral_m,
            },
            Some(r) => {
                let j = self
                    .junction(r.junction)
                    .expect("ramp position references a known junction");
                let along = pos.carriageway.sign();
                let out = self.outward_sign(pos.carriageway);
                // Distance from the point where the ramp touches the mainline.
                let from_mainline = match j.kind {
                    RampKind::Exit => r.progress_m,
                    RampKind::Entrance => j.ramp_length_m - r.progress_m,
                };
                let x = match j.kind {
                    RampKind::Exit => j.station_m + along * RAMP_COS * from_mainline,
                    RampKind::Entrance => j.station_m - along * RAMP_COS * from_mainline,
                };
                Point {
                    x,
                    y: base_y + out * RAMP_SIN * from_mainline + pos.lateral_m,
                }
            }
        }
    }

    /// Radio distance between two road positions.
    pub fn distance(&self, a: &RoadPosition, b: &RoadPosition) -> f64 {
        radio_distance(self.embed(a), self.embed(b))
    }
}

/// Progress along a ramp. For exit ramps progress 0 is the departure point;
/// for entrance ramps progress 0 is the upstream end and `ramp_length_m` is
/// the merge point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampRef {
    pub junction: JunctionId,
    pub progress_m: f64,
}

/// Position on the network: carriageway, station along the mainline axis,
/// signed lateral offset from the centerline, and optional ramp engagement.
/// While on a ramp the station stays pinned to the junction station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadPosition {
    pub carriageway: Direction,
    pub station_m: f64,
    #[serde(default)]
    pub lateral_m: f64,
    #[serde(default)]
    pub on_ramp: Option<RampRef>,
}

impl RoadPosition {
    pub fn mainline(carriageway: Direction, station_m: f64) -> Self {
        RoadPosition {
            carriageway,
            station_m,
            lateral_m: 0.0,
            on_ramp: None,
        }
    }

    pub fn on_ramp(carriageway: Direction, junction: JunctionId, station_m: f64, progress_m: f64) -> Self {
        RoadPosition {
            carriageway,
            station_m,
            lateral_m: 0.0,
            on_ramp: Some(RampRef {
                junction,
                progress_m,
            }),
        }
    }

    /// Station used for jurisdiction assignment. Ramp traffic is managed by
    /// the node responsible for the junction area.
    pub fn effective_station(&self) -> f64 {
        self.station_m
    }
}

/// Route plan a vehicle follows across the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutePlan {
    /// Enter on the mainline and drive to its end.
    #[default]
    Mainline,
    /// Leave the mainline via the given exit ramp.
    ExitAt(JunctionId),
    /// Start on the given entrance ramp, merge, then continue to the end.
    EnterAt(JunctionId),
}

/// Result of advancing a position along its route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvanceOutcome {
    pub position: RoadPosition,
    /// Set when the move was clamped at the end of the route path.
    pub arrived: bool,
}

/// Advance `pos` by `ds >= 0` meters of travel along `route`, clamping at the
/// path end. Transitions on and off ramps consume travel distance across the
/// boundary, so advancing is additive away from clamp points.
pub fn advance(
    pos: &RoadPosition,
    ds: f64,
    network: &RoadNetwork,
    route: RoutePlan,
) -> Result<AdvanceOutcome, TopologyError> {
    assert!(ds >= 0.0, "advance distance must be non-negative");
    let dir = pos.carriageway;
    let sign = dir.sign();
    let length = network.mainline_length_m();

    // Ramp segment first, if engaged.
    if let Some(r) = &pos.on_ramp {
        let j = network.junction(r.junction)?;
        if j.carriageway != dir {
            return Err(TopologyError::CarriagewayMismatch {
                junction: j.id,
                expected: j.carriageway,
                actual: dir,
            });
        }
        let new_progress = r.progress_m + ds;
        match j.kind {
            RampKind::Exit => {
                // Exit ramps terminate the route at their far end.
                let clamped = new_progress.min(j.ramp_length_m);
                return Ok(AdvanceOutcome {
                    position: RoadPosition::on_ramp(dir, j.id, j.station_m, clamped),
                    arrived: new_progress >= j.ramp_length_m,
                });
            }
            RampKind::Entrance => {
                if new_progress < j.ramp_length_m {
                    return Ok(AdvanceOutcome {
                        position: RoadPosition::on_ramp(dir, j.id, j.station_m, new_progress),
                        arrived: false,
                    });
                }
                // Merge onto the mainline and keep going with the remainder.
                let spill = new_progress - j.ramp_length_m;
                let merged = RoadPosition::mainline(dir, j.station_m);
                return advance(&merged, spill, network, route);
            }
        }
    }

    // Mainline segment. An exit route may divert onto its ramp.
    if let RoutePlan::ExitAt(jid) = route {
        let j = network.junction(jid)?;
        if j.carriageway == dir && j.kind == RampKind::Exit {
            let to_exit = (j.station_m - pos.station_m) * sign;
            if to_exit >= 0.0 && ds >= to_exit {
                let onto_ramp = RoadPosition::on_ramp(dir, j.id, j.station_m, 0.0);
                return advance(&onto_ramp, ds - to_exit, network, route);
            }
        }
    }

    let end_station = if sign > 0.0 { length } else { 0.0 };
    let raw = pos.station_m + sign * ds;
    let clamped = raw.clamp(0.0, length);
    let arrived = (end_station - raw) * sign <= 0.0;
    Ok(AdvanceOutcome {
        position: RoadPosition {
            carriageway: dir,
            station_m: clamped,
            lateral_m: pos.lateral_m,
            on_ramp: None,
        },
        arrived,
    })
}
