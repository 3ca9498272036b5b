//! Spatio-temporal shared road state: per-node merged views, abnormal
//! events, and the cloud directory of deployed nodes.
//!
//! Merging is last-writer-wins on the reporting device's timestamp. Ties go
//! to the smaller source node id, which makes merge order-insensitive: for a
//! fixed key the winning snapshot is the maximum under `(timestamp,
//! -source)`. Events union by id, preferring the copy that carries more
//! lifecycle information (cleared beats detected beats pending). A view's
//! timestamp is the maximum content timestamp it holds, so two reconstructions
//! of the same content agree on it exactly.

use crate::deployment::{Jurisdiction, RsmuSpec};
use crate::protocol::{DrivingIntent, VehicleStatus};
use crate::topology::{Point, RoadPosition};
use crate::types::{EventId, Micros, RsmuId, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("route names unknown node {0}")]
    UnknownNode(RsmuId),
    #[error("node {incoming} jurisdiction overlaps node {existing} on the same carriageway")]
    OverlappingJurisdiction { incoming: RsmuId, existing: RsmuId },
}

/// Latest accepted record for one vehicle, tagged with the node that
/// observed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub vehicle: VehicleId,
    pub status: VehicleStatus,
    pub intent: DrivingIntent,
    pub source: RsmuId,
    pub device_ts_ms: f64,
}

impl VehicleSnapshot {
    /// True when `self` wins over `incumbent` under latest-wins with the
    /// smaller-source tie-break.
    pub fn wins_over(&self, incumbent: &VehicleSnapshot) -> bool {
        self.device_ts_ms > incumbent.device_ts_ms
            || (self.device_ts_ms == incumbent.device_ts_ms && self.source < incumbent.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Accident,
    Rockfall,
    BridgeFracture,
    Obstacle,
}

/// An abnormal road condition. Onset is ground truth (true time); detection
/// and clearance carry the detecting node's device timestamps once known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalEvent {
    pub id: EventId,
    pub kind: EventKind,
    pub location: RoadPosition,
    pub onset_us: Micros,
    pub detected_ms: Option<f64>,
    pub cleared_ms: Option<f64>,
}

impl AbnormalEvent {
    pub fn is_active(&self) -> bool {
        self.cleared_ms.is_none()
    }

    /// Merge two copies of the same event, keeping the most informed
    /// lifecycle state. Earlier detection and clearance stamps win so the
    /// result is independent of merge order.
    pub fn merged_with(&self, other: &AbnormalEvent) -> AbnormalEvent {
        debug_assert_eq!(self.id, other.id);
        let pick = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        };
        AbnormalEvent {
            detected_ms: pick(self.detected_ms, other.detected_ms),
            cleared_ms: pick(self.cleared_ms, other.cleared_ms),
            ..self.clone()
        }
    }
}

/// Scenario ground truth for one abnormal condition: where it appears,
/// when (true time), and optionally when it clears. Nodes never see this
/// directly; they detect it when it lies inside their stretch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub id: EventId,
    pub kind: EventKind,
    pub position: RoadPosition,
    pub onset_us: Micros,
    pub clear_us: Option<Micros>,
}

impl GroundTruthEvent {
    /// Active at `now`: onset reached and not yet cleared.
    pub fn active_at(&self, now: Micros) -> bool {
        self.onset_us <= now && self.clear_us.map(|c| c > now).unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfraStatus {
    Ok,
    Affected(EventId),
}

/// Static infrastructure element; status flips when an abnormal event near
/// it is detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfraRecord {
    pub id: u32,
    pub name: String,
    pub carriageway: crate::types::Direction,
    pub station_m: f64,
    pub status: InfraStatus,
    pub device_ts_ms: f64,
}

/// Delta shipped between adjacent nodes. `handovers` carry records whose
/// management is being transferred to the receiver; `full` marks a complete
/// snapshot used every tenth sync round to bound divergence after loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ViewDelta {
    pub snapshots: Vec<VehicleSnapshot>,
    pub events: Vec<AbnormalEvent>,
    pub infra: Vec<InfraRecord>,
    pub handovers: Vec<VehicleSnapshot>,
    pub full: bool,
}

impl ViewDelta {
    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
            && self.events.is_empty()
            && self.infra.is_empty()
            && self.handovers.is_empty()
    }
}

/// One node's merged picture of the road: own observations plus whatever
/// neighbors have shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalView {
    pub owner: RsmuId,
    pub vehicles: BTreeMap<VehicleId, VehicleSnapshot>,
    pub infra: BTreeMap<u32, InfraRecord>,
    pub events: BTreeMap<EventId, AbnormalEvent>,
    /// Maximum content timestamp; 0 while empty.
    pub view_ts_ms: f64,
}

impl GlobalView {
    pub fn new(owner: RsmuId) -> Self {
        GlobalView {
            owner,
            vehicles: BTreeMap::new(),
            infra: BTreeMap::new(),
            events: BTreeMap::new(),
            view_ts_ms: 0.0,
        }
    }

    fn bump_ts(&mut self, ts: f64) {
        if ts > self.view_ts_ms {
            self.view_ts_ms = ts;
        }
    }

    /// Insert a snapshot if it wins over the incumbent. Returns true when the
    /// view changed.
    pub fn upsert_vehicle(&mut self, snapshot: VehicleSnapshot) -> bool {
        let accept = match self.vehicles.get(&snapshot.vehicle) {
            Some(existing) => snapshot.wins_over(existing),
            None => true,
        };
        if accept {
            self.bump_ts(snapshot.device_ts_ms);
            self.vehicles.insert(snapshot.vehicle, snapshot);
        }
        accept
    }

    pub fn upsert_event(&mut self, event: AbnormalEvent) -> bool {
        let merged = match self.events.get(&event.id) {
            Some(existing) => existing.merged_with(&event),
            None => event.clone(),
        };
        let changed = self.events.get(&event.id) != Some(&merged);
        if changed {
            if let Some(ts) = merged.detected_ms {
                self.bump_ts(ts);
            }
            self.events.insert(merged.id, merged);
        }
        changed
    }

    pub fn upsert_infra(&mut self, record: InfraRecord) -> bool {
        let accept = match self.infra.get(&record.id) {
            Some(existing) => record.device_ts_ms > existing.device_ts_ms,
            None => true,
        };
        if accept {
            self.bump_ts(record.device_ts_ms);
            self.infra.insert(record.id, record);
        }
        accept
    }

    /// Merge an incoming delta. Handover records merge like ordinary
    /// snapshots here; their transfer-of-management meaning applies to the
    /// receiving node's vehicle table, not to the view.
    pub fn merge(&mut self, delta: &ViewDelta) {
        for snap in delta.snapshots.iter().chain(delta.handovers.iter()) {
            self.upsert_vehicle(snap.clone());
        }
        for event in &delta.events {
            self.upsert_event(event.clone());
        }
        for record in &delta.infra {
            self.upsert_infra(record.clone());
        }
    }

    /// Snapshot the entire view as a full delta.
    pub fn as_full_delta(&self) -> ViewDelta {
        ViewDelta {
            snapshots: self.vehicles.values().cloned().collect(),
            events: self.events.values().cloned().collect(),
            infra: self.infra.values().cloned().collect(),
            handovers: Vec::new(),
            full: true,
        }
    }
}

/// Ages of view content relative to a device-time `now`, clamped at zero
/// (a snapshot stamped by a slightly faster clock can appear newer than now).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessReport {
    pub ages_ms: BTreeMap<VehicleId, f64>,
    pub max_age_ms: f64,
}

pub fn staleness(view: &GlobalView, now_device_ms: f64) -> StalenessReport {
    let mut ages = BTreeMap::new();
    let mut max_age = 0.0f64;
    for (id, snap) in &view.vehicles {
        let age = (now_device_ms - snap.device_ts_ms).max(0.0);
        max_age = max_age.max(age);
        ages.insert(*id, age);
    }
    StalenessReport {
        ages_ms: ages,
        max_age_ms: max_age,
    }
}

/// A snapshot inside the queried region with its constant-velocity
/// extrapolation over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub snapshot: VehicleSnapshot,
    pub predicted_station_m: f64,
}

/// Vehicles currently inside `[region.0, region.1]` by station, each with a
/// predicted station after `horizon_s` from snapshot speed and heading.
pub fn query(view: &GlobalView, region: (f64, f64), horizon_s: f64) -> Vec<QueryHit> {
    let (lo, hi) = region;
    view.vehicles
        .values()
        .filter(|s| {
            let st = s.status.position.effective_station();
            st >= lo && st <= hi
        })
        .map(|s| {
            let sign = s.status.heading.sign();
            QueryHit {
                snapshot: s.clone(),
                predicted_station_m: s.status.position.effective_station()
                    + sign * s.status.speed_mps * horizon_s,
            }
        })
        .collect()
}

/// A node's published directory entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: RsmuId,
    pub jurisdiction: Jurisdiction,
    pub position: Point,
    pub comm_range_m: f64,
    pub effective_range_m: f64,
    pub neighbors: Vec<RsmuId>,
}

impl RegistryEntry {
    pub fn from_spec(spec: &RsmuSpec) -> Self {
        RegistryEntry {
            id: spec.id,
            jurisdiction: spec.jurisdiction,
            position: spec.position,
            comm_range_m: spec.comm_range_m,
            effective_range_m: spec.effective_range_m,
            neighbors: spec.neighbors.clone(),
        }
    }
}

/// Directory slice a vehicle pre-downloads before a trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Directory {
    pub entries: BTreeMap<RsmuId, RegistryEntry>,
    pub version: u64,
}

impl Directory {
    /// Entry whose jurisdiction contains a station on a carriageway.
    pub fn owner_of(&self, dir: crate::types::Direction, station_m: f64) -> Option<&RegistryEntry> {
        self.entries
            .values()
            .find(|e| e.jurisdiction.carriageway == dir && e.jurisdiction.contains(station_m))
    }
}

/// Cloud-side registry of all deployed nodes, versioned per publish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CloudRegistry {
    pub entries: BTreeMap<RsmuId, RegistryEntry>,
    pub version: u64,
}

impl CloudRegistry {
    /// Insert or replace a node's entry, bumping the registry version.
    /// Rejects a jurisdiction that overlaps a different node on the same
    /// carriageway.
    pub fn publish(&mut self, spec: &RsmuSpec) -> Result<u64, RegistryError> {
        for existing in self.entries.values() {
            if existing.id == spec.id
                || existing.jurisdiction.carriageway != spec.jurisdiction.carriageway
            {
                continue;
            }
            let a = &spec.jurisdiction;
            let b = &existing.jurisdiction;
            if a.start_m < b.end_m && b.start_m < a.end_m {
                return Err(RegistryError::OverlappingJurisdiction {
                    incoming: spec.id,
                    existing: existing.id,
                });
            }
        }
        self.entries.insert(spec.id, RegistryEntry::from_spec(spec));
        self.version += 1;
        Ok(self.version)
    }

    /// Directory for a planned route: the named nodes plus their immediate
    /// neighbors.
    pub fn prefetch(&self, route: &[RsmuId]) -> Result<Directory, RegistryError> {
        let mut entries = BTreeMap::new();
        for id in route {
            let entry = self
                .entries
                .get(id)
                .ok_or(RegistryError::UnknownNode(*id))?;
            entries.insert(*id, entry.clone());
            for n in &entry.neighbors {
                if let Some(neighbor) = self.entries.get(n) {
                    entries.insert(*n, neighbor.clone());
                }
            }
        }
        Ok(Directory {
            entries,
            version: self.version,
        })
    }
}
