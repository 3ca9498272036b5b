//! Roadside node state machine: vehicle management table, merged view,
//! event detection, and the healing rules that keep management unique when
//! handover messages are lost.
//!
//! Table invariant: at any settled instant, each linked vehicle has an
//! owned record at exactly one node. Three rules maintain it without
//! relying on any single message arriving:
//!
//! 1. On a release naming a successor, the old node removes its record and
//!    pushes the last snapshot to the successor over the (reliable)
//!    node-to-node link, which installs an owned record there.
//! 2. On promoting a record to owned (first report from a pre-admitted or
//!    unknown vehicle), the new node immediately pushes the fresh snapshot
//!    to the node the vehicle came from.
//! 3. On merging a neighbor snapshot that is newer than the local record
//!    and places the vehicle outside this node's stretch, the local owned
//!    record is dropped: someone else demonstrably manages it now.
//!
//! Records also expire when unrefreshed (a vehicle that left the road with
//! its final release lost), which only ever removes state.

use crate::globalview::{
    AbnormalEvent, Directory, GlobalView, GroundTruthEvent, InfraRecord, InfraStatus,
    VehicleSnapshot, ViewDelta,
};
use crate::deployment::RsmuSpec;
use crate::protocol::message::{LinkRequestMode, MessageBody, Outgoing};
use crate::protocol::{DrivingIntent, ProtocolParams, VehicleStatus};
use crate::timesync::ClockState;
use crate::types::{Direction, Endpoint, EventId, Micros, RsmuId, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Detected events within this distance of an infrastructure element mark
/// it affected.
pub const INFRA_AFFECT_RADIUS_M: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkPhase {
    /// This node manages the vehicle: it receives its reports and serves
    /// its view.
    Owned,
    /// Admitted ahead of a handover; not yet reporting here.
    PreAdmitted,
}

/// One row of the vehicle management table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub status: VehicleStatus,
    pub intent: DrivingIntent,
    /// Vehicle's own stamp on the accepted update; strictly increases.
    pub device_ts_ms: f64,
    /// True time the record was last written (drives expiry).
    pub updated_us: Micros,
    pub phase: LinkPhase,
    pub handover_from: Option<RsmuId>,
}

/// Roadside management unit state.
#[derive(Debug, Clone)]
pub struct RsmuState {
    pub spec: RsmuSpec,
    pub clock: ClockState,
    pub directory: Directory,
    pub vehicles: BTreeMap<VehicleId, VehicleRecord>,
    pub view: GlobalView,
    dirty_vehicles: BTreeSet<VehicleId>,
    dirty_events: BTreeSet<EventId>,
    dirty_infra: BTreeSet<u32>,
    sync_counter: u64,
    /// Vehicles admitted from a report alone (the normal admission or
    /// handover message never arrived).
    pub self_healing_admits: u64,
    detected: BTreeSet<EventId>,
    cleared: BTreeSet<EventId>,
    /// Fresh detections and clearances staged for this tick's notices.
    pending_notices: Vec<AbnormalEvent>,
}

impl RsmuState {
    pub fn new(spec: RsmuSpec, clock: ClockState) -> Self {
        let view = GlobalView::new(spec.id);
        RsmuState {
            spec,
            clock,
            directory: Directory::default(),
            vehicles: BTreeMap::new(),
            view,
            dirty_vehicles: BTreeSet::new(),
            dirty_events: BTreeSet::new(),
            dirty_infra: BTreeSet::new(),
            sync_counter: 0,
            self_healing_admits: 0,
            detected: BTreeSet::new(),
            cleared: BTreeSet::new(),
            pending_notices: Vec::new(),
        }
    }

    pub fn id(&self) -> RsmuId {
        self.spec.id
    }

    /// Install the cloud bootstrap payload: directory plus static
    /// infrastructure records.
    pub fn boot(&mut self, directory: Directory, infra: Vec<InfraRecord>) {
        self.directory = directory;
        for record in infra {
            self.view.infra.insert(record.id, record);
        }
    }

    pub fn owned_count(&self) -> usize {
        self.vehicles
            .values()
            .filter(|r| r.phase == LinkPhase::Owned)
            .count()
    }

    pub fn owned_vehicles(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.vehicles
            .iter()
            .filter(|(_, r)| r.phase == LinkPhase::Owned)
            .map(|(id, _)| *id)
    }

    /// Managed vehicles per km of this node's stretch.
    pub fn density_per_km(&self) -> f64 {
        let km = self.spec.jurisdiction.length_m() / 1_000.0;
        if km <= 0.0 {
            0.0
        } else {
            self.owned_count() as f64 / km
        }
    }

    /// Worst age of an owned record against this node's clock, for the
    /// view freshness metric. None when no vehicle is managed.
    pub fn own_table_staleness_ms(&self, now_device_ms: f64) -> Option<f64> {
        self.vehicles
            .values()
            .filter(|r| r.phase == LinkPhase::Owned)
            .map(|r| (now_device_ms - r.device_ts_ms).max(0.0))
            .fold(None, |acc, age| Some(acc.map_or(age, |m: f64| m.max(age))))
    }

    fn contains(&self, position: &crate::topology::RoadPosition) -> bool {
        position.carriageway == self.spec.carriageway
            && self.spec.jurisdiction.contains(position.effective_station())
    }

    fn snapshot_of(&self, vehicle: VehicleId, record: &VehicleRecord) -> VehicleSnapshot {
        VehicleSnapshot {
            vehicle,
            status: record.status.clone(),
            intent: record.intent,
            source: self.spec.id,
            device_ts_ms: record.device_ts_ms,
        }
    }

    /// Neighbor whose stretch the vehicle came from, by explicit handover
    /// origin when known, else by adjacency against its heading.
    fn upstream_neighbor(&self, record: &VehicleRecord) -> Option<RsmuId> {
        if let Some(from) = record.handover_from {
            if from != self.spec.id {
                return Some(from);
            }
        }
        let mine = &self.spec.jurisdiction;
        self.directory
            .entries
            .values()
            .filter(|e| e.id != self.spec.id && e.jurisdiction.carriageway == mine.carriageway)
            .find(|e| match record.status.heading {
                Direction::Forward => e.jurisdiction.end_m == mine.start_m,
                Direction::Reverse => e.jurisdiction.start_m == mine.end_m,
            })
            .map(|e| e.id)
    }

    /// Rule 2: tell the node the vehicle came from that this node manages
    /// it now.
    fn takeover_sync(&self, vehicle: VehicleId) -> Option<Outgoing> {
        let record = self.vehicles.get(&vehicle)?;
        let to = self.upstream_neighbor(record)?;
        Some(Outgoing::to_rsmu(
            to,
            MessageBody::NeighborSync {
                delta: ViewDelta {
                    snapshots: vec![self.snapshot_of(vehicle, record)],
                    ..ViewDelta::default()
                },
            },
        ))
    }

    /// Notices for every currently active event, sent to a newly admitted
    /// vehicle so late arrivals still learn standing hazards.
    fn admission_notices(&self, vehicle: VehicleId) -> Vec<Outgoing> {
        self.view
            .events
            .values()
            .filter(|e| e.is_active())
            .map(|e| Outgoing::to_vehicle(vehicle, MessageBody::EventNotice { event: e.clone() }))
            .collect()
    }

    fn publish_own_record(&mut self, vehicle: VehicleId) {
        if let Some(record) = self.vehicles.get(&vehicle) {
            if record.phase == LinkPhase::Owned {
                let snap = self.snapshot_of(vehicle, record);
                self.view.upsert_vehicle(snap);
                self.dirty_vehicles.insert(vehicle);
            }
        }
    }

    /// Process one delivered message; returns follow-up emissions.
    pub fn handle(&mut self, sender: Endpoint, body: MessageBody, now_us: Micros) -> Vec<Outgoing> {
        match body {
            MessageBody::StatusUpdate { status, intent } => {
                let vehicle = match sender {
                    Endpoint::Viu(v) => v,
                    _ => return Vec::new(),
                };
                self.on_status(vehicle, status, intent, now_us)
            }
            MessageBody::LinkRequest {
                mode,
                handover_from,
                status,
                intent,
            } => {
                let vehicle = match sender {
                    Endpoint::Viu(v) => v,
                    _ => return Vec::new(),
                };
                self.on_link_request(vehicle, mode, handover_from, status, intent, now_us)
            }
            MessageBody::LinkRelease { handoff_to } => {
                let vehicle = match sender {
                    Endpoint::Viu(v) => v,
                    _ => return Vec::new(),
                };
                self.on_release(vehicle, handoff_to)
            }
            MessageBody::NeighborSync { delta } => {
                let from = match sender {
                    Endpoint::Rsmu(r) => r,
                    _ => return Vec::new(),
                };
                self.on_neighbor_sync(from, delta, now_us)
            }
            MessageBody::EventNotice { event } => match sender {
                Endpoint::Rsmu(from) => self.on_event_relay(from, event),
                _ => Vec::new(),
            },
            MessageBody::RegistrySnapshot { directory, infra } => {
                self.boot(directory, infra);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn on_status(
        &mut self,
        vehicle: VehicleId,
        status: VehicleStatus,
        intent: DrivingIntent,
        now_us: Micros,
    ) -> Vec<Outgoing> {
        let mut out = Vec::new();
        match self.vehicles.get_mut(&vehicle) {
            Some(record) => {
                // Reject reordered or duplicated reports: stamps from one
                // vehicle clock strictly increase.
                if status.device_ts_ms <= record.device_ts_ms {
                    return out;
                }
                let promoted = record.phase == LinkPhase::PreAdmitted;
                record.status = status;
                record.intent = intent;
                record.device_ts_ms = record.status.device_ts_ms;
                record.updated_us = now_us;
                record.phase = LinkPhase::Owned;
                self.publish_own_record(vehicle);
                if promoted {
                    out.extend(self.takeover_sync(vehicle));
                }
            }
            None => {
                // Self-healing admission: the vehicle clearly considers this
                // node its manager, whatever message said so was lost.
                let record = VehicleRecord {
                    device_ts_ms: status.device_ts_ms,
                    status,
                    intent,
                    updated_us: now_us,
                    phase: LinkPhase::Owned,
                    handover_from: None,
                };
                self.vehicles.insert(vehicle, record);
                self.self_healing_admits += 1;
                self.publish_own_record(vehicle);
                out.push(Outgoing::to_vehicle(vehicle, MessageBody::LinkAccept));
                out.extend(self.takeover_sync(vehicle));
                out.extend(self.admission_notices(vehicle));
            }
        }
        out
    }

    fn on_link_request(
        &mut self,
        vehicle: VehicleId,
        mode: LinkRequestMode,
        handover_from: Option<RsmuId>,
        status: VehicleStatus,
        intent: DrivingIntent,
        now_us: Micros,
    ) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if mode == LinkRequestMode::Exclusive && !self.contains(&status.position) {
            // Broadcast discovery reaches every node in range; only the one
            // whose stretch covers the requester answers.
            return out;
        }
        let phase = match mode {
            LinkRequestMode::Exclusive => LinkPhase::Owned,
            LinkRequestMode::PreAdmit => LinkPhase::PreAdmitted,
        };
        let created = match self.vehicles.get_mut(&vehicle) {
            Some(record) => {
                if status.device_ts_ms > record.device_ts_ms {
                    record.status = status;
                    record.intent = intent;
                    record.device_ts_ms = record.status.device_ts_ms;
                    record.updated_us = now_us;
                    if record.handover_from.is_none() {
                        record.handover_from = handover_from;
                    }
                    // Never demote an owned record to pre-admitted.
                    if record.phase == LinkPhase::PreAdmitted && phase == LinkPhase::Owned {
                        record.phase = LinkPhase::Owned;
                    }
                }
                false
            }
            None => {
                self.vehicles.insert(
                    vehicle,
                    VehicleRecord {
                        device_ts_ms: status.device_ts_ms,
                        status,
                        intent,
                        updated_us: now_us,
                        phase,
                        handover_from,
                    },
                );
                true
            }
        };
        if phase == LinkPhase::Owned {
            self.publish_own_record(vehicle);
        }
        out.push(Outgoing::to_vehicle(vehicle, MessageBody::LinkAccept));
        if created {
            out.extend(self.admission_notices(vehicle));
        }
        out
    }

    fn on_release(&mut self, vehicle: VehicleId, handoff_to: Option<RsmuId>) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if let Some(record) = self.vehicles.remove(&vehicle) {
            if let Some(next) = handoff_to {
                if next != self.spec.id {
                    // Rule 1: hand the last snapshot to the successor so it
                    // holds the record even if the vehicle's first report
                    // there is lost.
                    let snap = self.snapshot_of(vehicle, &record);
                    out.push(Outgoing::to_rsmu(
                        next,
                        MessageBody::NeighborSync {
                            delta: ViewDelta {
                                handovers: vec![snap],
                                ..ViewDelta::default()
                            },
                        },
                    ));
                }
            }
        }
        out
    }

    fn on_neighbor_sync(&mut self, from: RsmuId, delta: ViewDelta, now_us: Micros) -> Vec<Outgoing> {
        // Handover records install or refresh owned rows here.
        for snap in &delta.handovers {
            match self.vehicles.get_mut(&snap.vehicle) {
                Some(record) => {
                    if snap.device_ts_ms > record.device_ts_ms {
                        record.status = snap.status.clone();
                        record.intent = snap.intent;
                        record.device_ts_ms = snap.device_ts_ms;
                        record.updated_us = now_us;
                    }
                    record.phase = LinkPhase::Owned;
                    if record.handover_from.is_none() {
                        record.handover_from = Some(from);
                    }
                }
                None => {
                    self.vehicles.insert(
                        snap.vehicle,
                        VehicleRecord {
                            status: snap.status.clone(),
                            intent: snap.intent,
                            device_ts_ms: snap.device_ts_ms,
                            updated_us: now_us,
                            phase: LinkPhase::Owned,
                            handover_from: Some(from),
                        },
                    );
                }
            }
            self.publish_own_record(snap.vehicle);
            if self.view.upsert_vehicle(snap.clone()) {
                self.dirty_vehicles.insert(snap.vehicle);
            }
        }
        // Ordinary content merges; accepted changes stay dirty so they
        // gossip onward.
        for snap in &delta.snapshots {
            if self.view.upsert_vehicle(snap.clone()) {
                self.dirty_vehicles.insert(snap.vehicle);
            }
        }
        for event in &delta.events {
            if self.view.upsert_event(event.clone()) {
                self.dirty_events.insert(event.id);
            }
        }
        for record in &delta.infra {
            let id = record.id;
            if self.view.upsert_infra(record.clone()) {
                self.dirty_infra.insert(id);
            }
        }
        // Rule 3: drop an owned record contradicted by fresher evidence.
        for snap in &delta.snapshots {
            if snap.source == self.spec.id {
                continue;
            }
            let stale = match self.vehicles.get(&snap.vehicle) {
                Some(record) => {
                    record.phase == LinkPhase::Owned
                        && snap.device_ts_ms > record.device_ts_ms
                        && !self.contains(&snap.status.position)
                }
                None => false,
            };
            if stale {
                self.vehicles.remove(&snap.vehicle);
            }
        }
        Vec::new()
    }

    /// A neighbor relayed a detection or clearance. Absorb it and, when it
    /// is news, pass it to managed vehicles and onward along the chain.
    fn on_event_relay(&mut self, from: RsmuId, event: AbnormalEvent) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if self.view.upsert_event(event.clone()) {
            self.dirty_events.insert(event.id);
            let stored = self.view.events[&event.id].clone();
            for vehicle in self.owned_vehicles().collect::<Vec<_>>() {
                out.push(Outgoing::to_vehicle(
                    vehicle,
                    MessageBody::EventNotice {
                        event: stored.clone(),
                    },
                ));
            }
            for neighbor in self.spec.neighbors.clone() {
                if neighbor != from {
                    out.push(Outgoing::to_rsmu(
                        neighbor,
                        MessageBody::EventNotice {
                            event: stored.clone(),
                        },
                    ));
                }
            }
        }
        out
    }

    /// Scan ground truth for onsets and clearances inside this node's
    /// stretch. Sensing takes `detection_delay_ms`: a condition becomes
    /// detected (and a clearance noticed) that long after the fact.
    /// Returns the state changes for the engine's records; the notices
    /// themselves go out with this tick's emissions.
    pub fn detect_events(
        &mut self,
        now_us: Micros,
        ground_truth: &[GroundTruthEvent],
        detection_delay_ms: f64,
    ) -> Vec<AbnormalEvent> {
        let mut changes = Vec::new();
        let now_ms = self.clock.local_time(now_us);
        let delay_us = crate::types::ms_to_micros(detection_delay_ms);
        for gt in ground_truth {
            if !self.contains(&gt.position) {
                continue;
            }
            if gt.onset_us.saturating_add(delay_us) <= now_us && !self.detected.contains(&gt.id) {
                self.detected.insert(gt.id);
                let event = AbnormalEvent {
                    id: gt.id,
                    kind: gt.kind,
                    location: gt.position,
                    onset_us: gt.onset_us,
                    detected_ms: Some(now_ms),
                    cleared_ms: None,
                };
                self.view.upsert_event(event.clone());
                self.dirty_events.insert(gt.id);
                self.pending_notices.push(event.clone());
                changes.push(event);
                self.mark_infra(gt, InfraStatus::Affected(gt.id), now_ms);
            }
            if let Some(clear_us) = gt.clear_us {
                if clear_us.saturating_add(delay_us) <= now_us
                    && self.detected.contains(&gt.id)
                    && !self.cleared.contains(&gt.id)
                {
                    self.cleared.insert(gt.id);
                    let mut event = self.view.events[&gt.id].clone();
                    event.cleared_ms = Some(now_ms);
                    self.view.events.insert(gt.id, event.clone());
                    self.dirty_events.insert(gt.id);
                    self.pending_notices.push(event.clone());
                    changes.push(event);
                    self.mark_infra(gt, InfraStatus::Ok, now_ms);
                }
            }
        }
        changes
    }

    fn mark_infra(&mut self, gt: &GroundTruthEvent, to: InfraStatus, now_ms: f64) {
        let station = gt.position.effective_station();
        let ids: Vec<u32> = self
            .view
            .infra
            .values()
            .filter(|i| {
                i.carriageway == gt.position.carriageway
                    && (i.station_m - station).abs() <= INFRA_AFFECT_RADIUS_M
            })
            .map(|i| i.id)
            .collect();
        for id in ids {
            let record = self.view.infra.get_mut(&id).expect("infra id just listed");
            let flip = match to {
                InfraStatus::Affected(_) => record.status == InfraStatus::Ok,
                InfraStatus::Ok => record.status == InfraStatus::Affected(gt.id),
            };
            if flip {
                record.status = to;
                record.device_ts_ms = now_ms;
                self.dirty_infra.insert(id);
            }
        }
    }

    /// Periodic emissions for this tick, in order: view broadcasts to
    /// managed vehicles, staged event notices (vehicles then neighbors),
    /// then neighbor syncs. Also sweeps expired records first.
    pub fn tick(&mut self, now_us: Micros, params: &ProtocolParams) -> Vec<Outgoing> {
        let mut out = Vec::new();

        self.vehicles.retain(|_, record| {
            let age_ms = (now_us.saturating_sub(record.updated_us)) as f64 / 1_000.0;
            let limit = match record.phase {
                LinkPhase::Owned => params.record_expiry_ms,
                LinkPhase::PreAdmitted => params.preadmit_expiry_ms,
            };
            age_ms <= limit
        });

        if super::period_due(now_us, params.broadcast_period_ms) {
            let owned: Vec<VehicleId> = self.owned_vehicles().collect();
            for vehicle in owned {
                out.push(Outgoing::to_vehicle(
                    vehicle,
                    MessageBody::ViewBroadcast {
                        view: self.view.clone(),
                    },
                ));
            }
        }

        for event in std::mem::take(&mut self.pending_notices) {
            for vehicle in self.owned_vehicles().collect::<Vec<_>>() {
                out.push(Outgoing::to_vehicle(
                    vehicle,
                    MessageBody::EventNotice {
                        event: event.clone(),
                    },
                ));
            }
            for neighbor in self.spec.neighbors.clone() {
                out.push(Outgoing::to_rsmu(
                    neighbor,
                    MessageBody::EventNotice {
                        event: event.clone(),
                    },
                ));
            }
        }

        if super::period_due(now_us, params.neighbor_sync_period_ms) {
            self.sync_counter += 1;
            let full = self
                .sync_counter
                .is_multiple_of(u64::from(params.full_snapshot_every));
            let delta = if full {
                self.view.as_full_delta()
            } else {
                ViewDelta {
                    snapshots: self
                        .dirty_vehicles
                        .iter()
                        .filter_map(|v| self.view.vehicles.get(v).cloned())
                        .collect(),
                    events: self
                        .dirty_events
                        .iter()
                        .filter_map(|e| self.view.events.get(e).cloned())
                        .collect(),
                    infra: self
                        .dirty_infra
                        .iter()
                        .filter_map(|i| self.view.infra.get(i).cloned())
                        .collect(),
                    handovers: Vec::new(),
                    full: false,
                }
            };
            if !delta.is_empty() || full {
                for neighbor in self.spec.neighbors.clone() {
                    out.push(Outgoing::to_rsmu(
                        neighbor,
                        MessageBody::NeighborSync {
                            delta: delta.clone(),
                        },
                    ));
                }
            }
            self.dirty_vehicles.clear();
            self.dirty_events.clear();
            self.dirty_infra.clear();
        }

        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deployment::{plan_deployment, DeploymentParams};
    use crate::globalview::{CloudRegistry, EventKind};
    use crate::topology::{GeometryConfig, RoadNetwork, RoadPosition};

    fn fixture() -> (RoadNetwork, Vec<RsmuState>, Directory) {
        let network = RoadNetwork::build(&GeometryConfig {
            mainline_length_m: 4_800.0,
            carriageway_separation_m: 20.0,
            junctions: vec![],
        })
        .unwrap();
        let plan = plan_deployment(&network, &DeploymentParams::default()).unwrap();
        let mut registry = CloudRegistry::default();
        for node in &plan.nodes {
            registry.publish(node).unwrap();
        }
        let all: Vec<RsmuId> = plan.nodes.iter().map(|n| n.id).collect();
        let directory = registry.prefetch(&all).unwrap();
        let nodes = plan
            .nodes
            .iter()
            .map(|spec| {
                let mut node = RsmuState::new(spec.clone(), ClockState::ideal());
                node.boot(directory.clone(), vec![]);
                node
            })
            .collect();
        (network, nodes, directory)
    }

    fn forward_node(nodes: &mut [RsmuState], directory: &Directory, station: f64) -> usize {
        let id = directory.owner_of(Direction::Forward, station).unwrap().id;
        nodes.iter().position(|n| n.id() == id).unwrap()
    }

    fn status_at(station: f64, ts: f64) -> VehicleStatus {
        VehicleStatus {
            position: RoadPosition::mainline(Direction::Forward, station),
            speed_mps: 30.0,
            heading: Direction::Forward,
            acceleration_mps2: 0.0,
            braking: false,
            steering_angle_deg: 0.0,
            device_ts_ms: ts,
        }
    }

    fn intent() -> DrivingIntent {
        DrivingIntent::keep_lane(30.0)
    }

    #[test]
    fn exclusive_request_admits_and_stale_reports_are_dropped() {
        let (_, mut nodes, directory) = fixture();
        let i = forward_node(&mut nodes, &directory, 10.0);
        let v = VehicleId(7);

        let out = nodes[i].handle(
            Endpoint::Viu(v),
            MessageBody::LinkRequest {
                mode: LinkRequestMode::Exclusive,
                handover_from: None,
                status: status_at(10.0, 100.0),
                intent: intent(),
            },
            100_000,
        );
        assert!(out.iter().any(|o| matches!(o.body, MessageBody::LinkAccept)));
        assert_eq!(nodes[i].vehicles[&v].phase, LinkPhase::Owned);
        assert_eq!(nodes[i].owned_count(), 1);
        assert_eq!(nodes[i].self_healing_admits, 0);
        // View carries the admitted vehicle.
        assert!(nodes[i].view.vehicles.contains_key(&v));

        nodes[i].handle(
            Endpoint::Viu(v),
            MessageBody::StatusUpdate {
                status: status_at(13.0, 200.0),
                intent: intent(),
            },
            200_000,
        );
        assert_eq!(nodes[i].vehicles[&v].device_ts_ms, 200.0);
        // Older stamp: rejected.
        nodes[i].handle(
            Endpoint::Viu(v),
            MessageBody::StatusUpdate {
                status: status_at(99.0, 150.0),
                intent: intent(),
            },
            250_000,
        );
        assert_eq!(nodes[i].vehicles[&v].device_ts_ms, 200.0);
        assert_eq!(nodes[i].vehicles[&v].status.position.station_m, 13.0);
    }

    #[test]
    fn broadcast_discovery_only_admits_at_covering_node() {
        let (_, mut nodes, directory) = fixture();
        let covering = forward_node(&mut nodes, &directory, 50.0);
        let other = forward_node(&mut nodes, &directory, 700.0);
        let request = MessageBody::LinkRequest {
            mode: LinkRequestMode::Exclusive,
            handover_from: None,
            status: status_at(50.0, 100.0),
            intent: intent(),
        };
        let out = nodes[other].handle(Endpoint::Viu(VehicleId(1)), request.clone(), 100_000);
        assert!(out.is_empty());
        assert!(nodes[other].vehicles.is_empty());
        let out = nodes[covering].handle(Endpoint::Viu(VehicleId(1)), request, 100_000);
        assert!(!out.is_empty());
        assert_eq!(nodes[covering].owned_count(), 1);
    }

    #[test]
    fn handover_stays_unique_in_all_four_loss_cases() {
        // Vehicle crosses from node A (stretch ending at 600) to node B.
        // The release to A and the first report to B can each be lost;
        // management must settle on exactly one owner in every combination.
        for (release_delivered, status_delivered) in
            [(true, true), (true, false), (false, true), (false, false)]
        {
            let (_, mut nodes, directory) = fixture();
            let a = forward_node(&mut nodes, &directory, 500.0);
            let b = forward_node(&mut nodes, &directory, 700.0);
            let v = VehicleId(3);
            let a_id = nodes[a].id();
            let b_id = nodes[b].id();

            // Dual-link setup: A owns, B pre-admits.
            nodes[a].handle(
                Endpoint::Viu(v),
                MessageBody::LinkRequest {
                    mode: LinkRequestMode::Exclusive,
                    handover_from: None,
                    status: status_at(450.0, 100.0),
                    intent: intent(),
                },
                100_000,
            );
            nodes[b].handle(
                Endpoint::Viu(v),
                MessageBody::LinkRequest {
                    mode: LinkRequestMode::PreAdmit,
                    handover_from: Some(a_id),
                    status: status_at(450.0, 100.0),
                    intent: intent(),
                },
                100_000,
            );
            assert_eq!(nodes[b].vehicles[&v].phase, LinkPhase::PreAdmitted);
            assert_eq!(nodes[b].owned_count(), 0);

            // The crossing tick: vehicle at 601 m sends release to A and a
            // forced report to B.
            if release_delivered {
                let cascades = nodes[a].handle(
                    Endpoint::Viu(v),
                    MessageBody::LinkRelease {
                        handoff_to: Some(b_id),
                    },
                    600_000,
                );
                // Rule 1: handover snapshot flows A -> B.
                for c in cascades {
                    if let MessageBody::NeighborSync { delta } = c.body {
                        nodes[b].handle(Endpoint::Rsmu(a_id), MessageBody::NeighborSync { delta }, 600_000);
                    }
                }
            }
            if status_delivered {
                let cascades = nodes[b].handle(
                    Endpoint::Viu(v),
                    MessageBody::StatusUpdate {
                        status: status_at(601.0, 620.0),
                        intent: intent(),
                    },
                    620_000,
                );
                // Rule 2: takeover snapshot flows B -> A.
                for c in cascades {
                    if let MessageBody::NeighborSync { delta } = c.body {
                        nodes[a].handle(Endpoint::Rsmu(b_id), MessageBody::NeighborSync { delta }, 620_000);
                    }
                }
            }

            let a_owned = nodes[a]
                .vehicles
                .get(&v)
                .map(|r| r.phase == LinkPhase::Owned)
                .unwrap_or(false);
            let b_owned = nodes[b]
                .vehicles
                .get(&v)
                .map(|r| r.phase == LinkPhase::Owned)
                .unwrap_or(false);
            let owners = usize::from(a_owned) + usize::from(b_owned);
            assert_eq!(
                owners, 1,
                "release_delivered={release_delivered} status_delivered={status_delivered}: \
                 expected exactly one owner, got a={a_owned} b={b_owned}"
            );
            // Whenever any crossing message got through, B is the owner;
            // only the double loss leaves A holding the (stale) record.
            if release_delivered || status_delivered {
                assert!(b_owned);
            } else {
                assert!(a_owned);
            }
        }
    }

    #[test]
    fn unknown_vehicle_report_self_heals_with_accept_and_takeover() {
        let (_, mut nodes, directory) = fixture();
        let b = forward_node(&mut nodes, &directory, 700.0);
        let v = VehicleId(9);
        let out = nodes[b].handle(
            Endpoint::Viu(v),
            MessageBody::StatusUpdate {
                status: status_at(601.0, 620.0),
                intent: intent(),
            },
            620_000,
        );
        assert_eq!(nodes[b].self_healing_admits, 1);
        assert_eq!(nodes[b].vehicles[&v].phase, LinkPhase::Owned);
        assert!(out.iter().any(|o| matches!(o.body, MessageBody::LinkAccept)));
        // Takeover sync targets the adjacent node behind the vehicle.
        let a_id = directory.owner_of(Direction::Forward, 500.0).unwrap().id;
        assert!(out.iter().any(|o| {
            matches!(&o.body, MessageBody::NeighborSync { delta } if !delta.snapshots.is_empty())
                && o.to == crate::protocol::message::Address::To(Endpoint::Rsmu(a_id))
        }));
    }

    #[test]
    fn expiry_drops_unrefreshed_owned_records() {
        let (_, mut nodes, directory) = fixture();
        let i = forward_node(&mut nodes, &directory, 10.0);
        let params = ProtocolParams::default();
        nodes[i].handle(
            Endpoint::Viu(VehicleId(1)),
            MessageBody::LinkRequest {
                mode: LinkRequestMode::Exclusive,
                handover_from: None,
                status: status_at(10.0, 100.0),
                intent: intent(),
            },
            100_000,
        );
        // Within the expiry horizon the record stays.
        nodes[i].tick(2_000_000, &params);
        assert_eq!(nodes[i].owned_count(), 1);
        // 2.1 s without a refresh: swept.
        nodes[i].tick(2_200_000, &params);
        assert_eq!(nodes[i].owned_count(), 0);
        // The view keeps the last snapshot (history is not erased).
        assert!(nodes[i].view.vehicles.contains_key(&VehicleId(1)));
    }

    #[test]
    fn detection_stages_notices_and_marks_infra() {
        let (_, mut nodes, directory) = fixture();
        let i = forward_node(&mut nodes, &directory, 700.0);
        let infra = InfraRecord {
            id: 1,
            name: "overpass".to_string(),
            carriageway: Direction::Forward,
            station_m: 850.0,
            status: InfraStatus::Ok,
            device_ts_ms: 0.0,
        };
        let dir = nodes[i].directory.clone();
        nodes[i].boot(dir, vec![infra]);
        // A managed vehicle to notify.
        nodes[i].handle(
            Endpoint::Viu(VehicleId(2)),
            MessageBody::LinkRequest {
                mode: LinkRequestMode::Exclusive,
                handover_from: None,
                status: status_at(700.0, 100.0),
                intent: intent(),
            },
            100_000,
        );

        let gt = vec![GroundTruthEvent {
            id: EventId(0),
            kind: EventKind::Rockfall,
            position: RoadPosition::mainline(Direction::Forward, 800.0),
            onset_us: 150_000,
            clear_us: Some(10_000_000),
        }];

        // Before onset: nothing. With a 500 ms sensing delay, onset at
        // 150 ms is not detected until 650 ms.
        assert!(nodes[i].detect_events(100_000, &gt, 0.0).is_empty());
        assert!(nodes[i].detect_events(600_000, &gt, 500.0).is_empty());
        let changes = nodes[i].detect_events(200_000, &gt, 0.0);
        assert_eq!(changes.len(), 1);
        assert_eq!(changes[0].detected_ms, Some(200.0));
        assert_eq!(
            nodes[i].view.infra[&1].status,
            InfraStatus::Affected(EventId(0))
        );
        // Second scan is idempotent.
        assert!(nodes[i].detect_events(300_000, &gt, 0.0).is_empty());

        // The tick after detection carries notices to the vehicle and both
        // neighbors.
        let out = nodes[i].tick(200_000, &ProtocolParams::default());
        let to_vehicle = out
            .iter()
            .filter(|o| {
                matches!(o.body, MessageBody::EventNotice { .. })
                    && o.to == crate::protocol::message::Address::To(Endpoint::Viu(VehicleId(2)))
            })
            .count();
        assert_eq!(to_vehicle, 1);
        let to_neighbors = out
            .iter()
            .filter(|o| {
                matches!(o.body, MessageBody::EventNotice { .. })
                    && matches!(o.to, crate::protocol::message::Address::To(Endpoint::Rsmu(_)))
            })
            .count();
        assert_eq!(to_neighbors, nodes[i].spec.neighbors.len());

        // Clearance restores the infrastructure and stages a cleared notice.
        let changes = nodes[i].detect_events(10_000_000, &gt, 0.0);
        assert_eq!(changes.len(), 1);
        assert_eq!(changes[0].cleared_ms, Some(10_000.0));
        assert_eq!(nodes[i].view.infra[&1].status, InfraStatus::Ok);
    }

    #[test]
    fn event_relay_fans_out_once_and_quiesces() {
        let (_, mut nodes, directory) = fixture();
        let i = forward_node(&mut nodes, &directory, 700.0);
        let from = nodes[i].spec.neighbors[0];
        let other_neighbors: Vec<RsmuId> = nodes[i]
            .spec
            .neighbors
            .iter()
            .copied()
            .filter(|n| *n != from)
            .collect();
        nodes[i].handle(
            Endpoint::Viu(VehicleId(2)),
            MessageBody::LinkRequest {
                mode: LinkRequestMode::Exclusive,
                handover_from: None,
                status: status_at(700.0, 100.0),
                intent: intent(),
            },
            100_000,
        );
        let event = AbnormalEvent {
            id: EventId(4),
            kind: EventKind::Accident,
            location: RoadPosition::mainline(Direction::Forward, 2_000.0),
            onset_us: 100_000,
            detected_ms: Some(150.0),
            cleared_ms: None,
        };
        let out = nodes[i].handle(
            Endpoint::Rsmu(from),
            MessageBody::EventNotice {
                event: event.clone(),
            },
            200_000,
        );
        // One notice to the managed vehicle, one onward per other neighbor,
        // none back to the sender.
        let vehicle_notices = out
            .iter()
            .filter(|o| o.to == crate::protocol::message::Address::To(Endpoint::Viu(VehicleId(2))))
            .count();
        assert_eq!(vehicle_notices, 1);
        for n in &other_neighbors {
            assert!(out
                .iter()
                .any(|o| o.to == crate::protocol::message::Address::To(Endpoint::Rsmu(*n))));
        }
        assert!(!out
            .iter()
            .any(|o| o.to == crate::protocol::message::Address::To(Endpoint::Rsmu(from))));
        // A duplicate relay is absorbed silently.
        let out = nodes[i].handle(
            Endpoint::Rsmu(from),
            MessageBody::EventNotice { event },
            300_000,
        );
        assert!(out.is_empty());
    }

    #[test]
    fn neighbor_sync_full_snapshot_every_tenth_round() {
        let (_, mut nodes, directory) = fixture();
        let i = forward_node(&mut nodes, &directory, 700.0);
        let params = ProtocolParams::default();
        nodes[i].handle(
            Endpoint::Viu(VehicleId(5)),
            MessageBody::LinkRequest {
                mode: LinkRequestMode::Exclusive,
                handover_from: None,
                status: status_at(700.0, 100.0),
                intent: intent(),
            },
            100_000,
        );
        let mut fulls = 0;
        let mut deltas = 0;
        for round in 1..=20u64 {
            let now = round * 200_000;
            // Refresh the record so the delta is non-empty on some rounds
            // and expiry never fires.
            nodes[i].handle(
                Endpoint::Viu(VehicleId(5)),
                MessageBody::StatusUpdate {
                    status: status_at(700.0 + round as f64, 100.0 + round as f64 * 200.0),
                    intent: intent(),
                },
                now - 1,
            );
            for o in nodes[i].tick(now, &params) {
                if let MessageBody::NeighborSync { delta } = &o.body {
                    if delta.full {
                        fulls += 1;
                    } else {
                        deltas += 1;
                    }
                }
            }
        }
        let n = nodes[i].spec.neighbors.len();
        assert_eq!(fulls, 2 * n, "rounds 10 and 20 ship full snapshots");
        assert_eq!(deltas, 18 * n);
    }
}
