//! Offline reconstruction: rebuild every node's vehicle table and merged
//! view purely from the transmission log, applying each delivered update in
//! true arrival order with latest-stamp-wins resolution. A live run and the
//! reconstruction must agree exactly; any divergence means either the log
//! is incomplete or the protocol rules drifted from their stated semantics.
//!
//! The admission rules are restated here on purpose (not called through the
//! node state machine), so the reconstruction is a genuinely independent
//! check of the table discipline.

use crate::deployment::Jurisdiction;
use crate::globalview::{GlobalView, InfraStatus, VehicleSnapshot};
use crate::protocol::{LinkPhase, LinkRequestMode, VehicleRecord};
use crate::sim::log::{ChannelClass, LogBody, LogRecord, Verdict};
use crate::types::{ms_to_micros, Endpoint, Micros, RsmuId, VehicleId};
use std::collections::BTreeMap;
use thiserror::Error;

/// Infrastructure within this distance of an abnormal event flips to
/// affected (matches the node-side sensing rule).
const INFRA_AFFECT_RADIUS_M: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log has no run header")]
    MissingHeader,
    #[error("node {0} appears in traffic but never booted")]
    UnknownNode(RsmuId),
}

/// One reconstructed node: jurisdiction from its boot record, then tables
/// and views evolved from delivered traffic.
struct ShadowNode {
    id: RsmuId,
    jurisdiction: Jurisdiction,
    table: BTreeMap<VehicleId, VehicleRecord>,
    view: GlobalView,
    /// Last accepted report stamp per vehicle, for monotonicity auditing.
    accepted_ts: BTreeMap<VehicleId, f64>,
}

impl ShadowNode {
    fn contains(&self, position: &crate::topology::RoadPosition) -> bool {
        position.carriageway == self.jurisdiction.carriageway
            && self.jurisdiction.contains(position.effective_station())
    }

    fn snapshot_of(&self, vehicle: VehicleId, record: &VehicleRecord) -> VehicleSnapshot {
        VehicleSnapshot {
            vehicle,
            status: record.status.clone(),
            intent: record.intent,
            source: self.id,
            device_ts_ms: record.device_ts_ms,
        }
    }

    fn publish_own_record(&mut self, vehicle: VehicleId) {
        if let Some(record) = self.table.get(&vehicle) {
            if record.phase == LinkPhase::Owned {
                let snap = self.snapshot_of(vehicle, record);
                self.view.upsert_vehicle(snap);
            }
        }
    }
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub views: BTreeMap<RsmuId, GlobalView>,
    pub tables: BTreeMap<RsmuId, BTreeMap<VehicleId, VehicleRecord>>,
    /// Status reports that had to create a record from nothing.
    pub self_healing_admits: u64,
    /// Ticks where some vehicle was managed by more than one node.
    pub uniqueness_violations: Vec<String>,
    /// Accepted report stamps that failed to strictly increase.
    pub monotonicity_violations: Vec<String>,
}

/// Rebuild all node state from a parsed log.
pub fn reconstruct(records: &[LogRecord]) -> Result<ReplayOutcome, ReplayError> {
    let mut outcome = ReplayOutcome {
        views: BTreeMap::new(),
        tables: BTreeMap::new(),
        self_healing_admits: 0,
        uniqueness_violations: Vec::new(),
        monotonicity_violations: Vec::new(),
    };
    if records.is_empty() {
        return Ok(outcome);
    }
    let (tick_ms, duration_s, protocol) = match &records[0].body {
        LogBody::RunHeader {
            tick_ms,
            duration_s,
            protocol,
            ..
        } => (*tick_ms, *duration_s, protocol.clone()),
        _ => return Err(ReplayError::MissingHeader),
    };
    let tick_us = ms_to_micros(tick_ms).max(1);
    let end_us = (crate::types::secs_to_micros(duration_s) / tick_us) * tick_us;

    // Boot: nodes come from their registry snapshots (cloud channel,
    // own_entry present).
    let mut nodes: BTreeMap<RsmuId, ShadowNode> = BTreeMap::new();
    for record in records {
        if let (
            ChannelClass::Cloud,
            Endpoint::Rsmu(id),
            LogBody::RegistrySnapshot {
                own_entry: Some(entry),
                infra,
                ..
            },
        ) = (record.channel, record.receiver, &record.body)
        {
            let mut view = GlobalView::new(id);
            for rec in infra {
                view.infra.insert(rec.id, rec.clone());
            }
            nodes.insert(
                id,
                ShadowNode {
                    id,
                    jurisdiction: entry.jurisdiction,
                    table: BTreeMap::new(),
                    view,
                    accepted_ts: BTreeMap::new(),
                },
            );
        }
    }

    // Traffic, bucketed by the tick whose delivery phase processed it: a
    // transmission arriving at `a` is handed over at the first grid instant
    // strictly after `a`. Arrivals at or past the end instant were still in
    // flight at shutdown.
    let mut buckets: BTreeMap<Micros, Vec<&LogRecord>> = BTreeMap::new();
    let mut detections: BTreeMap<(Micros, RsmuId), Vec<&LogRecord>> = BTreeMap::new();
    for record in records {
        if record.verdict != Verdict::Delivered {
            continue;
        }
        match (record.channel, record.receiver) {
            (ChannelClass::Internal, Endpoint::Rsmu(id)) => {
                if matches!(record.body, LogBody::EventNotice { .. }) {
                    detections.entry((record.send_us, id)).or_default().push(record);
                }
            }
            (ChannelClass::V2i | ChannelClass::Backhaul, Endpoint::Rsmu(_)) => {
                let arrival = record.arrival_us.expect("delivered records have arrivals");
                let processed_at = (arrival / tick_us) * tick_us + tick_us;
                if processed_at <= end_us {
                    buckets.entry(processed_at).or_default().push(record);
                }
            }
            _ => {}
        }
    }
    for bucket in buckets.values_mut() {
        bucket.sort_by_key(|r| (r.arrival_us, r.seq));
    }

    let mut t = 0;
    while t <= end_us {
        if let Some(bucket) = buckets.get(&t) {
            for record in bucket {
                apply_delivery(&mut nodes, record, &mut outcome)?;
            }
        }
        let ids: Vec<RsmuId> = nodes.keys().copied().collect();
        for id in ids {
            if let Some(list) = detections.get(&(t, id)) {
                for record in list {
                    apply_detection(nodes.get_mut(&id).expect("listed node"), record);
                }
            }
            let node = nodes.get_mut(&id).expect("listed node");
            node.table.retain(|_, record| {
                let age_ms = (t.saturating_sub(record.updated_us)) as f64 / 1_000.0;
                let limit = match record.phase {
                    LinkPhase::Owned => protocol.record_expiry_ms,
                    LinkPhase::PreAdmitted => protocol.preadmit_expiry_ms,
                };
                age_ms <= limit
            });
        }

        // Uniqueness: no vehicle may be managed by two nodes at once.
        let mut owner_count: BTreeMap<VehicleId, Vec<RsmuId>> = BTreeMap::new();
        for node in nodes.values() {
            for (vehicle, record) in &node.table {
                if record.phase == LinkPhase::Owned {
                    owner_count.entry(*vehicle).or_default().push(node.id);
                }
            }
        }
        for (vehicle, owners) in owner_count {
            if owners.len() > 1 {
                outcome
                    .uniqueness_violations
                    .push(format!("t={t} us: vehicle {vehicle} managed by {owners:?}"));
            }
        }
        t += tick_us;
    }

    for (id, node) in nodes {
        outcome.views.insert(id, node.view);
        outcome.tables.insert(id, node.table);
    }
    Ok(outcome)
}

fn apply_delivery(
    nodes: &mut BTreeMap<RsmuId, ShadowNode>,
    record: &LogRecord,
    outcome: &mut ReplayOutcome,
) -> Result<(), ReplayError> {
    let node_id = match record.receiver {
        Endpoint::Rsmu(id) => id,
        _ => return Ok(()),
    };
    let now_us = record.arrival_us.expect("delivered");
    let node = nodes
        .get_mut(&node_id)
        .ok_or(ReplayError::UnknownNode(node_id))?;
    match &record.body {
        LogBody::StatusUpdate { status, intent } => {
            let vehicle = match record.sender {
                Endpoint::Viu(v) => v,
                _ => return Ok(()),
            };
            match node.table.get_mut(&vehicle) {
                Some(rec) => {
                    if status.device_ts_ms <= rec.device_ts_ms {
                        return Ok(());
                    }
                    rec.status = status.clone();
                    rec.intent = *intent;
                    rec.device_ts_ms = status.device_ts_ms;
                    rec.updated_us = now_us;
                    rec.phase = LinkPhase::Owned;
                }
                None => {
                    node.table.insert(
                        vehicle,
                        VehicleRecord {
                            status: status.clone(),
                            intent: *intent,
                            device_ts_ms: status.device_ts_ms,
                            updated_us: now_us,
                            phase: LinkPhase::Owned,
                            handover_from: None,
                        },
                    );
                    outcome.self_healing_admits += 1;
                }
            }
            audit_monotone(node, vehicle, status.device_ts_ms, outcome);
            node.publish_own_record(vehicle);
        }
        LogBody::LinkRequest {
            mode,
            handover_from,
            status,
            intent,
        } => {
            let vehicle = match record.sender {
                Endpoint::Viu(v) => v,
                _ => return Ok(()),
            };
            if *mode == LinkRequestMode::Exclusive && !node.contains(&status.position) {
                return Ok(());
            }
            let phase = match mode {
                LinkRequestMode::Exclusive => LinkPhase::Owned,
                LinkRequestMode::PreAdmit => LinkPhase::PreAdmitted,
            };
            match node.table.get_mut(&vehicle) {
                Some(rec) => {
                    if status.device_ts_ms > rec.device_ts_ms {
                        rec.status = status.clone();
                        rec.intent = *intent;
                        rec.device_ts_ms = status.device_ts_ms;
                        rec.updated_us = now_us;
                        if rec.handover_from.is_none() {
                            rec.handover_from = *handover_from;
                        }
                        if rec.phase == LinkPhase::PreAdmitted && phase == LinkPhase::Owned {
                            rec.phase = LinkPhase::Owned;
                        }
                        audit_monotone(node, vehicle, status.device_ts_ms, outcome);
                    }
                }
                None => {
                    node.table.insert(
                        vehicle,
                        VehicleRecord {
                            status: status.clone(),
                            intent: *intent,
                            device_ts_ms: status.device_ts_ms,
                            updated_us: now_us,
                            phase,
                            handover_from: *handover_from,
                        },
                    );
                    audit_monotone(node, vehicle, status.device_ts_ms, outcome);
                }
            }
            if phase == LinkPhase::Owned {
                node.publish_own_record(vehicle);
            }
        }
        LogBody::LinkRelease { .. } => {
            if let Endpoint::Viu(vehicle) = record.sender {
                node.table.remove(&vehicle);
            }
        }
        LogBody::NeighborSync { delta } => {
            let from = match record.sender {
                Endpoint::Rsmu(r) => r,
                _ => return Ok(()),
            };
            for snap in &delta.handovers {
                match node.table.get_mut(&snap.vehicle) {
                    Some(rec) => {
                        if snap.device_ts_ms > rec.device_ts_ms {
                            rec.status = snap.status.clone();
                            rec.intent = snap.intent;
                            rec.device_ts_ms = snap.device_ts_ms;
                            rec.updated_us = now_us;
                        }
                        rec.phase = LinkPhase::Owned;
                        if rec.handover_from.is_none() {
                            rec.handover_from = Some(from);
                        }
                    }
                    None => {
                        node.table.insert(
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
                node.publish_own_record(snap.vehicle);
                node.view.upsert_vehicle(snap.clone());
            }
            for snap in &delta.snapshots {
                node.view.upsert_vehicle(snap.clone());
            }
            for event in &delta.events {
                node.view.upsert_event(event.clone());
            }
            for infra in &delta.infra {
                node.view.upsert_infra(infra.clone());
            }
            for snap in &delta.snapshots {
                if snap.source == node.id {
                    continue;
                }
                let stale = match node.table.get(&snap.vehicle) {
                    Some(rec) => {
                        rec.phase == LinkPhase::Owned
                            && snap.device_ts_ms > rec.device_ts_ms
                            && !node.contains(&snap.status.position)
                    }
                    None => false,
                };
                if stale {
                    node.table.remove(&snap.vehicle);
                }
            }
        }
        LogBody::EventNotice { event } => {
            // Node-to-node relay of a detection or clearance.
            if matches!(record.sender, Endpoint::Rsmu(_)) {
                node.view.upsert_event(event.clone());
            }
        }
        _ => {}
    }
    Ok(())
}

/// A node's own sensor transition, recorded in the log as an internal
/// notice: apply the event to the view and flip nearby infrastructure.
fn apply_detection(node: &mut ShadowNode, record: &LogRecord) {
    let event = match &record.body {
        LogBody::EventNotice { event } => event.clone(),
        _ => return,
    };
    let cleared = event.cleared_ms.is_some();
    if cleared {
        // Clearance replaces the stored copy outright (same id, same
        // detection stamp, clearance added); the view timestamp tracks
        // detections, not clearances.
        node.view.events.insert(event.id, event.clone());
    } else {
        node.view.upsert_event(event.clone());
    }
    let station = event.location.effective_station();
    let now_ms = record.device_ts_ms;
    let ids: Vec<u32> = node
        .view
        .infra
        .values()
        .filter(|i| {
            i.carriageway == event.location.carriageway
                && (i.station_m - station).abs() <= INFRA_AFFECT_RADIUS_M
        })
        .map(|i| i.id)
        .collect();
    for id in ids {
        let rec = node.view.infra.get_mut(&id).expect("infra id just listed");
        let flip = if cleared {
            rec.status == InfraStatus::Affected(event.id)
        } else {
            rec.status == InfraStatus::Ok
        };
        if flip {
            rec.status = if cleared {
                InfraStatus::Ok
            } else {
                InfraStatus::Affected(event.id)
            };
            rec.device_ts_ms = now_ms;
        }
    }
}

fn audit_monotone(
    node: &mut ShadowNode,
    vehicle: VehicleId,
    accepted_ts_ms: f64,
    outcome: &mut ReplayOutcome,
) {
    if let Some(last) = node.accepted_ts.get(&vehicle) {
        if accepted_ts_ms <= *last {
            outcome.monotonicity_violations.push(format!(
                "node {}: vehicle {vehicle} accepted {accepted_ts_ms} ms after {last} ms",
                node.id
            ));
        }
    }
    node.accepted_ts.insert(vehicle, accepted_ts_ms);
}
