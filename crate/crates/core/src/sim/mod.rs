//! Deterministic discrete-event engine tying the road network, the
//! deployed nodes, the vehicle units, and the lossy channel together.
//!
//! # Tick anatomy
//!
//! Every `tick_ms` the engine runs, in this order:
//!
//! 1. **Activation** — vehicles whose entry time has come get a clock
//!    (two RNG draws each, ascending id), a synchronously logged registry
//!    prefetch, and their motion state.
//! 2. **Density** — per-node managed-vehicle density is cached for the
//!    tick's channel draws.
//! 3. **Kinematics** — every vehicle moves one step against a pre-move
//!    snapshot of its leader and known obstacles (ascending id).
//! 4. **Vehicle steps** — each unit runs its protocol step (ascending id);
//!    emissions are sampled through the channel and logged immediately, in
//!    staging order.
//! 5. **Delivery** — queued transmissions with arrival strictly before the
//!    current tick are handed to receivers in (arrival, seq) order.
//!    Reactions (cascades) are sampled and logged at their trigger's
//!    arrival time; reliable zero-latency reactions are processed within
//!    the same loop.
//! 6. **Node periodics** — each node scans ground truth for detections,
//!    sweeps expired records, and emits broadcasts, staged notices, and
//!    neighbor syncs (ascending id).
//! 7. **Time signals** — on the sync period every device resamples its
//!    clock correction (one draw each, nodes before vehicles, ascending).
//! 8. **Invariants & trace** — ownership uniqueness and motion sanity are
//!    asserted; an optional trace row is recorded.
//!
//! All randomness flows through one seeded ChaCha stream in the order
//! above, which is what makes identical (scenario, seed) runs
//! byte-identical.

pub mod config;
pub mod kinematics;
pub mod log;
pub mod metrics;
pub mod replay;

use crate::channel::{sample_delivery, TechProfile, Transmission};
use crate::deployment::{plan_deployment, DeploymentPlan, PlanError};
use crate::globalview::{
    CloudRegistry, Directory, GlobalView, GroundTruthEvent, RegistryError,
};
use crate::protocol::{
    LinkPhase, Message, MessageBody, Outgoing, Address, ProtocolParams, RsmuState, VehicleRecord,
    VehicleStatus, ViuState,
};
use crate::sim::config::{ConfigError, ResolvedVehicle, ScenarioConfig};
use crate::sim::kinematics::{step_vehicle, LeaderView, VehicleKinematics};
use crate::sim::log::{ChannelClass, LogBody, LogRecord, TraceRow, VehicleTrace, Verdict};
use crate::sim::metrics::MetricsReport;
use crate::timesync::init_clock;
use crate::topology::{radio_distance, RoadNetwork, RoadPosition, TopologyError};
use crate::types::{micros_to_ms, Endpoint, Micros, RsmuId, VehicleId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("deployment: {0}")]
    Plan(#[from] PlanError),
    #[error("geometry: {0}")]
    Topology(#[from] TopologyError),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invariant breach at t={t_us} us: {what}")]
    Invariant { t_us: Micros, what: String },
}

/// What the engine should produce besides running the protocol.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stream the transmission log to this file (JSON lines).
    pub log_path: Option<PathBuf>,
    /// Stream per-tick fleet state to this file (JSON lines).
    pub trace_path: Option<PathBuf>,
    /// Keep the log records in memory on the output.
    pub keep_records: bool,
    /// Keep the trace rows in memory on the output.
    pub keep_trace: bool,
    /// Compute the metrics report (implies keeping records internally).
    pub collect_metrics: bool,
    /// Additionally require that every *linked* vehicle is managed
    /// somewhere. This holds when radio coverage matches the deployment
    /// (it cannot hold through hard radio dead zones), so it is opt-in.
    pub require_linked_owner: bool,
}

impl RunOptions {
    pub fn in_memory() -> Self {
        RunOptions {
            keep_records: true,
            collect_metrics: true,
            ..RunOptions::default()
        }
    }
}

/// Counts the engine maintains natively while running; the finished report
/// must agree with them exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct NativeCounters {
    pub attempted_v2i: u64,
    pub delivered_v2i: u64,
    pub backhaul_sends: u64,
    pub cloud_records: u64,
    pub internal_records: u64,
    pub handover_releases: u64,
    pub departures: u64,
    pub vehicles_activated: u64,
    pub deliveries_processed: u64,
    pub detections: u64,
    pub clearances: u64,
    pub self_healing_admits: u64,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct RunOutput {
    pub report: Option<MetricsReport>,
    /// Every node's merged view at the end of the run.
    pub final_views: BTreeMap<RsmuId, GlobalView>,
    /// Every node's vehicle table at the end of the run.
    pub final_tables: BTreeMap<RsmuId, BTreeMap<VehicleId, VehicleRecord>>,
    /// SHA-256 over the exact log bytes; absent when nothing required
    /// serializing the log.
    pub digest_sha256: Option<String>,
    pub records: Option<Vec<LogRecord>>,
    pub trace: Option<Vec<TraceRow>>,
    pub native: NativeCounters,
    pub plan: DeploymentPlan,
}

/// One queued transmission awaiting its arrival instant.
#[derive(Debug, Clone)]
struct PendingDelivery {
    arrival_us: Micros,
    seq: u64,
    receiver: Endpoint,
    message: Message,
}

impl PartialEq for PendingDelivery {
    fn eq(&self, other: &Self) -> bool {
        self.arrival_us == other.arrival_us && self.seq == other.seq
    }
}
impl Eq for PendingDelivery {}
impl PartialOrd for PendingDelivery {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingDelivery {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.arrival_us, self.seq).cmp(&(other.arrival_us, other.seq))
    }
}

fn classify(sender: Endpoint, receiver: Endpoint) -> ChannelClass {
    match (sender, receiver) {
        (Endpoint::Cloud, _) | (_, Endpoint::Cloud) => ChannelClass::Cloud,
        (Endpoint::Rsmu(_), Endpoint::Rsmu(_)) => ChannelClass::Backhaul,
        _ => ChannelClass::V2i,
    }
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    options: &'a RunOptions,
    network: RoadNetwork,
    profile: TechProfile,
    protocol: ProtocolParams,
    tick_us: Micros,
    end_us: Micros,
    rng: ChaCha8Rng,
    rsmus: BTreeMap<RsmuId, RsmuState>,
    vius: BTreeMap<VehicleId, ViuState>,
    kins: BTreeMap<VehicleId, VehicleKinematics>,
    /// Last known position of every vehicle ever activated; survives
    /// departure so late transmissions still have geometry.
    last_position: BTreeMap<VehicleId, RoadPosition>,
    pending: BinaryHeap<std::cmp::Reverse<PendingDelivery>>,
    entrants: Vec<ResolvedVehicle>,
    next_entrant: usize,
    /// Managed-vehicle density per node, cached at tick start.
    density: BTreeMap<RsmuId, f64>,
    ground_truth: Vec<GroundTruthEvent>,
    seq: u64,
    hashing: bool,
    hasher: Sha256,
    log_file: Option<std::io::BufWriter<std::fs::File>>,
    records: Option<Vec<LogRecord>>,
    trace_file: Option<std::io::BufWriter<std::fs::File>>,
    trace: Option<Vec<TraceRow>>,
    native: NativeCounters,
}

impl<'a> Engine<'a> {
    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    fn log(&mut self, record: LogRecord) -> Result<(), SimError> {
        match record.channel {
            ChannelClass::Cloud => self.native.cloud_records += 1,
            ChannelClass::Internal => self.native.internal_records += 1,
            _ => {}
        }
        if self.hashing {
            let mut line = serde_json::to_string(&record).expect("log records serialize");
            line.push('\n');
            self.hasher.update(line.as_bytes());
            if let Some(file) = &mut self.log_file {
                file.write_all(line.as_bytes())?;
            }
        }
        if let Some(records) = &mut self.records {
            records.push(record);
        }
        Ok(())
    }

    fn device_time(&self, endpoint: Endpoint, now_us: Micros) -> f64 {
        match endpoint {
            Endpoint::Viu(id) => self
                .vius
                .get(&id)
                .map(|v| v.clock.local_time(now_us))
                .unwrap_or_else(|| micros_to_ms(now_us)),
            Endpoint::Rsmu(id) => self
                .rsmus
                .get(&id)
                .map(|r| r.clock.local_time(now_us))
                .unwrap_or_else(|| micros_to_ms(now_us)),
            Endpoint::Cloud => micros_to_ms(now_us),
        }
    }

    fn position_of(&self, vehicle: VehicleId) -> Option<RoadPosition> {
        self.kins
            .get(&vehicle)
            .map(|k| k.position)
            .or_else(|| self.last_position.get(&vehicle).copied())
    }

    /// Summarize bulky payloads for the log; everything else mirrors the
    /// wire body.
    fn log_body(&self, sender: Endpoint, body: &MessageBody, device_ts_ms: f64) -> LogBody {
        match body {
            MessageBody::StatusUpdate { status, intent } => LogBody::StatusUpdate {
                status: status.clone(),
                intent: *intent,
            },
            MessageBody::LinkRequest {
                mode,
                handover_from,
                status,
                intent,
            } => LogBody::LinkRequest {
                mode: *mode,
                handover_from: *handover_from,
                status: status.clone(),
                intent: *intent,
            },
            MessageBody::LinkAccept => LogBody::LinkAccept,
            MessageBody::LinkRelease { handoff_to } => LogBody::LinkRelease {
                handoff_to: *handoff_to,
            },
            MessageBody::ViewBroadcast { view } => {
                let max_own_age_ms = match sender {
                    Endpoint::Rsmu(id) => self
                        .rsmus
                        .get(&id)
                        .and_then(|r| r.own_table_staleness_ms(device_ts_ms)),
                    _ => None,
                };
                LogBody::ViewBroadcast {
                    view_ts_ms: view.view_ts_ms,
                    vehicle_count: view.vehicles.len() as u64,
                    event_count: view.events.len() as u64,
                    max_own_age_ms,
                }
            }
            MessageBody::NeighborSync { delta } => LogBody::NeighborSync {
                delta: delta.clone(),
            },
            MessageBody::EventNotice { event } => LogBody::EventNotice {
                event: event.clone(),
            },
            MessageBody::RegistrySnapshot { directory, infra } => LogBody::RegistrySnapshot {
                version: directory.version,
                entry_count: directory.entries.len() as u64,
                infra: infra.clone(),
                own_entry: None,
            },
        }
    }

    /// Sample, log, and queue one transmission.
    fn transmit(
        &mut self,
        sender: Endpoint,
        receiver: Endpoint,
        body: MessageBody,
        send_us: Micros,
    ) -> Result<(), SimError> {
        let class = classify(sender, receiver);
        let device_ts_ms = self.device_time(sender, send_us);
        let log_body = self.log_body(sender, &body, device_ts_ms);
        match class {
            ChannelClass::V2i => {
                let (vehicle, node) = match (sender, receiver) {
                    (Endpoint::Viu(v), Endpoint::Rsmu(r)) | (Endpoint::Rsmu(r), Endpoint::Viu(v)) => {
                        (v, r)
                    }
                    _ => {
                        return Err(SimError::Invariant {
                            t_us: send_us,
                            what: format!("unroutable pair {sender:?} -> {receiver:?}"),
                        })
                    }
                };
                let vehicle_pos = self.position_of(vehicle).ok_or(SimError::Invariant {
                    t_us: send_us,
                    what: format!("no position for vehicle {vehicle}"),
                })?;
                let node_point = self
                    .rsmus
                    .get(&node)
                    .map(|r| r.spec.position)
                    .ok_or(SimError::Invariant {
                        t_us: send_us,
                        what: format!("unknown node {node}"),
                    })?;
                let distance_m = radio_distance(self.network.embed(&vehicle_pos), node_point);
                let density_per_km = self.density.get(&node).copied().unwrap_or(0.0);
                let tx = Transmission {
                    sender,
                    receiver,
                    distance_m,
                    density_per_km,
                    send_us,
                };
                let outcome = sample_delivery(&self.profile, &tx, &mut self.rng);
                self.native.attempted_v2i += 1;
                if outcome.delivered {
                    self.native.delivered_v2i += 1;
                }
                if matches!(&body, MessageBody::LinkRelease { handoff_to: Some(_) })
                    && matches!(sender, Endpoint::Viu(_))
                {
                    self.native.handover_releases += 1;
                }
                let seq = self.next_seq();
                self.log(LogRecord {
                    seq,
                    send_us,
                    arrival_us: outcome.arrival_us,
                    verdict: if outcome.delivered {
                        Verdict::Delivered
                    } else {
                        Verdict::Dropped
                    },
                    channel: class,
                    sender,
                    receiver,
                    distance_m,
                    density_per_km,
                    loss_p: outcome.loss_probability,
                    device_ts_ms,
                    body: log_body,
                })?;
                if let Some(arrival_us) = outcome.arrival_us {
                    self.pending.push(std::cmp::Reverse(PendingDelivery {
                        arrival_us,
                        seq,
                        receiver,
                        message: Message {
                            sender,
                            device_ts_ms,
                            body,
                        },
                    }));
                }
            }
            ChannelClass::Backhaul => {
                // Wired node-to-node link: reliable, effectively immediate
                // at tick granularity.
                let a = self.rsmu_point(sender, send_us)?;
                let b = self.rsmu_point(receiver, send_us)?;
                self.native.backhaul_sends += 1;
                let seq = self.next_seq();
                self.log(LogRecord {
                    seq,
                    send_us,
                    arrival_us: Some(send_us),
                    verdict: Verdict::Delivered,
                    channel: class,
                    sender,
                    receiver,
                    distance_m: a.distance(b),
                    density_per_km: 0.0,
                    loss_p: 0.0,
                    device_ts_ms,
                    body: log_body,
                })?;
                self.pending.push(std::cmp::Reverse(PendingDelivery {
                    arrival_us: send_us,
                    seq,
                    receiver,
                    message: Message {
                        sender,
                        device_ts_ms,
                        body,
                    },
                }));
            }
            ChannelClass::Cloud | ChannelClass::Internal => {
                return Err(SimError::Invariant {
                    t_us: send_us,
                    what: format!("state machines cannot address {receiver:?}"),
                })
            }
        }
        Ok(())
    }

    fn rsmu_point(&self, endpoint: Endpoint, t_us: Micros) -> Result<crate::topology::Point, SimError> {
        match endpoint {
            Endpoint::Rsmu(id) => {
                self.rsmus
                    .get(&id)
                    .map(|r| r.spec.position)
                    .ok_or(SimError::Invariant {
                        t_us,
                        what: format!("unknown node {id}"),
                    })
            }
            other => Err(SimError::Invariant {
                t_us,
                what: format!("expected a node endpoint, got {other:?}"),
            }),
        }
    }

    /// Route staged emissions. Broadcast addresses fan out to every node
    /// in radio range of the sending vehicle, ascending id.
    fn dispatch(
        &mut self,
        sender: Endpoint,
        outgoing: Vec<Outgoing>,
        send_us: Micros,
    ) -> Result<(), SimError> {
        for out in outgoing {
            match out.to {
                Address::To(receiver) => self.transmit(sender, receiver, out.body, send_us)?,
                Address::BroadcastRsmus => {
                    let vehicle = match sender {
                        Endpoint::Viu(v) => v,
                        other => {
                            return Err(SimError::Invariant {
                                t_us: send_us,
                                what: format!("broadcast from non-vehicle {other:?}"),
                            })
                        }
                    };
                    let pos = self.position_of(vehicle).ok_or(SimError::Invariant {
                        t_us: send_us,
                        what: format!("no position for vehicle {vehicle}"),
                    })?;
                    let point = self.network.embed(&pos);
                    let in_range: Vec<RsmuId> = self
                        .rsmus
                        .values()
                        .filter(|r| radio_distance(point, r.spec.position) <= r.spec.comm_range_m)
                        .map(|r| r.spec.id)
                        .collect();
                    for node in in_range {
                        self.transmit(sender, Endpoint::Rsmu(node), out.body.clone(), send_us)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Bring pending vehicles to life: clock first (two draws), then a
    /// synchronous, logged directory prefetch, then protocol and motion
    /// state.
    fn activate_entrants(&mut self, now_us: Micros, registry: &CloudRegistry) -> Result<(), SimError> {
        while self.next_entrant < self.entrants.len()
            && self.entrants[self.next_entrant].entry_us <= now_us
        {
            let rv = self.entrants[self.next_entrant].clone();
            self.next_entrant += 1;
            let clock = init_clock(&self.cfg.timesync, now_us, &mut self.rng);
            let directory = if rv.prefetch {
                let route = self
                    .rsmus
                    .values()
                    .filter(|r| r.spec.carriageway == rv.carriageway)
                    .map(|r| r.spec.id)
                    .collect::<Vec<_>>();
                let directory = registry.prefetch(&route)?;
                let seq = self.next_seq();
                self.log(LogRecord {
                    seq,
                    send_us: now_us,
                    arrival_us: Some(now_us),
                    verdict: Verdict::Delivered,
                    channel: ChannelClass::Cloud,
                    sender: Endpoint::Cloud,
                    receiver: Endpoint::Viu(rv.id),
                    distance_m: 0.0,
                    density_per_km: 0.0,
                    loss_p: 0.0,
                    device_ts_ms: micros_to_ms(now_us),
                    body: LogBody::RegistrySnapshot {
                        version: directory.version,
                        entry_count: directory.entries.len() as u64,
                        infra: Vec::new(),
                        own_entry: None,
                    },
                })?;
                directory
            } else {
                Directory::default()
            };
            let viu = ViuState::new(rv.id, rv.carriageway, clock, directory, rv.intent);
            let kin = VehicleKinematics::new(rv.position, rv.desired_speed_mps, rv.route);
            self.last_position.insert(rv.id, rv.position);
            self.vius.insert(rv.id, viu);
            self.kins.insert(rv.id, kin);
            self.native.vehicles_activated += 1;
        }
        Ok(())
    }

    fn recompute_density(&mut self) {
        self.density = self
            .rsmus
            .iter()
            .map(|(id, r)| (*id, r.density_per_km()))
            .collect();
    }

    /// Move every vehicle one step against a pre-move snapshot.
    fn step_kinematics(&mut self, now_us: Micros) -> Result<(), SimError> {
        #[derive(Clone, Copy)]
        struct Snap {
            id: VehicleId,
            position: RoadPosition,
            speed_mps: f64,
        }
        let snapshot: Vec<Snap> = self
            .kins
            .iter()
            .map(|(id, k)| Snap {
                id: *id,
                position: k.position,
                speed_mps: k.speed_mps,
            })
            .collect();

        let leader_of = |me: &Snap| -> Option<LeaderView> {
            let sign = me.position.carriageway.sign();
            let mut best: Option<LeaderView> = None;
            for other in &snapshot {
                if other.id == me.id || other.position.carriageway != me.position.carriageway {
                    continue;
                }
                let gap = match (&me.position.on_ramp, &other.position.on_ramp) {
                    (None, None) => {
                        (other.position.station_m - me.position.station_m) * sign
                    }
                    (Some(a), Some(b)) if a.junction == b.junction => {
                        b.progress_m - a.progress_m
                    }
                    _ => continue,
                };
                if gap > 0.0 && best.is_none_or(|b| gap < b.gap_m) {
                    best = Some(LeaderView {
                        gap_m: gap,
                        speed_mps: other.speed_mps,
                    });
                }
            }
            best
        };

        let ids: Vec<VehicleId> = self.kins.keys().copied().collect();
        for id in ids {
            let me = snapshot
                .iter()
                .find(|s| s.id == id)
                .copied()
                .expect("snapshot covers all vehicles");
            let leader = leader_of(&me);

            // Hazards ahead: events this unit was told about, plus active
            // events close enough to see directly.
            let sign = me.position.carriageway.sign();
            let station = me.position.effective_station();
            let mut hazard_stations: Vec<f64> = self
                .vius
                .get(&id)
                .map(|v| v.notified_obstacles())
                .unwrap_or_default();
            let my_point = self.network.embed(&me.position);
            for gt in &self.ground_truth {
                if gt.active_at(now_us)
                    && gt.position.carriageway == me.position.carriageway
                    && radio_distance(my_point, self.network.embed(&gt.position))
                        <= self.cfg.perception_radius_m
                {
                    hazard_stations.push(gt.position.effective_station());
                }
            }
            let gaps: Vec<f64> = hazard_stations
                .iter()
                .map(|s| (s - station) * sign)
                .filter(|g| *g > 0.0)
                .collect();

            let kin = self.kins.get_mut(&id).expect("vehicle exists");
            step_vehicle(
                kin,
                leader,
                &gaps,
                &self.cfg.driving,
                &self.network,
                micros_to_ms(self.tick_us) / 1_000.0,
            )?;
            let position = kin.position;
            self.last_position.insert(id, position);
        }
        Ok(())
    }

    /// Run every vehicle's protocol step; departures release and vanish.
    fn step_vehicles(&mut self, now_us: Micros) -> Result<(), SimError> {
        let ids: Vec<VehicleId> = self.vius.keys().copied().collect();
        for id in ids {
            let arrived = self.kins.get(&id).map(|k| k.arrived).unwrap_or(true);
            if arrived {
                let out = self
                    .vius
                    .get_mut(&id)
                    .map(|v| v.depart())
                    .unwrap_or_default();
                self.dispatch(Endpoint::Viu(id), out, now_us)?;
                self.vius.remove(&id);
                self.kins.remove(&id);
                self.native.departures += 1;
                continue;
            }
            let kin = self.kins.get(&id).expect("active vehicle has motion state");
            let (position, speed, accel, braking) = (
                kin.position,
                kin.speed_mps,
                kin.acceleration_mps2,
                kin.braking(),
            );
            let viu = self.vius.get_mut(&id).expect("listed vehicle exists");
            let status = VehicleStatus {
                position,
                speed_mps: speed,
                heading: position.carriageway,
                acceleration_mps2: accel,
                braking,
                steering_angle_deg: if position.on_ramp.is_some() { 8.0 } else { 0.0 },
                device_ts_ms: viu.clock.local_time(now_us),
            };
            let out = viu.step(now_us, status, &self.network, &self.protocol);
            self.dispatch(Endpoint::Viu(id), out, now_us)?;
        }
        Ok(())
    }

    /// Deliver everything that arrived strictly before `now`. Receivers
    /// react immediately; reactions are stamped at the trigger's arrival.
    fn deliver_due(&mut self, now_us: Micros) -> Result<(), SimError> {
        loop {
            let due = matches!(
                self.pending.peek(),
                Some(std::cmp::Reverse(p)) if p.arrival_us < now_us
            );
            if !due {
                break;
            }
            let std::cmp::Reverse(delivery) = self.pending.pop().expect("peeked entry");
            self.native.deliveries_processed += 1;
            match delivery.receiver {
                Endpoint::Rsmu(id) => {
                    let out = match self.rsmus.get_mut(&id) {
                        Some(node) => node.handle(
                            delivery.message.sender,
                            delivery.message.body,
                            delivery.arrival_us,
                        ),
                        None => Vec::new(),
                    };
                    self.dispatch(Endpoint::Rsmu(id), out, delivery.arrival_us)?;
                }
                Endpoint::Viu(id) => {
                    if let Some(viu) = self.vius.get_mut(&id) {
                        viu.handle(delivery.message.sender, delivery.message.body);
                    }
                }
                Endpoint::Cloud => {}
            }
        }
        Ok(())
    }

    /// Node periodic phase: ground-truth sensing, then protocol tick.
    fn step_nodes(&mut self, now_us: Micros) -> Result<(), SimError> {
        let ids: Vec<RsmuId> = self.rsmus.keys().copied().collect();
        for id in ids {
            let node = self.rsmus.get_mut(&id).expect("listed node exists");
            let changes = node.detect_events(now_us, &self.ground_truth, self.cfg.detection_delay_ms);
            let device_ts_ms = node.clock.local_time(now_us);
            for event in changes {
                if event.cleared_ms.is_some() {
                    self.native.clearances += 1;
                } else {
                    self.native.detections += 1;
                }
                let seq = self.next_seq();
                self.log(LogRecord {
                    seq,
                    send_us: now_us,
                    arrival_us: Some(now_us),
                    verdict: Verdict::Delivered,
                    channel: ChannelClass::Internal,
                    sender: Endpoint::Rsmu(id),
                    receiver: Endpoint::Rsmu(id),
                    distance_m: 0.0,
                    density_per_km: self.density.get(&id).copied().unwrap_or(0.0),
                    loss_p: 0.0,
                    device_ts_ms,
                    body: LogBody::EventNotice { event },
                })?;
            }
            let out = self
                .rsmus
                .get_mut(&id)
                .expect("listed node exists")
                .tick(now_us, &self.protocol);
            self.dispatch(Endpoint::Rsmu(id), out, now_us)?;
        }
        Ok(())
    }

    fn apply_time_signals(&mut self, now_us: Micros) {
        if !crate::protocol::period_due(now_us, self.cfg.timesync.signal_period_s * 1_000.0) {
            return;
        }
        for node in self.rsmus.values_mut() {
            node.clock.apply_time_signal(now_us, &mut self.rng);
        }
        for viu in self.vius.values_mut() {
            viu.clock.apply_time_signal(now_us, &mut self.rng);
        }
    }

    fn check_invariants(&self, t_us: Micros) -> Result<(), SimError> {
        let mut owners: BTreeMap<VehicleId, Vec<RsmuId>> = BTreeMap::new();
        for (rid, node) in &self.rsmus {
            for (vid, record) in &node.vehicles {
                if record.phase == LinkPhase::Owned {
                    owners.entry(*vid).or_default().push(*rid);
                }
            }
        }
        for (vid, list) in &owners {
            if list.len() > 1 {
                return Err(SimError::Invariant {
                    t_us,
                    what: format!("vehicle {vid} managed by multiple nodes: {list:?}"),
                });
            }
        }
        if self.options.require_linked_owner {
            for (vid, viu) in &self.vius {
                if viu.owner().is_some() && owners.get(vid).map_or(0, Vec::len) != 1 {
                    return Err(SimError::Invariant {
                        t_us,
                        what: format!("linked vehicle {vid} has no managing record"),
                    });
                }
            }
        }
        let length = self.network.mainline_length_m();
        for (vid, kin) in &self.kins {
            let st = kin.position.station_m;
            if !(0.0..=length).contains(&st) || kin.speed_mps < 0.0 {
                return Err(SimError::Invariant {
                    t_us,
                    what: format!(
                        "vehicle {vid} out of bounds: station {st} m, speed {} m/s",
                        kin.speed_mps
                    ),
                });
            }
        }
        Ok(())
    }

    fn record_trace(&mut self, t_us: Micros) -> Result<(), SimError> {
        if self.trace_file.is_none() && self.trace.is_none() {
            return Ok(());
        }
        let vehicles: Vec<VehicleTrace> = self
            .kins
            .iter()
            .map(|(id, k)| VehicleTrace {
                id: *id,
                carriageway: k.position.carriageway,
                station_m: k.position.station_m,
                on_ramp: k.position.on_ramp.is_some(),
                speed_mps: k.speed_mps,
                acceleration_mps2: k.acceleration_mps2,
                link: self
                    .vius
                    .get(id)
                    .map(|v| v.link)
                    .unwrap_or(crate::protocol::LinkMode::Unlinked),
            })
            .collect();
        let managed = self
            .rsmus
            .iter()
            .map(|(id, r)| (*id, r.owned_count() as u64))
            .collect();
        let row = TraceRow {
            t_us,
            vehicles,
            managed,
        };
        if let Some(file) = &mut self.trace_file {
            let mut line = serde_json::to_string(&row).expect("trace rows serialize");
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        if let Some(rows) = &mut self.trace {
            rows.push(row);
        }
        Ok(())
    }
}

/// Execute a validated scenario to completion.
pub fn run(cfg: &ScenarioConfig, options: &RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let seed = cfg.seed.expect("validated config has a seed");
    let network = cfg.network().expect("validated geometry builds");
    let profile = cfg.profile().expect("validated channel resolves");
    let plan = plan_deployment(&network, &cfg.deployment)?;

    let mut registry = CloudRegistry::default();
    for node in &plan.nodes {
        registry.publish(node)?;
    }
    let full_directory = registry.prefetch(&plan.nodes.iter().map(|n| n.id).collect::<Vec<_>>())?;
    let infra = cfg.infra_records();

    let keep_records = options.keep_records || options.collect_metrics;
    let hashing = keep_records || options.log_path.is_some();
    let mut engine = Engine {
        cfg,
        options,
        profile,
        protocol: cfg.protocol.clone(),
        tick_us: cfg.tick_us(),
        end_us: (cfg.duration_us() / cfg.tick_us()) * cfg.tick_us(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        rsmus: BTreeMap::new(),
        vius: BTreeMap::new(),
        kins: BTreeMap::new(),
        last_position: BTreeMap::new(),
        pending: BinaryHeap::new(),
        entrants: cfg.resolved_vehicles(&network),
        next_entrant: 0,
        density: BTreeMap::new(),
        ground_truth: cfg.ground_truth(),
        seq: 0,
        hashing,
        hasher: Sha256::new(),
        log_file: match &options.log_path {
            Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            None => None,
        },
        records: keep_records.then(Vec::new),
        trace_file: match &options.trace_path {
            Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            None => None,
        },
        trace: options.keep_trace.then(Vec::new),
        native: NativeCounters::default(),
        network,
    };

    // Header first: everything needed to interpret the rest of the log.
    let header_seq = engine.next_seq();
    engine.log(LogRecord {
        seq: header_seq,
        send_us: 0,
        arrival_us: Some(0),
        verdict: Verdict::Delivered,
        channel: ChannelClass::Internal,
        sender: Endpoint::Cloud,
        receiver: Endpoint::Cloud,
        distance_m: 0.0,
        density_per_km: 0.0,
        loss_p: 0.0,
        device_ts_ms: 0.0,
        body: LogBody::RunHeader {
            schema_version: 1,
            scenario: cfg.name.clone(),
            seed,
            tick_ms: cfg.tick_ms,
            duration_s: cfg.duration_s,
            profile: engine.profile.name.clone(),
            perception_radius_m: cfg.perception_radius_m,
            detection_delay_ms: cfg.detection_delay_ms,
            protocol: cfg.protocol.clone(),
            timesync: cfg.timesync,
            ground_truth: engine.ground_truth.clone(),
        },
    })?;

    // Node boot: clocks (two draws each, ascending id), then a logged
    // registry snapshot handing each node the directory and the static
    // infrastructure records.
    for spec in &plan.nodes {
        let clock = init_clock(&cfg.timesync, 0, &mut engine.rng);
        let mut node = RsmuState::new(spec.clone(), clock);
        node.boot(full_directory.clone(), infra.clone());
        engine.rsmus.insert(spec.id, node);
    }
    let boot_ids: Vec<RsmuId> = engine.rsmus.keys().copied().collect();
    for id in boot_ids {
        let device_ts_ms = engine.rsmus[&id].clock.local_time(0);
        let own_entry = full_directory.entries.get(&id).cloned();
        let seq = engine.next_seq();
        engine.log(LogRecord {
            seq,
            send_us: 0,
            arrival_us: Some(0),
            verdict: Verdict::Delivered,
            channel: ChannelClass::Cloud,
            sender: Endpoint::Cloud,
            receiver: Endpoint::Rsmu(id),
            distance_m: 0.0,
            density_per_km: 0.0,
            loss_p: 0.0,
            device_ts_ms,
            body: LogBody::RegistrySnapshot {
                version: full_directory.version,
                entry_count: full_directory.entries.len() as u64,
                infra: infra.clone(),
                own_entry,
            },
        })?;
    }

    let mut t = 0;
    while t <= engine.end_us {
        engine.activate_entrants(t, &registry)?;
        engine.recompute_density();
        engine.step_kinematics(t)?;
        engine.step_vehicles(t)?;
        engine.deliver_due(t)?;
        engine.step_nodes(t)?;
        engine.apply_time_signals(t);
        engine.check_invariants(t)?;
        engine.record_trace(t)?;
        t += engine.tick_us;
    }

    if let Some(file) = &mut engine.log_file {
        file.flush()?;
    }
    if let Some(file) = &mut engine.trace_file {
        file.flush()?;
    }

    engine.native.self_healing_admits = engine
        .rsmus
        .values()
        .map(|r| r.self_healing_admits)
        .sum();

    let digest_sha256 = hashing.then(|| hex::encode(engine.hasher.clone().finalize()));
    let final_views: BTreeMap<RsmuId, GlobalView> = engine
        .rsmus
        .iter()
        .map(|(id, r)| (*id, r.view.clone()))
        .collect();
    let final_tables: BTreeMap<RsmuId, BTreeMap<VehicleId, VehicleRecord>> = engine
        .rsmus
        .iter()
        .map(|(id, r)| (*id, r.vehicles.clone()))
        .collect();

    let report = if options.collect_metrics {
        let records = engine.records.as_deref().expect("metrics imply records");
        let digest = digest_sha256.clone().expect("metrics imply hashing");
        let report = metrics::collect_metrics(records, &digest).map_err(|e| SimError::Invariant {
            t_us: engine.end_us,
            what: format!("metrics over own log failed: {e}"),
        })?;
        cross_check(&report, &engine.native, engine.end_us)?;
        Some(report)
    } else {
        None
    };

    let records = if options.keep_records {
        engine.records.take()
    } else {
        None
    };
    Ok(RunOutput {
        report,
        final_views,
        final_tables,
        digest_sha256,
        records,
        trace: engine.trace.take(),
        native: engine.native,
        plan,
    })
}

/// The report recomputed from the log must agree with the engine's native
/// counters; any gap means the log or the derivations are wrong.
fn cross_check(report: &MetricsReport, native: &NativeCounters, end_us: Micros) -> Result<(), SimError> {
    let breach = |what: String| SimError::Invariant { t_us: end_us, what };
    let v2i = report.channels.get("v2i");
    let (attempted, delivered) = v2i
        .map(|c| (c.attempted, c.delivered))
        .unwrap_or((0, 0));
    if attempted != native.attempted_v2i || delivered != native.delivered_v2i {
        return Err(breach(format!(
            "v2i counts diverge: log {attempted}/{delivered}, engine {}/{}",
            native.attempted_v2i, native.delivered_v2i
        )));
    }
    if report.handovers.total != native.handover_releases {
        return Err(breach(format!(
            "handover counts diverge: log {}, engine {}",
            report.handovers.total, native.handover_releases
        )));
    }
    if report.handovers.self_healing_admits != native.self_healing_admits {
        return Err(breach(format!(
            "self-healing counts diverge: log {}, engine {}",
            report.handovers.self_healing_admits, native.self_healing_admits
        )));
    }
    let detected = report.events.iter().filter(|e| e.detected_delay_ms.is_some()).count() as u64;
    let cleared = report.events.iter().filter(|e| e.cleared).count() as u64;
    if detected != native.detections || cleared != native.clearances {
        return Err(breach(format!(
            "event counts diverge: log {detected}/{cleared}, engine {}/{}",
            native.detections, native.clearances
        )));
    }
    Ok(())
}
