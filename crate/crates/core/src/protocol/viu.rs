//! Vehicle-side link state machine.
//!
//! The unit tracks exactly one managing node at a time, plus a second
//! pending link while inside the pre-handover window. All geometry
//! decisions are direction-aware: the outbound boundary of a stretch is its
//! far end for forward travel and its near end for reverse travel.

use crate::globalview::{AbnormalEvent, Directory, GlobalView, RegistryEntry};
use crate::protocol::message::{Address, LinkRequestMode, MessageBody, Outgoing};
use crate::protocol::{DrivingIntent, ProtocolParams, VehicleStatus};
use crate::timesync::ClockState;
use crate::topology::{radio_distance, RoadNetwork};
use crate::types::{Direction, Endpoint, EventId, Micros, RsmuId, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which links the unit currently holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    Unlinked,
    Single(RsmuId),
    /// Pre-handover window: still reporting to `current`, admitted (or
    /// being admitted) at `next`.
    Dual { current: RsmuId, next: RsmuId },
}

impl LinkMode {
    /// The node this unit reports to, if any.
    pub fn owner(&self) -> Option<RsmuId> {
        match self {
            LinkMode::Unlinked => None,
            LinkMode::Single(id) => Some(*id),
            LinkMode::Dual { current, .. } => Some(*current),
        }
    }
}

/// Vehicle onboard unit state.
#[derive(Debug, Clone)]
pub struct ViuState {
    pub id: VehicleId,
    pub heading: Direction,
    pub link: LinkMode,
    /// Direction-aware distance traveled into the current owner's stretch.
    pub progress_m: f64,
    pub clock: ClockState,
    pub directory: Directory,
    /// Latest delivered view, kept by newest view timestamp.
    pub last_view: Option<GlobalView>,
    /// Events learned through delivered notices; sensing is handled by the
    /// driving model, not stored here.
    pub known_events: BTreeMap<EventId, AbnormalEvent>,
    pub intent: DrivingIntent,
    last_status: Option<VehicleStatus>,
    /// Next-node id still awaiting a pre-admission accept; retried each
    /// report period.
    pending_next_accept: Option<RsmuId>,
    /// Forces a status report outside the periodic schedule (set when a
    /// boundary is crossed so the new owner hears from us immediately).
    force_report: bool,
}

impl ViuState {
    pub fn new(
        id: VehicleId,
        heading: Direction,
        clock: ClockState,
        directory: Directory,
        intent: DrivingIntent,
    ) -> Self {
        ViuState {
            id,
            heading,
            link: LinkMode::Unlinked,
            progress_m: 0.0,
            clock,
            directory,
            last_view: None,
            known_events: BTreeMap::new(),
            intent,
            last_status: None,
            pending_next_accept: None,
            force_report: false,
        }
    }

    pub fn owner(&self) -> Option<RsmuId> {
        self.link.owner()
    }

    pub fn last_status(&self) -> Option<&VehicleStatus> {
        self.last_status.as_ref()
    }

    /// Active events this unit has been notified about, as stations on its
    /// own carriageway.
    pub fn notified_obstacles(&self) -> Vec<f64> {
        let carriageway = match &self.last_status {
            Some(s) => s.position.carriageway,
            None => self.heading,
        };
        self.known_events
            .values()
            .filter(|e| e.is_active() && e.location.carriageway == carriageway)
            .map(|e| e.location.effective_station())
            .collect()
    }

    fn directory_entry(&self, id: RsmuId) -> Option<&RegistryEntry> {
        self.directory.entries.get(&id)
    }

    /// Direction-aware distances: how far into the stretch we are and how
    /// far to its outbound boundary.
    fn span_distances(entry: &RegistryEntry, heading: Direction, station: f64) -> (f64, f64) {
        let j = &entry.jurisdiction;
        match heading {
            Direction::Forward => (station - j.start_m, j.end_m - station),
            Direction::Reverse => (j.end_m - station, station - j.start_m),
        }
    }

    /// True once the station has left the stretch through its outbound side.
    fn crossed_out(entry: &RegistryEntry, heading: Direction, station: f64) -> bool {
        let j = &entry.jurisdiction;
        if j.contains(station) {
            return false;
        }
        match heading {
            Direction::Forward => station >= j.end_m,
            Direction::Reverse => station < j.start_m,
        }
    }

    /// The node owning the stretch just past the current one's outbound
    /// boundary, per the directory.
    fn next_owner(&self, entry: &RegistryEntry, carriageway: Direction) -> Option<RsmuId> {
        let probe = match self.heading {
            Direction::Forward => entry.jurisdiction.end_m + 0.5,
            Direction::Reverse => entry.jurisdiction.start_m - 0.5,
        };
        self.directory
            .owner_of(carriageway, probe)
            .map(|e| e.id)
            .filter(|id| *id != entry.id)
    }

    /// Per-tick protocol step. `status` is the fresh self-measurement
    /// (already stamped with this unit's device time). Emissions are
    /// ordered: releases, new pre-admissions, status reports, then retries
    /// and admission requests.
    pub fn step(
        &mut self,
        now_us: Micros,
        status: VehicleStatus,
        network: &RoadNetwork,
        params: &ProtocolParams,
    ) -> Vec<Outgoing> {
        let station = status.position.effective_station();
        let carriageway = status.position.carriageway;
        let mut out = Vec::new();
        let mut preadmitted_this_step = false;

        // Boundary crossing: release the old owner and adopt the new one.
        if let Some(cur) = self.link.owner() {
            if let Some(entry) = self.directory_entry(cur).cloned() {
                if Self::crossed_out(&entry, self.heading, station) {
                    let adopted = match self.link {
                        LinkMode::Dual { next, .. } => Some(next),
                        _ => self.next_owner(&entry, carriageway),
                    };
                    out.push(Outgoing::to_rsmu(
                        cur,
                        MessageBody::LinkRelease {
                            handoff_to: adopted,
                        },
                    ));
                    self.pending_next_accept = None;
                    match adopted {
                        Some(next) => {
                            self.link = LinkMode::Single(next);
                            self.force_report = true;
                        }
                        None => self.link = LinkMode::Unlinked,
                    }
                }
            }
        }

        // Pre-handover window: open the second link ahead of the boundary.
        if let LinkMode::Single(cur) = self.link {
            if let Some(entry) = self.directory_entry(cur).cloned() {
                let (progress, remaining) = Self::span_distances(&entry, self.heading, station);
                self.progress_m = progress.max(0.0);
                if remaining <= params.dual_link_distance_m {
                    if let Some(next) = self.next_owner(&entry, carriageway) {
                        self.link = LinkMode::Dual { current: cur, next };
                        self.pending_next_accept = Some(next);
                        preadmitted_this_step = true;
                        out.push(Outgoing::to_rsmu(
                            next,
                            MessageBody::LinkRequest {
                                mode: LinkRequestMode::PreAdmit,
                                handover_from: Some(cur),
                                status: status.clone(),
                                intent: self.intent,
                            },
                        ));
                    }
                }
            }
        } else if let LinkMode::Dual { current, .. } = self.link {
            if let Some(entry) = self.directory_entry(current) {
                let (progress, _) = Self::span_distances(entry, self.heading, station);
                self.progress_m = progress.max(0.0);
            }
        }

        let due = super::period_due(now_us, params.report_period_ms);

        match self.link.owner() {
            Some(owner) => {
                if due || self.force_report {
                    out.push(Outgoing::to_rsmu(
                        owner,
                        MessageBody::StatusUpdate {
                            status: status.clone(),
                            intent: self.intent,
                        },
                    ));
                    self.force_report = false;
                }
                // Retry a pre-admission that has not been accepted yet.
                if due && !preadmitted_this_step {
                    if let Some(next) = self.pending_next_accept {
                        out.push(Outgoing::to_rsmu(
                            next,
                            MessageBody::LinkRequest {
                                mode: LinkRequestMode::PreAdmit,
                                handover_from: Some(owner),
                                status: status.clone(),
                                intent: self.intent,
                            },
                        ));
                    }
                }
            }
            None if due => {
                let body = MessageBody::LinkRequest {
                    mode: LinkRequestMode::Exclusive,
                    handover_from: None,
                    status: status.clone(),
                    intent: self.intent,
                };
                match self.directory.owner_of(carriageway, station) {
                    Some(entry) => {
                        let here = network.embed(&status.position);
                        if radio_distance(here, entry.position) <= entry.comm_range_m {
                            out.push(Outgoing::to_rsmu(entry.id, body));
                        }
                    }
                    // No directory coverage: offer to whoever can hear us.
                    None => out.push(Outgoing {
                        to: Address::BroadcastRsmus,
                        body,
                    }),
                }
            }
            None => {}
        }

        self.last_status = Some(status);
        out
    }

    /// Final release when the vehicle leaves the road (mainline end or exit
    /// ramp end).
    pub fn depart(&mut self) -> Vec<Outgoing> {
        let out = match self.link.owner() {
            Some(owner) => vec![Outgoing::to_rsmu(
                owner,
                MessageBody::LinkRelease { handoff_to: None },
            )],
            None => Vec::new(),
        };
        self.link = LinkMode::Unlinked;
        self.pending_next_accept = None;
        out
    }

    /// Process a delivered message. Vehicle units never cascade emissions.
    pub fn handle(&mut self, sender: Endpoint, body: MessageBody) {
        match body {
            MessageBody::LinkAccept => {
                let from = match sender {
                    Endpoint::Rsmu(id) => id,
                    _ => return,
                };
                match self.link {
                    LinkMode::Unlinked => {
                        self.link = LinkMode::Single(from);
                    }
                    LinkMode::Dual { next, .. } if next == from => {
                        self.pending_next_accept = None;
                    }
                    _ => {}
                }
            }
            MessageBody::ViewBroadcast { view } => {
                let newer = self
                    .last_view
                    .as_ref()
                    .map(|v| view.view_ts_ms >= v.view_ts_ms)
                    .unwrap_or(true);
                if newer {
                    self.last_view = Some(view);
                }
            }
            MessageBody::EventNotice { event } => {
                let merged = match self.known_events.get(&event.id) {
                    Some(existing) => existing.merged_with(&event),
                    None => event,
                };
                self.known_events.insert(merged.id, merged);
            }
            MessageBody::RegistrySnapshot { directory, .. }
                if directory.version > self.directory.version
                    || self.directory.entries.is_empty() =>
            {
                self.directory = directory;
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deployment::{plan_deployment, DeploymentParams};
    use crate::globalview::CloudRegistry;
    use crate::topology::{GeometryConfig, RoadPosition};

    fn fixture() -> (RoadNetwork, Directory) {
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
        let route: Vec<RsmuId> = plan.carriageway_ids(Direction::Forward);
        let directory = registry.prefetch(&route).unwrap();
        (network, directory)
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

    fn viu(directory: Directory) -> ViuState {
        ViuState::new(
            VehicleId(0),
            Direction::Forward,
            ClockState::ideal(),
            directory,
            DrivingIntent::keep_lane(30.0),
        )
    }

    #[test]
    fn admission_waits_for_accept() {
        let (network, directory) = fixture();
        let params = ProtocolParams::default();
        let mut unit = viu(directory.clone());
        let owner = directory.owner_of(Direction::Forward, 10.0).unwrap().id;

        let out = unit.step(100_000, status_at(10.0, 100.0), &network, &params);
        assert_eq!(out.len(), 1);
        assert!(matches!(
            &out[0].body,
            MessageBody::LinkRequest { mode: LinkRequestMode::Exclusive, handover_from: None, .. }
        ));
        assert_eq!(unit.link, LinkMode::Unlinked);

        // Still unlinked next period: the request repeats until accepted.
        let out = unit.step(200_000, status_at(13.0, 200.0), &network, &params);
        assert_eq!(out.len(), 1);

        unit.handle(Endpoint::Rsmu(owner), MessageBody::LinkAccept);
        assert_eq!(unit.link, LinkMode::Single(owner));

        let out = unit.step(300_000, status_at(16.0, 300.0), &network, &params);
        assert_eq!(out.len(), 1);
        assert!(matches!(&out[0].body, MessageBody::StatusUpdate { .. }));
    }

    #[test]
    fn handover_opens_dual_link_then_releases_on_crossing() {
        let (network, directory) = fixture();
        let params = ProtocolParams::default();
        let mut unit = viu(directory.clone());
        let first = directory.owner_of(Direction::Forward, 10.0).unwrap().id;
        let second = directory.owner_of(Direction::Forward, 700.0).unwrap().id;
        unit.link = LinkMode::Single(first);

        // First stretch ends at 600; at 450 m the window is exactly open
        // (150 m remaining is inside the 200 m threshold).
        let out = unit.step(100_000, status_at(450.0, 100.0), &network, &params);
        assert_eq!(unit.link, LinkMode::Dual { current: first, next: second });
        let preadmits: Vec<_> = out
            .iter()
            .filter(|o| {
                matches!(
                    &o.body,
                    MessageBody::LinkRequest { mode: LinkRequestMode::PreAdmit, handover_from: Some(h), .. }
                    if *h == first
                )
            })
            .collect();
        assert_eq!(preadmits.len(), 1);
        assert_eq!(preadmits[0].to, Address::To(Endpoint::Rsmu(second)));
        // Status still goes to the current owner.
        assert!(out.iter().any(|o| matches!(&o.body, MessageBody::StatusUpdate { .. })
            && o.to == Address::To(Endpoint::Rsmu(first))));

        // Not yet accepted: the pre-admission repeats next period.
        let out = unit.step(200_000, status_at(453.0, 200.0), &network, &params);
        assert!(out.iter().any(|o| matches!(&o.body, MessageBody::LinkRequest { .. })));
        unit.handle(Endpoint::Rsmu(second), MessageBody::LinkAccept);
        let out = unit.step(300_000, status_at(456.0, 300.0), &network, &params);
        assert!(out.iter().all(|o| !matches!(&o.body, MessageBody::LinkRequest { .. })));

        // Crossing: release to the old node names the new one, and the
        // status report immediately retargets it.
        let out = unit.step(400_000, status_at(600.5, 400.0), &network, &params);
        assert_eq!(unit.link, LinkMode::Single(second));
        assert!(matches!(
            &out[0].body,
            MessageBody::LinkRelease { handoff_to: Some(h) } if *h == second
        ));
        assert_eq!(out[0].to, Address::To(Endpoint::Rsmu(first)));
        assert!(out.iter().any(|o| matches!(&o.body, MessageBody::StatusUpdate { .. })
            && o.to == Address::To(Endpoint::Rsmu(second))));
        // Progress restarts in the new stretch.
        assert!(unit.progress_m < 1.0, "progress {}", unit.progress_m);
    }

    #[test]
    fn departure_releases_without_handoff() {
        let (network, directory) = fixture();
        let params = ProtocolParams::default();
        let mut unit = viu(directory.clone());
        let last = directory.owner_of(Direction::Forward, 4_700.0).unwrap().id;
        unit.link = LinkMode::Single(last);
        // Final stretch has no outbound neighbor: no dual link opens.
        let out = unit.step(100_000, status_at(4_750.0, 100.0), &network, &params);
        assert_eq!(unit.link, LinkMode::Single(last));
        assert!(out.iter().all(|o| !matches!(&o.body, MessageBody::LinkRequest { .. })));

        let out = unit.depart();
        assert_eq!(out.len(), 1);
        assert!(matches!(
            &out[0].body,
            MessageBody::LinkRelease { handoff_to: None }
        ));
        assert_eq!(unit.link, LinkMode::Unlinked);
    }

    #[test]
    fn empty_directory_falls_back_to_broadcast() {
        let (network, _) = fixture();
        let params = ProtocolParams::default();
        let mut unit = viu(Directory::default());
        let out = unit.step(100_000, status_at(50.0, 100.0), &network, &params);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, Address::BroadcastRsmus);
        assert!(matches!(
            &out[0].body,
            MessageBody::LinkRequest { mode: LinkRequestMode::Exclusive, .. }
        ));
    }

    #[test]
    fn reverse_travel_uses_mirrored_boundaries() {
        let (network, _) = fixture();
        // Reverse carriageway directory.
        let plan = plan_deployment(&network, &DeploymentParams::default()).unwrap();
        let mut registry = CloudRegistry::default();
        for node in &plan.nodes {
            registry.publish(node).unwrap();
        }
        let route = plan.carriageway_ids(Direction::Reverse);
        let directory = registry.prefetch(&route).unwrap();

        let params = ProtocolParams::default();
        let mut unit = ViuState::new(
            VehicleId(1),
            Direction::Reverse,
            ClockState::ideal(),
            directory.clone(),
            DrivingIntent::keep_lane(30.0),
        );
        let rev_status = |station: f64, ts: f64| VehicleStatus {
            position: RoadPosition::mainline(Direction::Reverse, station),
            speed_mps: 30.0,
            heading: Direction::Reverse,
            acceleration_mps2: 0.0,
            braking: false,
            steering_angle_deg: 0.0,
            device_ts_ms: ts,
        };

        // Entering at the high end (4800) and driving toward 0: the last
        // stretch spans [4200, 4800], so its outbound boundary for reverse
        // travel is 4200.
        let high = directory.owner_of(Direction::Reverse, 4_700.0).unwrap().id;
        let lower = directory.owner_of(Direction::Reverse, 4_100.0).unwrap().id;
        unit.link = LinkMode::Single(high);
        unit.step(100_000, rev_status(4_350.0, 100.0), &network, &params);
        assert_eq!(unit.link, LinkMode::Dual { current: high, next: lower });
        let out = unit.step(200_000, rev_status(4_199.0, 200.0), &network, &params);
        assert_eq!(unit.link, LinkMode::Single(lower));
        assert!(matches!(
            &out[0].body,
            MessageBody::LinkRelease { handoff_to: Some(h) } if *h == lower
        ));
    }
}
