//! Scenario configuration: one JSON file describes a complete reproducible
//! run. Validation collects every violation instead of stopping at the
//! first, so a bad file is fixable in one pass.

use crate::channel::TechProfile;
use crate::deployment::DeploymentParams;
use crate::globalview::{EventKind, GroundTruthEvent, InfraRecord, InfraStatus};
use crate::protocol::{DrivingIntent, Maneuver, ProtocolParams};
use crate::sim::kinematics::DrivingParams;
use crate::timesync::TimesyncParams;
use crate::topology::{GeometryConfig, RampKind, RoadNetwork, RoadPosition, RampRef, RoutePlan};
use crate::types::{ms_to_micros, secs_to_micros, Direction, EventId, JunctionId, Micros, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario ({} violation{}):\n{}", .0.len(), if .0.len() == 1 { "" } else { "s" }, .0.join("\n"))]
    Invalid(Vec<String>),
}

/// Channel parameter overrides layered on top of a named preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelOverrides {
    pub max_range_m: Option<f64>,
    pub knee_distance_m: Option<f64>,
    pub base_loss: Option<f64>,
    pub knee_loss: Option<f64>,
    pub latency_base_ms: Option<f64>,
    pub latency_jitter_ms: Option<f64>,
    pub density_threshold_per_km: Option<f64>,
    pub density_penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Preset name: "dsrc" or "cv2x".
    pub profile: String,
    pub overrides: ChannelOverrides,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            profile: "dsrc".to_string(),
            overrides: ChannelOverrides::default(),
        }
    }
}

impl ChannelConfig {
    pub fn resolve(&self) -> Result<TechProfile, String> {
        let mut profile =
            crate::channel::preset(&self.profile).map_err(|e| format!("channel: {e}"))?;
        let o = &self.overrides;
        if let Some(v) = o.max_range_m {
            profile.max_range_m = v;
        }
        if let Some(v) = o.knee_distance_m {
            profile.knee_distance_m = v;
        }
        if let Some(v) = o.base_loss {
            profile.base_loss = v;
        }
        if let Some(v) = o.knee_loss {
            profile.knee_loss = v;
        }
        if let Some(v) = o.latency_base_ms {
            profile.latency_base_ms = v;
        }
        if let Some(v) = o.latency_jitter_ms {
            profile.latency_jitter_ms = v;
        }
        if let Some(v) = o.density_threshold_per_km {
            profile.density_threshold_per_km = v;
        }
        if let Some(v) = o.density_penalty {
            profile.density_penalty = v;
        }
        profile
            .validate()
            .map_err(|e| format!("channel overrides: {e}"))?;
        Ok(profile)
    }
}

/// One explicitly placed vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub carriageway: Direction,
    /// Entry time, snapped to the tick grid.
    pub entry_s: f64,
    /// Entry station; defaults to the road start for the carriageway.
    pub entry_station_m: Option<f64>,
    /// Start on this entrance ramp instead of the mainline.
    pub entry_ramp: Option<JunctionId>,
    pub desired_speed_mps: f64,
    /// Leave the mainline at this exit junction.
    pub exit_at: Option<JunctionId>,
    /// Pre-download the node directory before entering.
    pub prefetch: bool,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            carriageway: Direction::Forward,
            entry_s: 0.0,
            entry_station_m: None,
            entry_ramp: None,
            desired_speed_mps: 30.0,
            exit_at: None,
            prefetch: true,
        }
    }
}

/// A parameterized platoon: `count` vehicles entering `headway_s` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub carriageway: Direction,
    pub start_s: f64,
    pub count: u32,
    pub headway_s: f64,
    pub desired_speed_mps: f64,
    /// Deterministic per-vehicle speed stagger: vehicle k in the flow wants
    /// `desired + k * step`.
    pub speed_step_mps: f64,
    pub entry_station_m: Option<f64>,
    pub entry_ramp: Option<JunctionId>,
    pub exit_at: Option<JunctionId>,
    pub prefetch: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            carriageway: Direction::Forward,
            start_s: 0.0,
            count: 1,
            headway_s: 2.0,
            desired_speed_mps: 30.0,
            speed_step_mps: 0.0,
            entry_station_m: None,
            entry_ramp: None,
            exit_at: None,
            prefetch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub id: u32,
    pub kind: EventKind,
    #[serde(default)]
    pub carriageway: Direction,
    pub station_m: f64,
    pub onset_s: f64,
    #[serde(default)]
    pub clear_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraConfig {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub carriageway: Direction,
    pub station_m: f64,
}

/// A vehicle instance after flow expansion, ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedVehicle {
    pub id: VehicleId,
    pub carriageway: Direction,
    pub entry_us: Micros,
    pub position: RoadPosition,
    pub desired_speed_mps: f64,
    pub route: RoutePlan,
    pub intent: DrivingIntent,
    pub prefetch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: Option<u64>,
    pub duration_s: f64,
    pub tick_ms: f64,
    pub geometry: GeometryConfig,
    pub deployment: DeploymentParams,
    pub channel: ChannelConfig,
    pub timesync: TimesyncParams,
    pub protocol: ProtocolParams,
    pub driving: DrivingParams,
    pub vehicles: Vec<VehicleConfig>,
    pub flows: Vec<FlowConfig>,
    pub events: Vec<EventConfig>,
    pub infra: Vec<InfraConfig>,
    /// Vehicles sense active events within this distance without a notice.
    pub perception_radius_m: f64,
    /// Sensor latency: a node detects onsets and clearances this long after
    /// the fact.
    pub detection_delay_ms: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: 1,
            name: "scenario".to_string(),
            seed: None,
            duration_s: 60.0,
            tick_ms: 100.0,
            geometry: GeometryConfig {
                mainline_length_m: 4_800.0,
                carriageway_separation_m: crate::topology::DEFAULT_CARRIAGEWAY_SEPARATION_M,
                junctions: Vec::new(),
            },
            deployment: DeploymentParams::default(),
            channel: ChannelConfig::default(),
            timesync: TimesyncParams::default(),
            protocol: ProtocolParams::default(),
            driving: DrivingParams::default(),
            vehicles: Vec::new(),
            flows: Vec::new(),
            events: Vec::new(),
            infra: Vec::new(),
            perception_radius_m: 100.0,
            detection_delay_ms: 500.0,
        }
    }
}

impl ScenarioConfig {
    pub fn tick_us(&self) -> Micros {
        ms_to_micros(self.tick_ms)
    }

    pub fn duration_us(&self) -> Micros {
        secs_to_micros(self.duration_s)
    }

    pub fn network(&self) -> Result<RoadNetwork, crate::topology::TopologyError> {
        RoadNetwork::build(&self.geometry)
    }

    pub fn profile(&self) -> Result<TechProfile, String> {
        self.channel.resolve()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthEvent> {
        let mut events: Vec<GroundTruthEvent> = self
            .events
            .iter()
            .map(|e| GroundTruthEvent {
                id: EventId(e.id),
                kind: e.kind,
                position: RoadPosition::mainline(e.carriageway, e.station_m),
                onset_us: secs_to_micros(e.onset_s),
                clear_us: e.clear_s.map(secs_to_micros),
            })
            .collect();
        events.sort_by_key(|e| e.id);
        events
    }

    pub fn infra_records(&self) -> Vec<InfraRecord> {
        self.infra
            .iter()
            .map(|i| InfraRecord {
                id: i.id,
                name: i.name.clone(),
                carriageway: i.carriageway,
                station_m: i.station_m,
                status: InfraStatus::Ok,
                device_ts_ms: 0.0,
            })
            .collect()
    }

    fn snap_to_tick(&self, us: Micros) -> Micros {
        let tick = self.tick_us();
        if tick == 0 {
            return us;
        }
        ((us + tick / 2) / tick) * tick
    }

    fn resolve_one(&self, id: u32, v: &VehicleConfig, network: &RoadNetwork) -> ResolvedVehicle {
        let position = match v.entry_ramp {
            Some(junction) => {
                let station = network
                    .junction(junction)
                    .map(|j| j.station_m)
                    .unwrap_or(0.0);
                RoadPosition {
                    carriageway: v.carriageway,
                    station_m: station,
                    lateral_m: 0.0,
                    on_ramp: Some(RampRef {
                        junction,
                        progress_m: 0.0,
                    }),
                }
            }
            None => {
                let station = v.entry_station_m.unwrap_or(match v.carriageway {
                    Direction::Forward => 0.0,
                    Direction::Reverse => network.mainline_length_m(),
                });
                RoadPosition::mainline(v.carriageway, station)
            }
        };
        let (route, maneuver) = match (v.exit_at, v.entry_ramp) {
            (Some(j), _) => (RoutePlan::ExitAt(j), Maneuver::ExitAt(j)),
            (None, Some(j)) => (RoutePlan::EnterAt(j), Maneuver::Merge),
            (None, None) => (RoutePlan::Mainline, Maneuver::KeepLane),
        };
        ResolvedVehicle {
            id: VehicleId(id),
            carriageway: v.carriageway,
            entry_us: self.snap_to_tick(secs_to_micros(v.entry_s)),
            position,
            desired_speed_mps: v.desired_speed_mps,
            route,
            intent: DrivingIntent {
                intended_speed_mps: v.desired_speed_mps,
                maneuver,
                horizon_s: 10.0,
            },
            prefetch: v.prefetch,
        }
    }

    /// Expand explicit vehicles then flows into dense ids, ordered by
    /// (entry time, id) for deterministic activation.
    pub fn resolved_vehicles(&self, network: &RoadNetwork) -> Vec<ResolvedVehicle> {
        let mut out = Vec::new();
        let mut next_id: u32 = 0;
        for v in &self.vehicles {
            out.push(self.resolve_one(next_id, v, network));
            next_id += 1;
        }
        for f in &self.flows {
            for k in 0..f.count {
                let member = VehicleConfig {
                    carriageway: f.carriageway,
                    entry_s: f.start_s + f.headway_s * f64::from(k),
                    entry_station_m: f.entry_station_m,
                    entry_ramp: f.entry_ramp,
                    desired_speed_mps: f.desired_speed_mps + f.speed_step_mps * f64::from(k),
                    exit_at: f.exit_at,
                    prefetch: f.prefetch,
                };
                out.push(self.resolve_one(next_id, &member, network));
                next_id += 1;
            }
        }
        out.sort_by_key(|v| (v.entry_us, v.id));
        out
    }

    /// Check everything checkable, collecting all violations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.schema_version != 1 {
            problems.push(format!(
                "schema_version: {} unsupported, expected 1",
                self.schema_version
            ));
        }
        if self.seed.is_none() {
            problems.push("seed: required (in the file or via --seed)".to_string());
        }
        if !(self.duration_s > 0.0) {
            problems.push(format!("duration_s: must be positive, got {}", self.duration_s));
        }
        if !(self.tick_ms > 0.0) || (self.tick_ms * 1_000.0).fract() != 0.0 {
            problems.push(format!(
                "tick_ms: must be positive and a whole number of microseconds, got {}",
                self.tick_ms
            ));
        }
        if self.perception_radius_m < 0.0 {
            problems.push("perception_radius_m: must be nonnegative".to_string());
        }
        if self.detection_delay_ms < 0.0 {
            problems.push("detection_delay_ms: must be nonnegative".to_string());
        }

        if let Err(e) = self.protocol.validate() {
            problems.push(format!("protocol: {e}"));
        }
        if let Err(e) = self.deployment.validate() {
            problems.push(format!("deployment: {e}"));
        }
        if let Err(e) = self.channel.resolve() {
            problems.push(e);
        }
        if let Err(e) = self.driving.validate() {
            problems.push(format!("driving: {e}"));
        }
        if !(self.timesync.residual_bound_ms >= 0.0) {
            problems.push("timesync.residual_bound_ms: must be nonnegative".to_string());
        }
        if !(self.timesync.drift_max_ppm >= 0.0) {
            problems.push("timesync.drift_max_ppm: must be nonnegative".to_string());
        }
        if !(self.timesync.signal_period_s > 0.0) {
            problems.push("timesync.signal_period_s: must be positive".to_string());
        }

        // Periodic actions must land on the tick grid, or they would never
        // fire.
        if self.tick_ms > 0.0 && (self.tick_ms * 1_000.0).fract() == 0.0 {
            let tick = self.tick_us();
            let periods = [
                ("protocol.report_period_ms", self.protocol.report_period_ms),
                ("protocol.broadcast_period_ms", self.protocol.broadcast_period_ms),
                (
                    "protocol.neighbor_sync_period_ms",
                    self.protocol.neighbor_sync_period_ms,
                ),
                (
                    "timesync.signal_period_s (as ms)",
                    self.timesync.signal_period_s * 1_000.0,
                ),
            ];
            for (name, period_ms) in periods {
                if period_ms > 0.0 && !ms_to_micros(period_ms).is_multiple_of(tick) {
                    problems.push(format!(
                        "{name}: {period_ms} ms is not a multiple of the {} ms tick",
                        self.tick_ms
                    ));
                }
            }
        }

        let network = match self.network() {
            Ok(n) => Some(n),
            Err(e) => {
                problems.push(format!("geometry: {e}"));
                None
            }
        };

        if let Some(network) = &network {
            let length = network.mainline_length_m();
            for (i, v) in self.vehicles.iter().enumerate() {
                self.check_vehicle_placement(
                    &format!("vehicles[{i}]"),
                    v.carriageway,
                    v.entry_s,
                    v.entry_station_m,
                    v.entry_ramp,
                    v.desired_speed_mps,
                    v.exit_at,
                    network,
                    &mut problems,
                );
            }
            for (i, f) in self.flows.iter().enumerate() {
                let label = format!("flows[{i}]");
                if f.count == 0 {
                    problems.push(format!("{label}: count must be at least 1"));
                }
                if !(f.headway_s > 0.0) {
                    problems.push(format!("{label}: headway_s must be positive"));
                }
                self.check_vehicle_placement(
                    &label,
                    f.carriageway,
                    f.start_s,
                    f.entry_station_m,
                    f.entry_ramp,
                    f.desired_speed_mps,
                    f.exit_at,
                    network,
                    &mut problems,
                );
            }
            let mut event_ids = BTreeSet::new();
            for (i, e) in self.events.iter().enumerate() {
                if !(0.0..=length).contains(&e.station_m) {
                    problems.push(format!(
                        "events[{i}]: station {} m is off the {length} m road",
                        e.station_m
                    ));
                }
                if e.onset_s < 0.0 {
                    problems.push(format!("events[{i}]: onset_s must be nonnegative"));
                }
                if let Some(c) = e.clear_s {
                    if c <= e.onset_s {
                        problems.push(format!("events[{i}]: clear_s must be after onset_s"));
                    }
                }
                if !event_ids.insert(e.id) {
                    problems.push(format!("events[{i}]: duplicate event id {}", e.id));
                }
            }
            let mut infra_ids = BTreeSet::new();
            for (i, rec) in self.infra.iter().enumerate() {
                if !(0.0..=length).contains(&rec.station_m) {
                    problems.push(format!(
                        "infra[{i}]: station {} m is off the {length} m road",
                        rec.station_m
                    ));
                }
                if !infra_ids.insert(rec.id) {
                    problems.push(format!("infra[{i}]: duplicate infra id {}", rec.id));
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn check_vehicle_placement(
        &self,
        label: &str,
        carriageway: Direction,
        entry_s: f64,
        entry_station_m: Option<f64>,
        entry_ramp: Option<JunctionId>,
        desired_speed_mps: f64,
        exit_at: Option<JunctionId>,
        network: &RoadNetwork,
        problems: &mut Vec<String>,
    ) {
        let length = network.mainline_length_m();
        if !(desired_speed_mps > 0.0) {
            problems.push(format!("{label}: desired_speed_mps must be positive"));
        }
        if entry_s < 0.0 || entry_s >= self.duration_s {
            problems.push(format!(
                "{label}: entry_s {entry_s} outside [0, {})",
                self.duration_s
            ));
        }
        if let Some(st) = entry_station_m {
            if !(0.0..=length).contains(&st) {
                problems.push(format!("{label}: entry station {st} m is off the road"));
            }
        }
        if let Some(j) = entry_ramp {
            match network.junction(j) {
                Ok(junction) => {
                    if junction.kind != RampKind::Entrance {
                        problems.push(format!("{label}: junction {j} is not an entrance ramp"));
                    } else if junction.carriageway != carriageway {
                        problems.push(format!(
                            "{label}: entrance {j} serves the other carriageway"
                        ));
                    }
                }
                Err(_) => problems.push(format!("{label}: unknown entrance junction {j}")),
            }
        }
        if let Some(j) = exit_at {
            match network.junction(j) {
                Ok(junction) => {
                    if junction.kind != RampKind::Exit {
                        problems.push(format!("{label}: junction {j} is not an exit ramp"));
                    } else if junction.carriageway != carriageway {
                        problems.push(format!("{label}: exit {j} serves the other carriageway"));
                    }
                }
                Err(_) => problems.push(format!("{label}: unknown exit junction {j}")),
            }
        }
    }
}

#[cfg(test)]
// Scenario setup reads best as a default followed by field mutations.
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_validates_with_a_seed() {
        let mut config = ScenarioConfig::default();
        assert!(config.validate().is_err(), "seed is required");
        config.seed = Some(7);
        config.validate().unwrap();
    }

    #[test]
    fn validation_reports_every_violation_at_once() {
        let mut config = ScenarioConfig {
            seed: None,
            duration_s: -1.0,
            ..ScenarioConfig::default()
        };
        config.protocol.report_period_ms = 150.0;
        config.events.push(EventConfig {
            id: 1,
            kind: EventKind::Rockfall,
            carriageway: Direction::Forward,
            station_m: 9_999.0,
            onset_s: 10.0,
            clear_s: Some(5.0),
        });
        let err = config.validate().unwrap_err();
        let ConfigError::Invalid(problems) = err;
        let text = problems.join("\n");
        assert!(text.contains("seed"), "{text}");
        assert!(text.contains("duration_s"), "{text}");
        assert!(text.contains("report_period_ms"), "{text}");
        assert!(text.contains("off the"), "{text}");
        assert!(text.contains("clear_s"), "{text}");
        assert!(problems.len() >= 5, "{text}");
    }

    #[test]
    fn flows_expand_to_dense_ids_in_entry_order() {
        let mut config = ScenarioConfig::default();
        config.seed = Some(1);
        config.duration_s = 120.0;
        config.vehicles.push(VehicleConfig {
            entry_s: 5.0,
            ..VehicleConfig::default()
        });
        config.flows.push(FlowConfig {
            carriageway: Direction::Reverse,
            start_s: 0.0,
            count: 3,
            headway_s: 2.0,
            desired_speed_mps: 25.0,
            speed_step_mps: 1.0,
            ..FlowConfig::default()
        });
        let network = config.network().unwrap();
        let resolved = config.resolved_vehicles(&network);
        assert_eq!(resolved.len(), 4);
        // Sorted by entry time: flow vehicles at 0, 2, 4 s come first.
        assert_eq!(resolved[0].id, VehicleId(1));
        assert_eq!(resolved[0].entry_us, 0);
        assert_eq!(resolved[1].id, VehicleId(2));
        assert_eq!(resolved[1].entry_us, 2_000_000);
        assert_eq!(resolved[2].desired_speed_mps, 27.0);
        assert_eq!(resolved[3].id, VehicleId(0));
        assert_eq!(resolved[3].entry_us, 5_000_000);
        // Reverse entries default to the far end of the road.
        assert_eq!(resolved[0].position.station_m, 4_800.0);
        assert_eq!(resolved[3].position.station_m, 0.0);
    }

    #[test]
    fn scenario_roundtrips_through_json() {
        let mut config = ScenarioConfig::default();
        config.seed = Some(42);
        config.channel.overrides.base_loss = Some(0.0);
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        // Unknown fields are a hard parse error, not silent drift.
        let mangled = json.replace("\"seed\"", "\"sede\"");
        assert!(serde_json::from_str::<ScenarioConfig>(&mangled).is_err());
    }
}
