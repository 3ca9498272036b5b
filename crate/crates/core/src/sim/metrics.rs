//! Run metrics, recomputed entirely from the transmission log. Nothing in
//! here peeks at engine state: if a number cannot be derived from the log,
//! the log is incomplete and that is the bug.

use crate::globalview::EventKind;
use crate::protocol::LinkRequestMode;
use crate::sim::log::{ChannelClass, LogBody, LogRecord, Verdict};
use crate::types::{Direction, EventId, RsmuId, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log has no run header")]
    MissingHeader,
    #[error("log sequence gap: expected {expected}, found {found} (line {line})")]
    SeqGap {
        expected: u64,
        found: u64,
        line: usize,
    },
    #[error("table replay failed: {0}")]
    Replay(String),
}

/// Nearest-rank percentiles over millisecond samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Percentiles {
    pub samples: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

pub fn percentiles(mut values: Vec<f64>) -> Percentiles {
    if values.is_empty() {
        return Percentiles::default();
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = values.len();
    let rank = |q: f64| -> f64 {
        let r = (q * n as f64).ceil() as usize;
        values[r.clamp(1, n) - 1]
    };
    Percentiles {
        samples: n as u64,
        mean_ms: values.iter().sum::<f64>() / n as f64,
        p50_ms: rank(0.50),
        p95_ms: rank(0.95),
        max_ms: values[n - 1],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ChannelCounts {
    pub attempted: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl ChannelCounts {
    pub fn delivery_ratio(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.delivered as f64 / self.attempted as f64
        }
    }
}

/// Delivery outcome aggregated over 100 m distance bands (lossy channel
/// only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBucket {
    pub lo_m: f64,
    pub hi_m: f64,
    pub attempted: u64,
    pub delivered: u64,
    pub delivery_ratio: f64,
}

pub const DISTANCE_BUCKET_M: f64 = 100.0;

/// One ownership transfer, observed from the releasing vehicle's sends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandoverEntry {
    pub vehicle: VehicleId,
    /// Node released (the receiver of the release).
    pub from: RsmuId,
    /// Node named as successor.
    pub to: RsmuId,
    pub release_send_us: u64,
    /// Time until the vehicle's next status report send; absent when the
    /// vehicle never reported again.
    pub gap_ms: Option<f64>,
}

/// One pre-admission window: opened at the first pre-admit request, closed
/// by the boundary-crossing release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualWindow {
    pub vehicle: VehicleId,
    pub to: RsmuId,
    pub opened_us: u64,
    pub window_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HandoverStats {
    /// Ownership transfers (releases naming a successor).
    pub total: u64,
    pub per_vehicle: BTreeMap<VehicleId, u64>,
    pub transfers: Vec<HandoverEntry>,
    /// Total time linked vehicles spent not reporting between interior
    /// transfers or re-admissions (0 for seamless runs).
    pub interior_gap_total_ms: f64,
    /// Interior stretches where a previously linked vehicle had to ask for
    /// admission again.
    pub interior_unlinked_episodes: u64,
    pub dual_windows: Vec<DualWindow>,
    pub dual_window_ms: Percentiles,
    /// Vehicles a node admitted from a bare status report because the
    /// normal admission exchange never reached it.
    pub self_healing_admits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClockStats {
    pub samples: u64,
    /// Largest |device - true| seen on any stamped transmission.
    pub max_abs_offset_ms: f64,
    /// Largest cross-device spread of (device - true) at send instants.
    pub max_skew_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReportEntry {
    pub id: EventId,
    pub kind: EventKind,
    pub carriageway: Direction,
    pub station_m: f64,
    pub onset_us: u64,
    /// Onset to the managing node's detection record; absent when never
    /// detected.
    pub detected_delay_ms: Option<f64>,
    pub cleared: bool,
    /// Onset to each vehicle's first delivered notice.
    pub receipts_ms: BTreeMap<VehicleId, f64>,
    pub propagation_ms: Percentiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SafetyStats {
    /// Vehicles that drove past an active event they had been told about.
    pub overruns_notified: u64,
    /// Vehicles that drove past an active event uninformed.
    pub overruns_unnotified: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FleetStats {
    /// Distinct vehicles that transmitted at least once.
    pub vehicles_seen: u64,
    /// Linked road-end departures (releases without a successor).
    pub linked_departures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub profile: String,
    pub duration_s: f64,
    pub tick_ms: f64,
    pub digest_sha256: String,
    pub channels: BTreeMap<String, ChannelCounts>,
    pub delivery_ratio_v2i: f64,
    pub kinds: BTreeMap<String, u64>,
    pub distance_buckets: Vec<DistanceBucket>,
    pub handovers: HandoverStats,
    /// Stalest-managed-record age sampled at every view broadcast.
    pub staleness_ms: Percentiles,
    pub clock: ClockStats,
    pub events: Vec<EventReportEntry>,
    pub safety: SafetyStats,
    pub fleet: FleetStats,
}

impl MetricsReport {
    /// Report for a log with no records at all.
    pub fn empty(digest: &str) -> Self {
        MetricsReport {
            schema_version: 1,
            scenario: String::new(),
            seed: 0,
            profile: String::new(),
            duration_s: 0.0,
            tick_ms: 0.0,
            digest_sha256: digest.to_string(),
            channels: BTreeMap::new(),
            delivery_ratio_v2i: 0.0,
            kinds: BTreeMap::new(),
            distance_buckets: Vec::new(),
            handovers: HandoverStats::default(),
            staleness_ms: Percentiles::default(),
            clock: ClockStats::default(),
            events: Vec::new(),
            safety: SafetyStats::default(),
            fleet: FleetStats::default(),
        }
    }
}

/// Recompute the full report from log records. `digest` is the SHA-256 of
/// the log bytes, carried through for identity checks.
pub fn collect_metrics(records: &[LogRecord], digest: &str) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Ok(MetricsReport::empty(digest));
    }
    // Conservation: the sequence must be dense from zero; a hole means the
    // log lost a line.
    for (i, record) in records.iter().enumerate() {
        if record.seq != i as u64 {
            return Err(MetricsError::SeqGap {
                expected: i as u64,
                found: record.seq,
                line: i + 1,
            });
        }
    }
    let (scenario, seed, profile, duration_s, tick_ms, ground_truth) = match &records[0].body {
        LogBody::RunHeader {
            scenario,
            seed,
            profile,
            duration_s,
            tick_ms,
            ground_truth,
            ..
        } => (
            scenario.clone(),
            *seed,
            profile.clone(),
            *duration_s,
            *tick_ms,
            ground_truth.clone(),
        ),
        _ => return Err(MetricsError::MissingHeader),
    };

    let mut channels: BTreeMap<String, ChannelCounts> = BTreeMap::new();
    let mut kinds: BTreeMap<String, u64> = BTreeMap::new();
    let mut buckets: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    let mut staleness: Vec<f64> = Vec::new();
    let mut seen_broadcast: std::collections::BTreeSet<(RsmuId, u64)> = Default::default();
    let mut clock_samples: u64 = 0;
    let mut offset_min = f64::INFINITY;
    let mut offset_max = f64::NEG_INFINITY;
    let mut max_abs_offset: f64 = 0.0;
    let mut vehicles_seen: std::collections::BTreeSet<VehicleId> = Default::default();
    let mut linked_departures: u64 = 0;

    for record in records {
        let counts = channels
            .entry(record.channel.as_str().to_string())
            .or_default();
        counts.attempted += 1;
        match record.verdict {
            Verdict::Delivered => counts.delivered += 1,
            Verdict::Dropped => counts.dropped += 1,
        }
        *kinds.entry(record.body.kind().to_string()).or_default() += 1;

        if record.channel == ChannelClass::V2i {
            let bucket = (record.distance_m / DISTANCE_BUCKET_M).floor() as u64;
            let entry = buckets.entry(bucket).or_default();
            entry.0 += 1;
            if record.verdict == Verdict::Delivered {
                entry.1 += 1;
            }
        }
        if matches!(record.channel, ChannelClass::V2i | ChannelClass::Backhaul) {
            let offset = record.device_ts_ms - record.send_us as f64 / 1_000.0;
            clock_samples += 1;
            offset_min = offset_min.min(offset);
            offset_max = offset_max.max(offset);
            max_abs_offset = max_abs_offset.max(offset.abs());
        }
        if let crate::types::Endpoint::Viu(v) = record.sender {
            vehicles_seen.insert(v);
        }
        match &record.body {
            LogBody::ViewBroadcast { max_own_age_ms, .. } => {
                if let crate::types::Endpoint::Rsmu(sender) = record.sender {
                    if seen_broadcast.insert((sender, record.send_us)) {
                        if let Some(age) = max_own_age_ms {
                            staleness.push(*age);
                        }
                    }
                }
            }
            LogBody::LinkRelease { handoff_to: None } => {
                if matches!(record.sender, crate::types::Endpoint::Viu(_)) {
                    linked_departures += 1;
                }
            }
            _ => {}
        }
    }

    let handovers = handover_stats(records)?;
    let events = event_reports(records, &ground_truth);
    let safety = safety_stats(records, &ground_truth);

    let distance_buckets = buckets
        .into_iter()
        .map(|(i, (attempted, delivered))| DistanceBucket {
            lo_m: i as f64 * DISTANCE_BUCKET_M,
            hi_m: (i + 1) as f64 * DISTANCE_BUCKET_M,
            attempted,
            delivered,
            delivery_ratio: if attempted == 0 {
                0.0
            } else {
                delivered as f64 / attempted as f64
            },
        })
        .collect();

    let delivery_ratio_v2i = channels
        .get(ChannelClass::V2i.as_str())
        .map(ChannelCounts::delivery_ratio)
        .unwrap_or(0.0);

    Ok(MetricsReport {
        schema_version: 1,
        scenario,
        seed,
        profile,
        duration_s,
        tick_ms,
        digest_sha256: digest.to_string(),
        channels,
        delivery_ratio_v2i,
        kinds,
        distance_buckets,
        handovers,
        staleness_ms: percentiles(staleness),
        clock: ClockStats {
            samples: clock_samples,
            max_abs_offset_ms: max_abs_offset,
            max_skew_ms: if clock_samples >= 2 {
                offset_max - offset_min
            } else {
                0.0
            },
        },
        events,
        safety,
        fleet: FleetStats {
            vehicles_seen: vehicles_seen.len() as u64,
            linked_departures,
        },
    })
}

/// Handover accounting from each vehicle's own send sequence.
fn handover_stats(records: &[LogRecord]) -> Result<HandoverStats, MetricsError> {
    #[derive(Default)]
    struct PerVehicle {
        has_reported: bool,
        open_gap_start: Option<u64>,
        open_window: Option<(RsmuId, u64)>,
        transfers: Vec<HandoverEntry>,
        episodes: u64,
        gap_total_ms: f64,
    }
    let mut state: BTreeMap<VehicleId, PerVehicle> = BTreeMap::new();

    for record in records {
        let vehicle = match record.sender {
            crate::types::Endpoint::Viu(v) => v,
            _ => continue,
        };
        let s = state.entry(vehicle).or_default();
        match &record.body {
            LogBody::StatusUpdate { .. } => {
                if let Some(start) = s.open_gap_start.take() {
                    s.gap_total_ms += (record.send_us - start) as f64 / 1_000.0;
                }
                s.has_reported = true;
            }
            LogBody::LinkRequest { mode, .. } => match mode {
                LinkRequestMode::PreAdmit => {
                    let to = match record.receiver {
                        crate::types::Endpoint::Rsmu(r) => r,
                        _ => continue,
                    };
                    match s.open_window {
                        Some((open_to, _)) if open_to == to => {}
                        _ => s.open_window = Some((to, record.send_us)),
                    }
                }
                LinkRequestMode::Exclusive => {
                    if s.has_reported && s.open_gap_start.is_none() {
                        s.open_gap_start = Some(record.send_us);
                        s.episodes += 1;
                    }
                }
            },
            LogBody::LinkRelease {
                handoff_to: Some(to),
            } => {
                let from = match record.receiver {
                    crate::types::Endpoint::Rsmu(r) => r,
                    _ => continue,
                };
                s.transfers.push(HandoverEntry {
                    vehicle,
                    from,
                    to: *to,
                    release_send_us: record.send_us,
                    gap_ms: None,
                });
                if s.open_gap_start.is_none() {
                    s.open_gap_start = Some(record.send_us);
                }
            }
            LogBody::LinkRelease { handoff_to: None } => {
                // Road-end departure: the trailing silence is not a gap.
                s.open_gap_start = None;
            }
            _ => {}
        }
    }

    // Per-transfer gaps: the vehicle's next status send after each release.
    let mut status_sends: BTreeMap<VehicleId, Vec<u64>> = BTreeMap::new();
    for record in records {
        if let (crate::types::Endpoint::Viu(v), LogBody::StatusUpdate { .. }) =
            (record.sender, &record.body)
        {
            status_sends.entry(v).or_default().push(record.send_us);
        }
    }
    // Dual-window closes: pair each transfer with the matching open window.
    let mut windows: Vec<DualWindow> = Vec::new();
    let mut stats = HandoverStats::default();
    for (vehicle, mut s) in state {
        // Re-scan this vehicle's window opens/closes in order to pair them.
        let sends = status_sends.get(&vehicle);
        for transfer in &mut s.transfers {
            if let Some(sends) = sends {
                let next = sends
                    .iter()
                    .find(|send| **send >= transfer.release_send_us);
                transfer.gap_ms = next.map(|send| (send - transfer.release_send_us) as f64 / 1_000.0);
            }
        }
        stats.total += s.transfers.len() as u64;
        if !s.transfers.is_empty() {
            stats
                .per_vehicle
                .insert(vehicle, s.transfers.len() as u64);
        }
        stats.interior_gap_total_ms += s.gap_total_ms;
        stats.interior_unlinked_episodes += s.episodes;
        stats.transfers.extend(s.transfers);
    }

    // Windows need open/close pairing in stream order, so walk again.
    let mut open: BTreeMap<VehicleId, (RsmuId, u64)> = BTreeMap::new();
    for record in records {
        let vehicle = match record.sender {
            crate::types::Endpoint::Viu(v) => v,
            _ => continue,
        };
        match &record.body {
            LogBody::LinkRequest {
                mode: LinkRequestMode::PreAdmit,
                ..
            } => {
                if let crate::types::Endpoint::Rsmu(to) = record.receiver {
                    match open.get(&vehicle) {
                        Some((open_to, _)) if *open_to == to => {}
                        _ => {
                            open.insert(vehicle, (to, record.send_us));
                        }
                    }
                }
            }
            LogBody::LinkRelease {
                handoff_to: Some(to),
            } => {
                if let Some((open_to, opened_us)) = open.remove(&vehicle) {
                    if open_to == *to {
                        windows.push(DualWindow {
                            vehicle,
                            to: *to,
                            opened_us,
                            window_ms: (record.send_us - opened_us) as f64 / 1_000.0,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    stats.dual_window_ms = percentiles(windows.iter().map(|w| w.window_ms).collect());
    stats.dual_windows = windows;

    // Self-healing admissions come from replaying the admission rules over
    // the delivered records.
    stats.self_healing_admits = super::replay::reconstruct(records)
        .map_err(|e| MetricsError::Replay(e.to_string()))?
        .self_healing_admits;
    Ok(stats)
}

fn event_reports(
    records: &[LogRecord],
    ground_truth: &[crate::globalview::GroundTruthEvent],
) -> Vec<EventReportEntry> {
    let mut entries = Vec::new();
    for gt in ground_truth {
        let mut detected_delay_ms = None;
        let mut cleared = false;
        let mut receipts: BTreeMap<VehicleId, f64> = BTreeMap::new();
        for record in records {
            match &record.body {
                LogBody::EventNotice { event } if event.id == gt.id => {
                    if record.channel == ChannelClass::Internal {
                        if event.cleared_ms.is_none() && detected_delay_ms.is_none() {
                            detected_delay_ms =
                                Some((record.send_us.saturating_sub(gt.onset_us)) as f64 / 1_000.0);
                        }
                        if event.cleared_ms.is_some() {
                            cleared = true;
                        }
                    } else if record.verdict == Verdict::Delivered && event.cleared_ms.is_none() {
                        if let (crate::types::Endpoint::Viu(v), Some(arrival)) =
                            (record.receiver, record.arrival_us)
                        {
                            let delay = (arrival.saturating_sub(gt.onset_us)) as f64 / 1_000.0;
                            receipts.entry(v).or_insert(delay);
                        }
                    }
                }
                _ => {}
            }
        }
        entries.push(EventReportEntry {
            id: gt.id,
            kind: gt.kind,
            carriageway: gt.position.carriageway,
            station_m: gt.position.effective_station(),
            onset_us: gt.onset_us,
            detected_delay_ms,
            cleared,
            propagation_ms: percentiles(receipts.values().copied().collect()),
            receipts_ms: receipts,
        });
    }
    entries
}

fn safety_stats(
    records: &[LogRecord],
    ground_truth: &[crate::globalview::GroundTruthEvent],
) -> SafetyStats {
    // Vehicle trajectories from their own stamped positions.
    let mut tracks: BTreeMap<VehicleId, Vec<(u64, Direction, f64)>> = BTreeMap::new();
    // First delivered notice per (event, vehicle).
    let mut informed_at: BTreeMap<(EventId, VehicleId), u64> = BTreeMap::new();
    for record in records {
        if let crate::types::Endpoint::Viu(v) = record.sender {
            let status = match &record.body {
                LogBody::StatusUpdate { status, .. } => Some(status),
                LogBody::LinkRequest { status, .. } => Some(status),
                _ => None,
            };
            if let Some(status) = status {
                tracks.entry(v).or_default().push((
                    record.send_us,
                    status.position.carriageway,
                    status.position.effective_station(),
                ));
            }
        }
        if let (crate::types::Endpoint::Viu(v), LogBody::EventNotice { event }) =
            (record.receiver, &record.body)
        {
            if record.verdict == Verdict::Delivered && event.cleared_ms.is_none() {
                if let Some(arrival) = record.arrival_us {
                    informed_at.entry((event.id, v)).or_insert(arrival);
                }
            }
        }
    }

    let mut stats = SafetyStats::default();
    for gt in ground_truth {
        let sign = gt.position.carriageway.sign();
        let station = gt.position.effective_station();
        let clear = gt.clear_us.unwrap_or(u64::MAX);
        for (vehicle, track) in &tracks {
            let mut crossed_at = None;
            for pair in track.windows(2) {
                let (t1, d1, s1) = pair[0];
                let (t2, d2, s2) = pair[1];
                if d1 != gt.position.carriageway || d2 != gt.position.carriageway {
                    continue;
                }
                let before = (station - s1) * sign > 0.0;
                let past = (s2 - station) * sign >= 0.0;
                if before && past && t2 >= gt.onset_us && t1 < clear {
                    crossed_at = Some(t2);
                    break;
                }
            }
            if let Some(t) = crossed_at {
                let informed = informed_at
                    .get(&(gt.id, *vehicle))
                    .map(|at| *at <= t)
                    .unwrap_or(false);
                if informed {
                    stats.overruns_notified += 1;
                } else {
                    stats.overruns_unnotified += 1;
                }
            }
        }
    }
    stats
}

/// Flatten the report to `key,value` CSV. Every leaf is serialized exactly
/// as it appears in the JSON form, so the two formats carry identical
/// values.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let value = serde_json::to_value(report).expect("report serializes");
    value_to_csv(&value)
}

/// Flatten any JSON document to `key,value` CSV (dotted paths, indexed
/// arrays, leaves serialized as their JSON form).
pub fn value_to_csv(value: &serde_json::Value) -> String {
    let mut lines = vec!["key,value".to_string()];
    flatten_value("", value, &mut lines);
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn flatten_value(prefix: &str, value: &serde_json::Value, lines: &mut Vec<String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_value(&key, v, lines);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_value(&format!("{prefix}[{i}]"), v, lines);
            }
        }
        leaf => {
            let cell = serde_json::to_string(leaf).expect("leaf serializes");
            lines.push(format!("{prefix},{}", csv_escape(&cell)));
        }
    }
}

fn csv_escape(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_use_nearest_rank() {
        let p = percentiles((1..=100).map(f64::from).collect());
        assert_eq!(p.samples, 100);
        assert_eq!(p.p50_ms, 50.0);
        assert_eq!(p.p95_ms, 95.0);
        assert_eq!(p.max_ms, 100.0);
        assert_eq!(p.mean_ms, 50.5);
        assert!(p.p50_ms <= p.p95_ms && p.p95_ms <= p.max_ms);

        let single = percentiles(vec![42.0]);
        assert_eq!(single.p50_ms, 42.0);
        assert_eq!(single.p95_ms, 42.0);
        assert_eq!(single.max_ms, 42.0);

        assert_eq!(percentiles(Vec::new()), Percentiles::default());
    }

    #[test]
    fn csv_flattening_quotes_and_indexes() {
        let mut lines = Vec::new();
        let value = serde_json::json!({
            "a": {"b": 1.5},
            "list": [{"x": "hey,there"}, {"x": 2}],
        });
        flatten_value("", &value, &mut lines);
        assert!(lines.contains(&"a.b,1.5".to_string()));
        assert!(lines.contains(&"list[0].x,\"\"\"hey,there\"\"\"".to_string()));
        assert!(lines.contains(&"list[1].x,2".to_string()));
    }
}
