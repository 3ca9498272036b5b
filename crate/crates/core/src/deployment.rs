//! Roadside node placement and jurisdiction assignment.
//!
//! Placement rules: mainline nodes every `spacing_m` starting at station 0 on
//! both carriageways, plus an end node at the mainline end so no tail segment
//! is left unmanaged. Exit ramps get a node 100 m before and 50 m after the
//! exit point; entrance ramps get one node 100 m before the merge point.
//! Station-adjacent nodes on one carriageway split the road at midpoints,
//! forming half-open jurisdictions that tile the carriageway; the last
//! jurisdiction also includes the end station. Nodes sit on the carriageway
//! centerline; antenna height is recorded but excluded from link geometry.

use crate::topology::{Point, RampJunction, RampKind, RoadNetwork};
use crate::types::{Direction, JunctionId, RsmuId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_SPACING_M: f64 = 1_200.0;
pub const DEFAULT_HEIGHT_M: f64 = 12.0;
pub const DEFAULT_COMM_RANGE_M: f64 = 1_000.0;
pub const DEFAULT_EFFECTIVE_RANGE_M: f64 = 600.0;
/// Minimum legal mast height.
pub const MIN_HEIGHT_M: f64 = 10.0;
/// Hard ceiling on adjacent-node spacing, checked with a 1 m tolerance.
pub const MAX_ADJACENT_SPACING_M: f64 = 1_200.0;
const EXIT_UPSTREAM_M: f64 = 100.0;
const EXIT_DOWNSTREAM_M: f64 = 50.0;
const ENTRANCE_UPSTREAM_M: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("junction {0} is not an exit ramp")]
    NotAnExit(JunctionId),
    #[error("junction {0} is not an entrance ramp")]
    NotAnEntrance(JunctionId),
    #[error("node height {0} must exceed {MIN_HEIGHT_M} m")]
    HeightTooLow(f64),
    #[error("no nodes planned for carriageway {0}")]
    EmptyCarriageway(Direction),
    #[error("effective range {0} must be positive and at most comm range {1}")]
    BadRanges(f64, f64),
}

/// Placement parameters shared by all planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentParams {
    pub spacing_m: f64,
    pub height_m: f64,
    pub comm_range_m: f64,
    pub effective_range_m: f64,
}

impl Default for DeploymentParams {
    fn default() -> Self {
        DeploymentParams {
            spacing_m: DEFAULT_SPACING_M,
            height_m: DEFAULT_HEIGHT_M,
            comm_range_m: DEFAULT_COMM_RANGE_M,
            effective_range_m: DEFAULT_EFFECTIVE_RANGE_M,
        }
    }
}

impl DeploymentParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.height_m <= MIN_HEIGHT_M {
            return Err(PlanError::HeightTooLow(self.height_m));
        }
        if !(self.effective_range_m > 0.0 && self.effective_range_m <= self.comm_range_m) {
            return Err(PlanError::BadRanges(
                self.effective_range_m,
                self.comm_range_m,
            ));
        }
        Ok(())
    }
}

/// A planned node location before jurisdictions are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedSite {
    pub carriageway: Direction,
    pub station_m: f64,
    pub height_m: f64,
    pub comm_range_m: f64,
    pub effective_range_m: f64,
}

impl PlannedSite {
    fn at(params: &DeploymentParams, carriageway: Direction, station_m: f64) -> Self {
        PlannedSite {
            carriageway,
            station_m,
            height_m: params.height_m,
            comm_range_m: params.comm_range_m,
            effective_range_m: params.effective_range_m,
        }
    }
}

/// Station interval managed by one node. Half-open on the right except for
/// the final jurisdiction on a carriageway, which also includes its end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jurisdiction {
    pub carriageway: Direction,
    pub start_m: f64,
    pub end_m: f64,
    pub includes_end: bool,
}

impl Jurisdiction {
    pub fn contains(&self, station_m: f64) -> bool {
        station_m >= self.start_m
            && (station_m < self.end_m || (self.includes_end && station_m <= self.end_m))
    }

    pub fn length_m(&self) -> f64 {
        self.end_m - self.start_m
    }
}

/// Full specification of a deployed roadside node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmuSpec {
    pub id: RsmuId,
    pub carriageway: Direction,
    pub station_m: f64,
    pub position: Point,
    pub height_m: f64,
    pub comm_range_m: f64,
    pub effective_range_m: f64,
    pub jurisdiction: Jurisdiction,
    /// Station-adjacent nodes on the same carriageway. Links are mutual.
    pub neighbors: Vec<RsmuId>,
}

/// Grid point left uncovered by its jurisdiction owner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncoveredStation {
    pub carriageway: Direction,
    pub station_m: f64,
    pub owner: RsmuId,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub uncovered: Vec<UncoveredStation>,
    pub max_owner_distance_m: f64,
    pub max_adjacent_spacing_m: f64,
    pub valid: bool,
}

/// The deployed node set plus an optional coverage validation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    /// All nodes, ordered by id. Ids are dense from 0: forward carriageway in
    /// station order first, then reverse.
    pub nodes: Vec<RsmuSpec>,
    pub coverage: Option<CoverageReport>,
}

impl DeploymentPlan {
    pub fn node(&self, id: RsmuId) -> Option<&RsmuSpec> {
        self.nodes.get(id.0 as usize).filter(|n| n.id == id)
    }

    /// Node ids on one carriageway in station order.
    pub fn carriageway_ids(&self, dir: Direction) -> Vec<RsmuId> {
        let mut ids: Vec<&RsmuSpec> = self.nodes.iter().filter(|n| n.carriageway == dir).collect();
        ids.sort_by(|a, b| a.station_m.partial_cmp(&b.station_m).unwrap());
        ids.iter().map(|n| n.id).collect()
    }

    /// Jurisdiction owner for a station on a carriageway.
    pub fn owner_of(&self, dir: Direction, station_m: f64) -> Option<RsmuId> {
        self.nodes
            .iter()
            .find(|n| n.carriageway == dir && n.jurisdiction.contains(station_m))
            .map(|n| n.id)
    }
}

/// Plan mainline nodes on both carriageways: stations 0, spacing, 2*spacing,
/// ... strictly below the mainline end, plus a node at the end itself.
pub fn plan_mainline(network: &RoadNetwork, params: &DeploymentParams) -> Vec<PlannedSite> {
    let length = network.mainline_length_m();
    let mut stations = Vec::new();
    let mut k = 0u32;
    loop {
        let s = f64::from(k) * params.spacing_m;
        if s >= length {
            break;
        }
        stations.push(s);
        k += 1;
    }
    stations.push(length);
    let mut sites = Vec::new();
    for dir in [Direction::Forward, Direction::Reverse] {
        for &s in &stations {
            sites.push(PlannedSite::at(params, dir, s));
        }
    }
    sites
}

/// Two nodes around an exit: one 100 m upstream of the exit point and one
/// 50 m downstream, both clamped to the mainline. Upstream/downstream follow
/// the junction's carriageway travel direction.
pub fn plan_ramp_exit(
    network: &RoadNetwork,
    junction: &RampJunction,
    params: &DeploymentParams,
) -> Result<Vec<PlannedSite>, PlanError> {
    if junction.kind != RampKind::Exit {
        return Err(PlanError::NotAnExit(junction.id));
    }
    let sign = junction.carriageway.sign();
    let length = network.mainline_length_m();
    let before = (junction.station_m - sign * EXIT_UPSTREAM_M).clamp(0.0, length);
    let after = (junction.station_m + sign * EXIT_DOWNSTREAM_M).clamp(0.0, length);
    Ok(vec![
        PlannedSite::at(params, junction.carriageway, before),
        PlannedSite::at(params, junction.carriageway, after),
    ])
}

/// One node 100 m upstream of an entrance merge point, clamped to the
/// mainline.
pub fn plan_ramp_entrance(
    network: &RoadNetwork,
    junction: &RampJunction,
    params: &DeploymentParams,
) -> Result<PlannedSite, PlanError> {
    if junction.kind != RampKind::Entrance {
        return Err(PlanError::NotAnEntrance(junction.id));
    }
    let sign = junction.carriageway.sign();
    let length = network.mainline_length_m();
    let before = (junction.station_m - sign * ENTRANCE_UPSTREAM_M).clamp(0.0, length);
    Ok(PlannedSite::at(params, junction.carriageway, before))
}

/// Assign midpoint-boundary jurisdictions and mutual neighbor links. The
/// first jurisdiction on each carriageway starts at station 0 and the last
/// ends at the mainline end regardless of node stations.
pub fn assign_jurisdictions(
    sites: Vec<PlannedSite>,
    network: &RoadNetwork,
) -> Result<DeploymentPlan, PlanError> {
    for site in &sites {
        if site.height_m <= MIN_HEIGHT_M {
            return Err(PlanError::HeightTooLow(site.height_m));
        }
        if !(site.effective_range_m > 0.0 && site.effective_range_m <= site.comm_range_m) {
            return Err(PlanError::BadRanges(site.effective_range_m, site.comm_range_m));
        }
    }
    let mut by_dir: BTreeMap<Direction, Vec<PlannedSite>> = BTreeMap::new();
    for site in sites {
        by_dir.entry(site.carriageway).or_default().push(site);
    }
    let length = network.mainline_length_m();
    let mut nodes = Vec::new();
    let mut next_id = 0u32;
    for dir in [Direction::Forward, Direction::Reverse] {
        let mut group = match by_dir.remove(&dir) {
            Some(g) => g,
            None => return Err(PlanError::EmptyCarriageway(dir)),
        };
        group.sort_by(|a, b| a.station_m.partial_cmp(&b.station_m).unwrap());
        let n = group.len();
        let first_id = next_id;
        for (i, site) in group.iter().enumerate() {
            let start = if i == 0 {
                0.0
            } else {
                (group[i - 1].station_m + site.station_m) / 2.0
            };
            let end = if i + 1 == n {
                length
            } else {
                (site.station_m + group[i + 1].station_m) / 2.0
            };
            let id = RsmuId(next_id);
            let mut neighbors = Vec::new();
            if i > 0 {
                neighbors.push(RsmuId(first_id + i as u32 - 1));
            }
            if i + 1 < n {
                neighbors.push(RsmuId(first_id + i as u32 + 1));
            }
            nodes.push(RsmuSpec {
                id,
                carriageway: dir,
                station_m: site.station_m,
                position: network.embed_station(dir, site.station_m),
                height_m: site.height_m,
                comm_range_m: site.comm_range_m,
                effective_range_m: site.effective_range_m,
                jurisdiction: Jurisdiction {
                    carriageway: dir,
                    start_m: start,
                    end_m: end,
                    includes_end: i + 1 == n,
                },
                neighbors,
            });
            next_id += 1;
        }
    }
    Ok(DeploymentPlan {
        nodes,
        coverage: None,
    })
}

/// Scan every whole-meter station on each carriageway and measure the
/// distance to its jurisdiction owner. The plan is valid when no station is
/// farther than the owner's effective range and no adjacent same-carriageway
/// pair is more than the spacing ceiling (plus 1 m tolerance) apart.
pub fn validate_coverage(plan: &DeploymentPlan, network: &RoadNetwork) -> CoverageReport {
    let length = network.mainline_length_m();
    let mut uncovered = Vec::new();
    let mut max_distance = 0.0f64;
    let mut max_spacing = 0.0f64;
    for dir in [Direction::Forward, Direction::Reverse] {
        let ids = plan.carriageway_ids(dir);
        for pair in ids.windows(2) {
            let a = plan.node(pair[0]).unwrap();
            let b = plan.node(pair[1]).unwrap();
            max_spacing = max_spacing.max(b.station_m - a.station_m);
        }
        let steps = length.floor() as u64;
        for i in 0..=steps {
            let station = i as f64;
            let Some(owner) = plan.owner_of(dir, station) else {
                continue;
            };
            let node = plan.node(owner).unwrap();
            let d = network
                .embed_station(dir, station)
                .distance(node.position);
            max_distance = max_distance.max(d);
            if d > node.effective_range_m {
                uncovered.push(UncoveredStation {
                    carriageway: dir,
                    station_m: station,
                    owner,
                    distance_m: d,
                });
            }
        }
    }
    let valid = uncovered.is_empty() && max_spacing <= MAX_ADJACENT_SPACING_M + 1.0;
    CoverageReport {
        uncovered,
        max_owner_distance_m: max_distance,
        max_adjacent_spacing_m: max_spacing,
        valid,
    }
}

/// Full pipeline: mainline plus ramp placements, deduplicated per station,
/// jurisdictions assigned, and coverage validated.
pub fn plan_deployment(
    network: &RoadNetwork,
    params: &DeploymentParams,
) -> Result<DeploymentPlan, PlanError> {
    params.validate()?;
    let mut sites = plan_mainline(network, params);
    for junction in network.junctions() {
        match junction.kind {
            RampKind::Exit => sites.extend(plan_ramp_exit(network, junction, params)?),
            RampKind::Entrance => sites.push(plan_ramp_entrance(network, junction, params)?),
        }
    }
    // Collapse sites sharing a carriageway and station; a zero-length
    // jurisdiction would otherwise appear between them.
    sites.sort_by(|a, b| {
        a.carriageway
            .cmp(&b.carriageway)
            .then(a.station_m.partial_cmp(&b.station_m).unwrap())
    });
    sites.dedup_by(|a, b| a.carriageway == b.carriageway && a.station_m == b.station_m);
    let mut plan = assign_jurisdictions(sites, network)?;
    plan.coverage = Some(validate_coverage(&plan, network));
    Ok(plan)
}
