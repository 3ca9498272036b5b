//! Longitudinal vehicle motion: a safe-speed car-following model with
//! comfort-bounded acceleration, integrated per tick with semi-implicit
//! Euler (speed updates first, then position moves at the new speed).

use crate::topology::{advance, RoadNetwork, RoadPosition, RoutePlan, TopologyError};
use serde::{Deserialize, Serialize};

/// Driver model limits. Acceleration is clamped to
/// `[-max_decel_mps2, +max_accel_mps2]` every tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrivingParams {
    pub max_accel_mps2: f64,
    pub max_decel_mps2: f64,
    /// Desired time headway to the leader.
    pub headway_s: f64,
    /// Standstill gap kept behind a leader.
    pub min_gap_m: f64,
    /// Standstill margin kept short of a known obstacle.
    pub event_margin_m: f64,
}

impl Default for DrivingParams {
    fn default() -> Self {
        DrivingParams {
            max_accel_mps2: 1.5,
            max_decel_mps2: 4.0,
            headway_s: 1.5,
            min_gap_m: 5.0,
            event_margin_m: 10.0,
        }
    }
}

impl DrivingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_accel_mps2 > 0.0) {
            return Err("max_accel_mps2 must be positive".into());
        }
        if !(self.max_decel_mps2 > 0.0) {
            return Err("max_decel_mps2 must be positive".into());
        }
        if !(self.headway_s > 0.0) {
            return Err("headway_s must be positive".into());
        }
        if self.min_gap_m < 0.0 || self.event_margin_m < 0.0 {
            return Err("gaps must be nonnegative".into());
        }
        Ok(())
    }
}

/// Mutable motion state of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleKinematics {
    pub position: RoadPosition,
    pub speed_mps: f64,
    pub acceleration_mps2: f64,
    pub desired_speed_mps: f64,
    pub route: RoutePlan,
    /// Set once the route path has been fully traversed.
    pub arrived: bool,
}

impl VehicleKinematics {
    pub fn new(position: RoadPosition, desired_speed_mps: f64, route: RoutePlan) -> Self {
        VehicleKinematics {
            position,
            speed_mps: desired_speed_mps,
            acceleration_mps2: 0.0,
            desired_speed_mps,
            route,
            arrived: false,
        }
    }

    /// The driver is actively braking (not just coasting).
    pub fn braking(&self) -> bool {
        self.acceleration_mps2 < -1e-9
    }
}

/// What the vehicle ahead looks like from the follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderView {
    /// Bumper-to-bumper distance along the travel direction.
    pub gap_m: f64,
    pub speed_mps: f64,
}

/// Highest speed from which a full-braking stop still ends `margin` short
/// of a hazard `gap` ahead (`v^2 <= 2 a (gap - margin)`).
fn stop_short_speed(gap_m: f64, margin_m: f64, max_decel_mps2: f64) -> f64 {
    let room = (gap_m - margin_m).max(0.0);
    (2.0 * max_decel_mps2 * room).sqrt()
}

/// One motion step of `dt_s` seconds. The target speed is the minimum of:
/// the desired cruise speed, the headway-limited speed behind a leader, the
/// speed from which the vehicle can match a braking leader, and the speed
/// from which it can stop short of each known obstacle ahead. Acceleration
/// toward the target is clamped to the comfort envelope, so a vehicle 20 m
/// behind an equal-speed leader at a 2 s headway distance deficit brakes
/// rather than coasts.
pub fn step_vehicle(
    kin: &mut VehicleKinematics,
    leader: Option<LeaderView>,
    obstacle_gaps_m: &[f64],
    driving: &DrivingParams,
    network: &RoadNetwork,
    dt_s: f64,
) -> Result<(), TopologyError> {
    let mut target = kin.desired_speed_mps;
    // The speed chosen now is only re-evaluated dt seconds later, so budget
    // the distance covered during that interval out of the braking room.
    let reaction_m = kin.speed_mps * dt_s;
    if let Some(l) = leader {
        target = target.min((l.gap_m / driving.headway_s).max(0.0));
        let room = (l.gap_m - driving.min_gap_m - reaction_m).max(0.0);
        let follow =
            (l.speed_mps * l.speed_mps + 2.0 * driving.max_decel_mps2 * room).sqrt();
        target = target.min(follow);
    }
    for &gap in obstacle_gaps_m {
        target = target.min(stop_short_speed(
            gap - reaction_m,
            driving.event_margin_m,
            driving.max_decel_mps2,
        ));
    }

    let accel = ((target - kin.speed_mps) / dt_s)
        .clamp(-driving.max_decel_mps2, driving.max_accel_mps2);
    kin.acceleration_mps2 = accel;
    kin.speed_mps = (kin.speed_mps + accel * dt_s).max(0.0);

    let outcome = advance(&kin.position, kin.speed_mps * dt_s, network, kin.route)?;
    kin.position = outcome.position;
    if outcome.arrived {
        kin.arrived = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::GeometryConfig;
    use crate::types::Direction;

    fn network() -> RoadNetwork {
        RoadNetwork::build(&GeometryConfig {
            mainline_length_m: 5_000.0,
            carriageway_separation_m: 20.0,
            junctions: Vec::new(),
        })
        .unwrap()
    }

    #[test]
    fn cruises_at_desired_speed_on_open_road() {
        let network = network();
        let mut kin = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, 0.0),
            30.0,
            RoutePlan::Mainline,
        );
        step_vehicle(&mut kin, None, &[], &DrivingParams::default(), &network, 0.1).unwrap();
        assert_eq!(kin.speed_mps, 30.0);
        assert_eq!(kin.acceleration_mps2, 0.0);
        assert!(!kin.braking());
        assert!((kin.position.station_m - 3.0).abs() < 1e-12);
    }

    #[test]
    fn brakes_behind_close_leader_at_same_speed() {
        // Leader 20 m ahead at the same 30 m/s: the headway target
        // (20 / 1.5 s ≈ 13 m/s) forces deceleration and the braking flag.
        let network = network();
        let mut kin = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, 100.0),
            30.0,
            RoutePlan::Mainline,
        );
        let leader = LeaderView {
            gap_m: 20.0,
            speed_mps: 30.0,
        };
        step_vehicle(
            &mut kin,
            Some(leader),
            &[],
            &DrivingParams::default(),
            &network,
            0.1,
        )
        .unwrap();
        assert!(kin.braking());
        assert_eq!(kin.acceleration_mps2, -4.0, "comfort clamp active");
        assert!(kin.speed_mps < 30.0);
    }

    #[test]
    fn stops_short_of_an_obstacle_and_never_reaches_it() {
        let network = network();
        let start = 0.0;
        let obstacle = 400.0;
        let driving = DrivingParams::default();
        let mut kin = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, start),
            30.0,
            RoutePlan::Mainline,
        );
        for _ in 0..1_000 {
            let gap = obstacle - kin.position.station_m;
            step_vehicle(&mut kin, None, &[gap], &driving, &network, 0.1).unwrap();
        }
        assert!(kin.speed_mps < 1e-6, "vehicle should be stopped");
        assert!(
            kin.position.station_m < obstacle - driving.event_margin_m * 0.5,
            "stopped at {} m, obstacle at {obstacle} m",
            kin.position.station_m
        );
    }

    #[test]
    fn follower_never_collides_with_a_stopping_leader() {
        let network = network();
        let driving = DrivingParams::default();
        let mut leader = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, 60.0),
            30.0,
            RoutePlan::Mainline,
        );
        let mut follower = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, 0.0),
            30.0,
            RoutePlan::Mainline,
        );
        for step in 0..1_200 {
            // Leader brakes to a stop partway through.
            if step == 100 {
                leader.desired_speed_mps = 0.0;
            }
            let gap = leader.position.station_m - follower.position.station_m;
            assert!(gap > 0.0, "collision at step {step}: gap {gap}");
            let view = LeaderView {
                gap_m: gap,
                speed_mps: leader.speed_mps,
            };
            step_vehicle(&mut leader, None, &[], &driving, &network, 0.1).unwrap();
            step_vehicle(&mut follower, Some(view), &[], &driving, &network, 0.1).unwrap();
        }
        assert!(leader.speed_mps < 1e-6);
        assert!(follower.speed_mps < 1e-6);
        let final_gap = leader.position.station_m - follower.position.station_m;
        assert!(final_gap >= driving.min_gap_m * 0.5, "final gap {final_gap}");
    }

    #[test]
    fn reverse_carriageway_advances_toward_lower_stations() {
        let network = network();
        let mut kin = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Reverse, 5_000.0),
            25.0,
            RoutePlan::Mainline,
        );
        step_vehicle(&mut kin, None, &[], &DrivingParams::default(), &network, 0.1).unwrap();
        assert!((kin.position.station_m - 4_997.5).abs() < 1e-12);
        assert!(!kin.arrived);
    }

    #[test]
    fn arrival_flag_set_at_route_end() {
        let network = network();
        let mut kin = VehicleKinematics::new(
            RoadPosition::mainline(Direction::Forward, 4_999.0),
            30.0,
            RoutePlan::Mainline,
        );
        step_vehicle(&mut kin, None, &[], &DrivingParams::default(), &network, 0.1).unwrap();
        assert!(kin.arrived);
        assert_eq!(kin.position.station_m, 5_000.0);
    }
}
