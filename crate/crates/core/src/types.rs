//! Shared identifiers, endpoints, and time units used across the simulator.
//!
//! True simulation time is an integer microsecond count since run start, so
//! event ordering never depends on float rounding. Device clocks, which carry
//! offset and drift, read out in fractional milliseconds instead; see the
//! `timesync` module.

use serde::{Deserialize, Serialize};
use std::fmt;

/// True simulation time in microseconds since run start.
pub type Micros = u64;

pub const MICROS_PER_MS: u64 = 1_000;
pub const MICROS_PER_SEC: u64 = 1_000_000;

pub fn micros_to_ms(us: Micros) -> f64 {
    us as f64 / 1_000.0
}

pub fn ms_to_micros(ms: f64) -> Micros {
    (ms * 1_000.0).round().max(0.0) as Micros
}

pub fn secs_to_micros(s: f64) -> Micros {
    (s * 1_000_000.0).round().max(0.0) as Micros
}

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Onboard unit identity; one per vehicle for the life of a run.
    VehicleId,
    "veh"
);
id_type!(
    /// Roadside management node identity, assigned in deployment order.
    RsmuId,
    "rsmu"
);
id_type!(
    /// Ramp junction identity from the scenario geometry.
    JunctionId,
    "jct"
);
id_type!(
    /// Abnormal-event identity from the scenario event list.
    EventId,
    "evt"
);

/// Travel direction of a carriageway. `Forward` traffic moves toward
/// increasing station, `Reverse` toward decreasing station.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Reverse,
}

impl Direction {
    /// Sign of station change per meter traveled.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Reverse => -1.0,
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Forward => write!(f, "forward"),
            Direction::Reverse => write!(f, "reverse"),
        }
    }
}

/// Addressable party on the wire: an onboard unit, a roadside node, or the
/// cloud registry service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Viu(VehicleId),
    Rsmu(RsmuId),
    Cloud,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Viu(v) => write!(f, "{v}"),
            Endpoint::Rsmu(r) => write!(f, "{r}"),
            Endpoint::Cloud => write!(f, "cloud"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_conversions_round_trip() {
        assert_eq!(micros_to_ms(1_500), 1.5);
        assert_eq!(ms_to_micros(1.5), 1_500);
        assert_eq!(secs_to_micros(0.1), 100_000);
        assert_eq!(ms_to_micros(micros_to_ms(123_456)), 123_456);
    }

    #[test]
    fn endpoint_ordering_is_stable() {
        let mut eps = vec![
            Endpoint::Cloud,
            Endpoint::Rsmu(RsmuId(1)),
            Endpoint::Viu(VehicleId(0)),
            Endpoint::Rsmu(RsmuId(0)),
        ];
        eps.sort();
        assert_eq!(
            eps,
            vec![
                Endpoint::Viu(VehicleId(0)),
                Endpoint::Rsmu(RsmuId(0)),
                Endpoint::Rsmu(RsmuId(1)),
                Endpoint::Cloud,
            ]
        );
    }
}
