//! Lossy distance-dependent radio channel.
//!
//! Loss probability is piecewise linear with a knee: it climbs gently from
//! `base_loss` at distance 0 to `knee_loss` at `knee_distance_m`, then much
//! more steeply to 1.0 at `max_range_m`, and is 1.0 beyond. When the local
//! linked-vehicle density exceeds `density_threshold_per_km`, a flat
//! `density_penalty` is added (clamped to 1.0).
//!
//! Sampling consumes exactly two draws from the run's random stream per
//! transmission, in order: the loss draw, then the latency jitter draw. The
//! latency draw happens even for dropped transmissions so that the stream
//! position never depends on verdicts.

use crate::types::{Endpoint, Micros};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DSRC: &str = "dsrc";
pub const CV2X: &str = "cv2x";

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("unknown channel profile '{0}' (expected dsrc or cv2x)")]
    UnknownProfile(String),
    #[error("profile '{name}' invalid: {reason}")]
    InvalidProfile { name: String, reason: String },
}

/// Radio technology parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechProfile {
    pub name: String,
    pub max_range_m: f64,
    pub knee_distance_m: f64,
    pub base_loss: f64,
    pub knee_loss: f64,
    pub latency_base_ms: f64,
    /// Half-width of the uniform latency jitter.
    pub latency_jitter_ms: f64,
    pub density_threshold_per_km: f64,
    pub density_penalty: f64,
}

impl TechProfile {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let fail = |reason: String| ChannelError::InvalidProfile {
            name: self.name.clone(),
            reason,
        };
        if !(self.max_range_m > 0.0) {
            return Err(fail(format!("max range {} must be positive", self.max_range_m)));
        }
        if !(self.knee_distance_m > 0.0 && self.knee_distance_m < self.max_range_m) {
            return Err(fail(format!(
                "knee distance {} must lie strictly inside (0, {})",
                self.knee_distance_m, self.max_range_m
            )));
        }
        for (label, p) in [
            ("base_loss", self.base_loss),
            ("knee_loss", self.knee_loss),
            ("density_penalty", self.density_penalty),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(fail(format!("{label} {p} outside [0, 1]")));
            }
        }
        if self.knee_loss < self.base_loss {
            return Err(fail(format!(
                "knee loss {} below base loss {}",
                self.knee_loss, self.base_loss
            )));
        }
        if !(self.latency_base_ms >= 0.0
            && self.latency_jitter_ms >= 0.0
            && self.latency_jitter_ms <= self.latency_base_ms)
        {
            return Err(fail(format!(
                "latency base {} with jitter {} would allow negative latency",
                self.latency_base_ms, self.latency_jitter_ms
            )));
        }
        if !(self.density_threshold_per_km >= 0.0) {
            return Err(fail("density threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn max_latency_ms(&self) -> f64 {
        self.latency_base_ms + self.latency_jitter_ms
    }
}

/// Built-in profile presets.
pub fn preset(name: &str) -> Result<TechProfile, ChannelError> {
    match name {
        DSRC => Ok(TechProfile {
            name: DSRC.into(),
            max_range_m: 500.0,
            knee_distance_m: 300.0,
            base_loss: 0.01,
            knee_loss: 0.10,
            latency_base_ms: 18.0,
            latency_jitter_ms: 2.0,
            density_threshold_per_km: 100.0,
            density_penalty: 0.15,
        }),
        CV2X => Ok(TechProfile {
            name: CV2X.into(),
            max_range_m: 1_000.0,
            knee_distance_m: 600.0,
            base_loss: 0.0,
            knee_loss: 0.02,
            latency_base_ms: 12.0,
            latency_jitter_ms: 3.0,
            density_threshold_per_km: 100.0,
            density_penalty: 0.0,
        }),
        other => Err(ChannelError::UnknownProfile(other.into())),
    }
}

/// Loss probability at a planar distance and local density.
pub fn loss_probability(profile: &TechProfile, distance_m: f64, density_per_km: f64) -> f64 {
    let base = if distance_m <= profile.knee_distance_m {
        profile.base_loss
            + (profile.knee_loss - profile.base_loss) * distance_m / profile.knee_distance_m
    } else if distance_m <= profile.max_range_m {
        profile.knee_loss
            + (1.0 - profile.knee_loss) * (distance_m - profile.knee_distance_m)
                / (profile.max_range_m - profile.knee_distance_m)
    } else {
        1.0
    };
    let penalty = if density_per_km > profile.density_threshold_per_km {
        profile.density_penalty
    } else {
        0.0
    };
    (base + penalty).min(1.0)
}

/// One attempted transmission as the channel sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub distance_m: f64,
    pub density_per_km: f64,
    pub send_us: Micros,
}

/// Sampled channel verdict for one transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryOutcome {
    pub delivered: bool,
    /// Arrival instant; present only when delivered.
    pub arrival_us: Option<Micros>,
    pub loss_probability: f64,
    pub latency_ms: f64,
}

/// Sample one transmission: a Bernoulli loss draw followed by a uniform
/// latency draw. Arrival is `send + base + U(-jitter, +jitter)`.
pub fn sample_delivery<R: Rng>(
    profile: &TechProfile,
    tx: &Transmission,
    rng: &mut R,
) -> DeliveryOutcome {
    let loss = loss_probability(profile, tx.distance_m, tx.density_per_km);
    let delivered = rng.gen::<f64>() >= loss;
    let jitter_unit: f64 = rng.gen::<f64>();
    let latency_ms =
        (profile.latency_base_ms + (2.0 * jitter_unit - 1.0) * profile.latency_jitter_ms).max(0.0);
    let arrival_us = delivered.then(|| tx.send_us + crate::types::ms_to_micros(latency_ms));
    DeliveryOutcome {
        delivered,
        arrival_us,
        loss_probability: loss,
        latency_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RsmuId;
    use crate::types::VehicleId;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_validate() {
        preset(DSRC).unwrap().validate().unwrap();
        preset(CV2X).unwrap().validate().unwrap();
        assert!(matches!(
            preset("wimax"),
            Err(ChannelError::UnknownProfile(_))
        ));
    }

    #[test]
    fn dsrc_loss_values_along_the_curve() {
        let p = preset(DSRC).unwrap();
        assert_relative_eq!(loss_probability(&p, 0.0, 0.0), 0.01);
        // Halfway to the knee: 0.01 + (0.10 - 0.01) * 150/300.
        assert_relative_eq!(loss_probability(&p, 150.0, 0.0), 0.055);
        assert_relative_eq!(loss_probability(&p, 300.0, 0.0), 0.10);
        assert_relative_eq!(loss_probability(&p, 500.0, 0.0), 1.0);
        assert_relative_eq!(loss_probability(&p, 501.0, 0.0), 1.0);
    }

    #[test]
    fn density_penalty_applies_above_threshold_and_clamps() {
        let p = preset(DSRC).unwrap();
        assert_relative_eq!(loss_probability(&p, 150.0, 100.0), 0.055);
        assert_relative_eq!(loss_probability(&p, 150.0, 101.0), 0.205);
        assert_relative_eq!(loss_probability(&p, 499.0, 150.0), 1.0);
        let c = preset(CV2X).unwrap();
        assert_relative_eq!(
            loss_probability(&c, 300.0, 250.0),
            loss_probability(&c, 300.0, 0.0)
        );
    }

    #[test]
    fn loss_is_monotone_in_distance_at_one_meter_steps() {
        for name in [DSRC, CV2X] {
            let p = preset(name).unwrap();
            let mut prev = -1.0;
            for d in 0..=(p.max_range_m as u32 + 100) {
                let l = loss_probability(&p, f64::from(d), 0.0);
                assert!(l >= prev, "{name} not monotone at {d}");
                prev = l;
            }
        }
    }

    #[test]
    fn slope_steepens_after_the_knee() {
        for name in [DSRC, CV2X] {
            let p = preset(name).unwrap();
            let pre = (p.knee_loss - p.base_loss) / p.knee_distance_m;
            let post = (1.0 - p.knee_loss) / (p.max_range_m - p.knee_distance_m);
            assert!(post > pre, "{name}: post-knee slope {post} <= pre {pre}");
        }
    }

    #[test]
    fn cv2x_beats_dsrc_within_effective_range() {
        let d = preset(DSRC).unwrap();
        let c = preset(CV2X).unwrap();
        for dist in 0..=600u32 {
            for density in [0.0, 50.0, 150.0, 300.0] {
                let lc = loss_probability(&c, f64::from(dist), density);
                let ld = loss_probability(&d, f64::from(dist), density);
                assert!(lc < ld, "at {dist} m, density {density}: {lc} >= {ld}");
            }
        }
    }

    #[test]
    fn monte_carlo_matches_loss_probability() {
        let p = preset(DSRC).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tx = Transmission {
            sender: Endpoint::Viu(VehicleId(0)),
            receiver: Endpoint::Rsmu(RsmuId(0)),
            distance_m: 150.0,
            density_per_km: 10.0,
            send_us: 0,
        };
        let trials = 10_000;
        let mut dropped = 0;
        for _ in 0..trials {
            let out = sample_delivery(&p, &tx, &mut rng);
            if !out.delivered {
                dropped += 1;
            } else {
                let arrival = out.arrival_us.unwrap();
                let lat_ms = (arrival - tx.send_us) as f64 / 1_000.0;
                assert!((16.0..=20.0).contains(&lat_ms), "latency {lat_ms}");
            }
        }
        let observed = dropped as f64 / trials as f64;
        assert!(
            (observed - 0.055).abs() <= 0.01,
            "observed loss {observed} not within 0.01 of 0.055"
        );
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let p = preset(CV2X).unwrap();
        let tx = Transmission {
            sender: Endpoint::Viu(VehicleId(1)),
            receiver: Endpoint::Rsmu(RsmuId(2)),
            distance_m: 420.0,
            density_per_km: 80.0,
            send_us: 123_000,
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| {
                    let o = sample_delivery(&p, &tx, &mut rng);
                    (o.delivered, o.arrival_us)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn certain_loss_never_delivers_and_certain_success_always_does() {
        let p = preset(DSRC).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let far = Transmission {
            sender: Endpoint::Viu(VehicleId(0)),
            receiver: Endpoint::Rsmu(RsmuId(0)),
            distance_m: 900.0,
            density_per_km: 0.0,
            send_us: 0,
        };
        for _ in 0..200 {
            assert!(!sample_delivery(&p, &far, &mut rng).delivered);
        }
        let mut lossless = preset(CV2X).unwrap();
        lossless.base_loss = 0.0;
        lossless.knee_loss = 0.0;
        let near = Transmission {
            distance_m: 200.0,
            ..far
        };
        for _ in 0..200 {
            assert!(sample_delivery(&lossless, &near, &mut rng).delivered);
        }
    }
}
