//! Device clock model and periodic time-signal correction.
//!
//! Every device carries an offset (milliseconds) and a drift rate (parts per
//! million). Between corrections the device reading is
//! `true + offset + drift * elapsed_since_correction / 1e6` with all times in
//! milliseconds. A broadcast time signal (modeled lossless and simultaneous,
//! as from a shortwave receiver) resets the offset to a fresh residual drawn
//! uniformly from `[-residual_bound, +residual_bound]` without touching the
//! drift rate. With corrections every period P, any two device readings stay
//! within `2 * (residual_bound + drift_max * P)` of each other.

use crate::types::{micros_to_ms, Micros};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    pub offset_ms: f64,
    pub drift_ppm: f64,
    pub last_correction_us: Micros,
    pub residual_bound_ms: f64,
}

impl ClockState {
    /// A perfectly synchronized, drift-free clock.
    pub fn ideal() -> Self {
        ClockState {
            offset_ms: 0.0,
            drift_ppm: 0.0,
            last_correction_us: 0,
            residual_bound_ms: 0.0,
        }
    }

    /// Device reading at a true instant, in device milliseconds.
    pub fn local_time(&self, true_us: Micros) -> f64 {
        let t_ms = micros_to_ms(true_us);
        let elapsed_ms = t_ms - micros_to_ms(self.last_correction_us);
        t_ms + self.offset_ms + self.drift_ppm * elapsed_ms / 1e6
    }

    /// Apply a time-signal correction at a true instant: the offset is
    /// resampled within the residual bound and the correction epoch moves to
    /// now. Drift is a hardware property and is unchanged. Consumes exactly
    /// one draw.
    pub fn apply_time_signal<R: Rng>(&mut self, true_us: Micros, rng: &mut R) {
        let unit: f64 = rng.gen::<f64>();
        self.offset_ms = (2.0 * unit - 1.0) * self.residual_bound_ms;
        self.last_correction_us = true_us;
    }

    /// Absolute device error at a true instant, in milliseconds.
    pub fn error_ms(&self, true_us: Micros) -> f64 {
        self.local_time(true_us) - micros_to_ms(true_us)
    }
}

/// Clock population parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimesyncParams {
    pub residual_bound_ms: f64,
    pub drift_max_ppm: f64,
    pub signal_period_s: f64,
}

impl Default for TimesyncParams {
    fn default() -> Self {
        TimesyncParams {
            residual_bound_ms: 1.0,
            drift_max_ppm: 10.0,
            signal_period_s: 60.0,
        }
    }
}

impl TimesyncParams {
    /// Worst-case reading difference between any two corrected devices.
    pub fn skew_bound_ms(&self) -> f64 {
        2.0 * (self.residual_bound_ms + self.drift_max_ppm * self.signal_period_s * 1_000.0 / 1e6)
    }
}

/// Create a device clock at a true instant: drift is drawn uniformly from
/// `[-drift_max, +drift_max]`, then the initial offset is drawn as a time
/// signal. Consumes exactly two draws, drift first.
pub fn init_clock<R: Rng>(params: &TimesyncParams, true_us: Micros, rng: &mut R) -> ClockState {
    let unit: f64 = rng.gen::<f64>();
    let drift_ppm = (2.0 * unit - 1.0) * params.drift_max_ppm;
    let mut clock = ClockState {
        offset_ms: 0.0,
        drift_ppm,
        last_correction_us: true_us,
        residual_bound_ms: params.residual_bound_ms,
    };
    clock.apply_time_signal(true_us, rng);
    clock
}
