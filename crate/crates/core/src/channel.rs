//! Radio propagation and power bookkeeping.
//!
//! Path loss follows a log-distance law referenced to 1 m, with log-normal
//! shadowing supplied by the caller. All SINR arithmetic happens on linear
//! milliwatts; decibels only appear at the interfaces.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance floor applied before taking the logarithm, in meters.
pub const MIN_DISTANCE_M: f64 = 0.1;

/// A point in the simulated space, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// True when every coordinate lies in `[0, extent]` on its axis.
    pub fn within(&self, space: &[f64; 3]) -> bool {
        self.is_finite()
            && (0.0..=space[0]).contains(&self.x)
            && (0.0..=space[1]).contains(&self.y)
            && (0.0..=space[2]).contains(&self.z)
    }
}

/// Absolute power level in dBm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerDbm(pub f64);

impl PowerDbm {
    pub fn from_mw(mw: f64) -> Self {
        PowerDbm(mw_to_dbm(mw))
    }

    pub fn dbm(self) -> f64 {
        self.0
    }

    pub fn to_mw(self) -> f64 {
        dbm_to_mw(self.0)
    }
}

impl fmt::Display for PowerDbm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} dBm", self.0)
    }
}

impl Add<f64> for PowerDbm {
    type Output = PowerDbm;
    fn add(self, db: f64) -> PowerDbm {
        PowerDbm(self.0 + db)
    }
}

impl Sub<f64> for PowerDbm {
    type Output = PowerDbm;
    fn sub(self, db: f64) -> PowerDbm {
        PowerDbm(self.0 - db)
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Propagation constants shared by every link in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub path_loss_exponent: f64,
    /// Loss at the 1 m reference distance, dB.
    pub reference_loss_db: f64,
    /// Standard deviation of log-normal shadowing, dB.
    pub shadowing_sigma_db: f64,
    pub noise_floor_dbm: PowerDbm,
    /// Lifetime of a shadowing draw and of a beacon measurement, ms.
    pub coherence_time_ms: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            path_loss_exponent: 4.22,
            // Free-space loss at 1 m for 2.4 GHz.
            reference_loss_db: 40.05,
            shadowing_sigma_db: 6.81,
            noise_floor_dbm: PowerDbm(-102.0),
            coherence_time_ms: 500.0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.path_loss_exponent.is_finite() && self.path_loss_exponent > 0.0) {
            return Err(Error::config("channel.path_loss_exponent must be > 0"));
        }
        if !self.reference_loss_db.is_finite() {
            return Err(Error::config("channel.reference_loss_db must be finite"));
        }
        if !(self.shadowing_sigma_db.is_finite() && self.shadowing_sigma_db >= 0.0) {
            return Err(Error::config("channel.shadowing_sigma_db must be >= 0"));
        }
        if !self.noise_floor_dbm.0.is_finite() {
            return Err(Error::config("channel.noise_floor_dbm must be finite"));
        }
        if !(self.coherence_time_ms.is_finite() && self.coherence_time_ms > 0.0) {
            return Err(Error::config("channel.coherence_time_ms must be > 0"));
        }
        Ok(())
    }
}

/// One received-power observation on a directed link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample<N> {
    pub tx_node: N,
    pub rx_node: N,
    pub rx_power_dbm: PowerDbm,
    pub timestamp_ms: f64,
}

impl<N> LinkSample<N> {
    /// Whether this sample may still be paired with a measurement taken at `at_ms`.
    pub fn usable_at(&self, at_ms: f64, window_ms: f64) -> Result<bool> {
        sample_is_valid(self.timestamp_ms, at_ms, window_ms)
    }
}

/// Log-distance path loss, `PL0 + 10 n log10(d / 1 m)`.
pub fn path_loss_db(distance_m: f64, model: &ChannelModel) -> Result<f64> {
    if !distance_m.is_finite() || distance_m < 0.0 {
        return Err(Error::invalid(format!(
            "distance must be finite and non-negative, got {distance_m}"
        )));
    }
    let d = distance_m.max(MIN_DISTANCE_M);
    Ok(model.reference_loss_db + 10.0 * model.path_loss_exponent * d.log10())
}

pub fn received_power_dbm(
    tx_power: PowerDbm,
    distance_m: f64,
    shadowing_db: f64,
    model: &ChannelModel,
) -> Result<PowerDbm> {
    if !tx_power.0.is_finite() || !shadowing_db.is_finite() {
        return Err(Error::invalid(
            "transmit power and shadowing must be finite",
        ));
    }
    Ok(PowerDbm(
        tx_power.0 - path_loss_db(distance_m, model)? + shadowing_db,
    ))
}

/// Slack for threshold tests on dB values that went through linear space.
pub const DB_TOLERANCE: f64 = 1e-9;

/// Inclusive `value >= threshold`, forgiving round-off from dB conversions.
pub fn meets_threshold(value_db: f64, threshold_db: f64) -> bool {
    value_db >= threshold_db - DB_TOLERANCE
}

/// Signal to interference plus noise ratio, in dB.
///
/// Every term is converted to milliwatts and the ratio
/// `P / (sum(I) + N0)` is formed in the linear domain.
pub fn sinr_db(desired: PowerDbm, interferers: &[PowerDbm], noise: PowerDbm) -> Result<f64> {
    if !desired.0.is_finite() || !noise.0.is_finite() {
        return Err(Error::invalid("desired and noise power must be finite"));
    }
    if interferers.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::invalid("interferer powers must be finite"));
    }
    let interference_mw: f64 = interferers.iter().map(|p| p.to_mw()).sum();
    Ok(sinr_from_mw(
        desired.to_mw(),
        interference_mw,
        noise.to_mw(),
    ))
}

/// Linear-domain core of [`sinr_db`], for callers that already hold milliwatts.
pub fn sinr_from_mw(desired_mw: f64, interference_mw: f64, noise_mw: f64) -> f64 {
    mw_to_dbm(desired_mw / (interference_mw + noise_mw))
}

pub fn snr_db(desired: PowerDbm, noise: PowerDbm) -> Result<f64> {
    sinr_db(desired, &[], noise)
}

/// Pairing rule for measurements: valid iff `later - earlier < window` (strict).
pub fn sample_is_valid(sample_time_ms: f64, later_time_ms: f64, window_ms: f64) -> Result<bool> {
    if later_time_ms < sample_time_ms {
        return Err(Error::invalid(format!(
            "later time {later_time_ms} ms precedes sample time {sample_time_ms} ms"
        )));
    }
    Ok(later_time_ms - sample_time_ms < window_ms)
}

/// Empirical `Pr(SINR <= threshold)`.
pub fn outage_probability(sinr_samples_db: &[f64], threshold_db: f64) -> Result<f64> {
    if sinr_samples_db.is_empty() {
        return Err(Error::invalid(
            "outage probability needs at least one sample",
        ));
    }
    let below = sinr_samples_db
        .iter()
        .filter(|&&s| s <= threshold_db)
        .count();
    Ok(below as f64 / sinr_samples_db.len() as f64)
}
