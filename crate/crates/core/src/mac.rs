//! CSMA/CA medium access: frames, carrier sensing, binary exponential
//! backoff, and reception resolution under interference.
//!
//! The functions here are pure decisions. The simulator in
//! [`crate::engine`] owns the clock and the medium, and calls into them.

use serde::{Deserialize, Serialize};

use crate::channel::{self, PowerDbm};
use crate::error::{Error, Result};
use crate::ima::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FrameKind {
    Beacon,
    Rts,
    Cts,
    Data,
    Ack,
    Winner,
}

impl FrameKind {
    pub const ALL: [FrameKind; 6] = [
        FrameKind::Beacon,
        FrameKind::Rts,
        FrameKind::Cts,
        FrameKind::Data,
        FrameKind::Ack,
        FrameKind::Winner,
    ];

    /// Frames that go through carrier sensing; the rest are sent immediately.
    pub fn contends(self) -> bool {
        matches!(self, FrameKind::Rts | FrameKind::Cts | FrameKind::Data)
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Beacon => "BEACON",
            FrameKind::Rts => "RTS",
            FrameKind::Cts => "CTS",
            FrameKind::Data => "DATA",
            FrameKind::Ack => "ACK",
            FrameKind::Winner => "WINNER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    Broadcast,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    None,
    Beacon {
        superframe: u64,
    },
    Rts {
        seq: u64,
    },
    Cts {
        residual_energy_mj: f64,
        sinr_db: f64,
    },
    Winner {
        relay: Option<NodeId>,
    },
    Data {
        origin: NodeId,
        seq: u64,
    },
    Ack {
        origin: NodeId,
        seq: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: FrameKind,
    pub src: NodeId,
    pub dst: Destination,
    pub size_bits: u32,
    pub payload: Payload,
}

impl Frame {
    pub fn new(
        kind: FrameKind,
        src: NodeId,
        dst: Destination,
        payload: Payload,
        mac: &MacParams,
    ) -> Self {
        Frame {
            kind,
            src,
            dst,
            size_bits: mac.size_bits(kind),
            payload,
        }
    }

    pub fn addressed_to(&self, node: NodeId) -> bool {
        match self.dst {
            Destination::Node(n) => n == node,
            Destination::Broadcast => self.src.wban == node.wban,
        }
    }

    pub fn airtime_ns(&self, mac: &MacParams) -> u64 {
        mac.airtime_ns(self.size_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSizes {
    pub beacon: u32,
    pub rts: u32,
    pub cts: u32,
    pub data: u32,
    pub ack: u32,
    pub winner: u32,
}

impl Default for FrameSizes {
    fn default() -> Self {
        FrameSizes {
            beacon: 152,
            rts: 160,
            cts: 176,
            data: 1024,
            ack: 88,
            winner: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacParams {
    pub bit_rate_bps: f64,
    pub slot_duration_us: f64,
    pub min_be: u32,
    pub max_be: u32,
    pub cca_threshold_dbm: PowerDbm,
    pub sensitivity_dbm: PowerDbm,
    pub tx_power_dbm: PowerDbm,
    /// Receive-to-transmit switch time; also the gap before CTS/ACK replies.
    pub turnaround_us: f64,
    /// Fraction of the beacon period open for contention.
    pub cap_fraction: f64,
    pub sizes_bits: FrameSizes,
}

impl Default for MacParams {
    fn default() -> Self {
        MacParams {
            bit_rate_bps: 250_000.0,
            slot_duration_us: 320.0,
            min_be: 3,
            max_be: 5,
            cca_threshold_dbm: PowerDbm(-84.7),
            sensitivity_dbm: PowerDbm(-84.7),
            tx_power_dbm: PowerDbm(-10.0),
            turnaround_us: 192.0,
            cap_fraction: 1.0,
            sizes_bits: FrameSizes::default(),
        }
    }
}

impl MacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bit_rate_bps.is_finite() && self.bit_rate_bps > 0.0) {
            return Err(Error::config("mac.bit_rate_bps must be > 0"));
        }
        if !(self.slot_duration_us.is_finite() && self.slot_duration_us > 0.0) {
            return Err(Error::config("mac.slot_duration_us must be > 0"));
        }
        if self.min_be > self.max_be || self.max_be > 20 {
            return Err(Error::config("mac.min_be must be <= mac.max_be <= 20"));
        }
        if !(self.turnaround_us.is_finite() && self.turnaround_us >= 0.0) {
            return Err(Error::config("mac.turnaround_us must be >= 0"));
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return Err(Error::config("mac.cap_fraction must be in (0, 1]"));
        }
        for (p, name) in [
            (self.cca_threshold_dbm, "mac.cca_threshold_dbm"),
            (self.sensitivity_dbm, "mac.sensitivity_dbm"),
            (self.tx_power_dbm, "mac.tx_power_dbm"),
        ] {
            if !p.0.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if FrameKind::ALL.iter().any(|&k| self.size_bits(k) == 0) {
            return Err(Error::config("mac.sizes_bits entries must be > 0"));
        }
        Ok(())
    }

    pub fn size_bits(&self, kind: FrameKind) -> u32 {
        let s = &self.sizes_bits;
        match kind {
            FrameKind::Beacon => s.beacon,
            FrameKind::Rts => s.rts,
            FrameKind::Cts => s.cts,
            FrameKind::Data => s.data,
            FrameKind::Ack => s.ack,
            FrameKind::Winner => s.winner,
        }
    }

    pub fn airtime_s(&self, size_bits: u32) -> f64 {
        size_bits as f64 / self.bit_rate_bps
    }

    pub fn airtime_ns(&self, size_bits: u32) -> u64 {
        (size_bits as f64 * 1e9 / self.bit_rate_bps).round() as u64
    }

    pub fn slot_ns(&self) -> u64 {
        (self.slot_duration_us * 1e3).round() as u64
    }

    pub fn turnaround_ns(&self) -> u64 {
        (self.turnaround_us * 1e3).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Busy,
    Idle,
}

/// Clear channel assessment over the powers currently arriving at a node.
pub fn carrier_sense(arriving: &[PowerDbm], cca_threshold: PowerDbm) -> ChannelState {
    if arriving.is_empty() {
        return ChannelState::Idle;
    }
    let total_mw: f64 = arriving.iter().map(|p| p.to_mw()).sum();
    if total_mw >= cca_threshold.to_mw() {
        ChannelState::Busy
    } else {
        ChannelState::Idle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackoffState {
    pub backoff_exponent: u32,
    pub attempt_count: u32,
}

impl BackoffState {
    pub fn new(mac: &MacParams) -> Self {
        BackoffState {
            backoff_exponent: mac.min_be,
            attempt_count: 0,
        }
    }

    /// Largest draw allowed at the current exponent.
    pub fn max_draw(&self) -> u32 {
        (1u32 << self.backoff_exponent) - 1
    }

    /// Records a busy assessment: one more attempt, exponent grows up to `max_be`.
    pub fn on_busy(&mut self, mac: &MacParams) {
        self.attempt_count += 1;
        self.backoff_exponent = (self.backoff_exponent + 1).min(mac.max_be);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backoff {
    Wait { ns: u64 },
    GiveUp,
}

/// Delay for `rand_draw` backoff slots, or give-up once retries are spent.
pub fn backoff_delay(
    state: &BackoffState,
    rand_draw: u32,
    mac: &MacParams,
    max_retries: u32,
) -> Result<Backoff> {
    if state.attempt_count >= max_retries {
        return Ok(Backoff::GiveUp);
    }
    if rand_draw > state.max_draw() {
        return Err(Error::invalid(format!(
            "backoff draw {rand_draw} exceeds 2^{} - 1",
            state.backoff_exponent
        )));
    }
    Ok(Backoff::Wait {
        ns: rand_draw as u64 * mac.slot_ns(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptionOutcome {
    pub decoded: bool,
    pub sinr_db: f64,
}

/// Decides a reception from the desired power and the worst interference
/// seen over the frame's airtime.
pub fn resolve_reception(
    rx_power: PowerDbm,
    peak_interference_mw: f64,
    noise: PowerDbm,
    sensitivity: PowerDbm,
    sinr_thr_db: f64,
) -> ReceptionOutcome {
    let sinr_db = channel::sinr_from_mw(rx_power.to_mw(), peak_interference_mw, noise.to_mw());
    ReceptionOutcome {
        decoded: channel::meets_threshold(rx_power.0, sensitivity.0)
            && channel::meets_threshold(sinr_db, sinr_thr_db),
        sinr_db,
    }
}
