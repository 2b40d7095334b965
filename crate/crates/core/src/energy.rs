//! Batteries and per-frame energy costs.
//!
//! Energy is stored as an integer count of femtojoules so that the drain
//! ledger and the residual always agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac::{Frame, MacParams};

const FJ_PER_MJ: f64 = 1e12;

fn mj_to_fj(mj: f64) -> u64 {
    (mj * FJ_PER_MJ).round() as u64
}

fn fj_to_mj(fj: u64) -> f64 {
    fj as f64 / FJ_PER_MJ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    pub initial_mj: f64,
    pub p_tx_circuit_mw: f64,
    pub p_rx_circuit_mw: f64,
    pub idle_power_mw: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            initial_mj: 150.0,
            p_tx_circuit_mw: 30.0,
            p_rx_circuit_mw: 25.0,
            idle_power_mw: 0.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("energy.initial_mj", self.initial_mj),
            ("energy.p_tx_circuit_mw", self.p_tx_circuit_mw),
            ("energy.p_rx_circuit_mw", self.p_rx_circuit_mw),
            ("energy.idle_power_mw", self.idle_power_mw),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.initial_mj > 1.0e6 {
            return Err(Error::config("energy.initial_mj must be <= 1e6"));
        }
        Ok(())
    }
}

/// mW × s = mJ.
pub fn tx_energy(frame: &Frame, mac: &MacParams, e: &EnergyParams) -> f64 {
    (e.p_tx_circuit_mw + mac.tx_power_dbm.to_mw()) * mac.airtime_s(frame.size_bits)
}

pub fn rx_energy(frame: &Frame, mac: &MacParams, e: &EnergyParams) -> f64 {
    rx_energy_for(mac.airtime_s(frame.size_bits), e)
}

/// Receive cost for `seconds` of listening to a frame.
pub fn rx_energy_for(seconds: f64, e: &EnergyParams) -> f64 {
    e.p_rx_circuit_mw * seconds
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Battery {
    initial_fj: u64,
    residual_fj: u64,
    drained_fj: u64,
    /// Mains-powered nodes never lose charge.
    unconstrained: bool,
}

impl Battery {
    pub fn new(initial_mj: f64) -> Self {
        let fj = mj_to_fj(initial_mj);
        Battery {
            initial_fj: fj,
            residual_fj: fj,
            drained_fj: 0,
            unconstrained: false,
        }
    }

    pub fn unconstrained(initial_mj: f64) -> Self {
        Battery {
            unconstrained: true,
            ..Battery::new(initial_mj)
        }
    }

    pub fn initial_mj(&self) -> f64 {
        fj_to_mj(self.initial_fj)
    }

    pub fn residual_mj(&self) -> f64 {
        fj_to_mj(self.residual_fj)
    }

    /// Sum of all amounts actually taken from this battery.
    pub fn drained_mj(&self) -> f64 {
        fj_to_mj(self.drained_fj)
    }

    pub fn is_unconstrained(&self) -> bool {
        self.unconstrained
    }

    pub fn is_alive(&self) -> bool {
        self.unconstrained || self.residual_fj > 0
    }

    /// Takes `amount_mj`, clamping at empty. Returns the amount actually
    /// removed (zero for unconstrained batteries).
    pub fn drain(&mut self, amount_mj: f64) -> Result<f64> {
        if !(amount_mj.is_finite() && amount_mj >= 0.0) {
            return Err(Error::invalid(format!(
                "drain amount must be finite and >= 0, got {amount_mj}"
            )));
        }
        if self.unconstrained {
            return Ok(0.0);
        }
        let taken = mj_to_fj(amount_mj).min(self.residual_fj);
        self.residual_fj -= taken;
        self.drained_fj += taken;
        Ok(fj_to_mj(taken))
    }
}

/// Drains `amount_mj` and reports whether the node is still alive.
pub fn drain(mut battery: Battery, amount_mj: f64) -> Result<(Battery, bool)> {
    battery.drain(amount_mj)?;
    let alive = battery.is_alive();
    Ok((battery, alive))
}

/// Sum of residual energies.
pub fn wban_lifetime(batteries: &[Battery]) -> Result<f64> {
    if batteries.is_empty() {
        return Err(Error::invalid("lifetime needs at least one battery"));
    }
    let total: u64 = batteries.iter().map(|b| b.residual_fj).sum();
    Ok(fj_to_mj(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ima::NodeId;
    use crate::mac::{Destination, FrameKind, Payload};
    use proptest::prelude::*;

    fn frame(kind: FrameKind) -> Frame {
        Frame::new(
            kind,
            NodeId::new(0, 1),
            Destination::Broadcast,
            Payload::None,
            &MacParams::default(),
        )
    }

    #[test]
    fn tx_energy_examples() {
        let mac = MacParams::default();
        let e = EnergyParams::default();
        assert!((tx_energy(&frame(FrameKind::Data), &mac, &e) - 0.1233).abs() < 1e-4);
        assert!((tx_energy(&frame(FrameKind::Rts), &mac, &e) - 0.01926).abs() < 1e-5);
        let mut tiny = frame(FrameKind::Rts);
        tiny.size_bits = 0;
        assert_eq!(tx_energy(&tiny, &mac, &e), 0.0);
    }

    #[test]
    fn rx_energy_examples() {
        let mac = MacParams::default();
        let e = EnergyParams::default();
        assert!((rx_energy(&frame(FrameKind::Data), &mac, &e) - 0.1024).abs() < 1e-12);
        assert!((rx_energy(&frame(FrameKind::Ack), &mac, &e) - 0.0088).abs() < 1e-12);
        let zero = EnergyParams {
            p_rx_circuit_mw: 0.0,
            ..e
        };
        assert_eq!(rx_energy(&frame(FrameKind::Data), &mac, &zero), 0.0);
    }

    #[test]
    fn drain_examples() {
        let (b, alive) = drain(Battery::new(150.0), 0.1233).unwrap();
        assert!(alive);
        assert_eq!(b.residual_mj(), 149.8767);

        let (b, alive) = drain(Battery::new(0.1), 0.2).unwrap();
        assert!(!alive);
        assert_eq!(b.residual_mj(), 0.0);
        assert_eq!(b.drained_mj(), 0.1);

        let (b, _) = drain(Battery::new(150.0), 0.0).unwrap();
        assert_eq!(b.residual_mj(), 150.0);

        assert!(drain(Battery::new(1.0), -1.0).is_err());
    }

    #[test]
    fn unconstrained_never_drains() {
        let mut b = Battery::unconstrained(150.0);
        assert_eq!(b.drain(1000.0).unwrap(), 0.0);
        assert_eq!(b.residual_mj(), 150.0);
        assert!(b.is_alive());
    }

    #[test]
    fn lifetime_examples() {
        let full: Vec<_> = (0..8).map(|_| Battery::new(150.0)).collect();
        assert_eq!(wban_lifetime(&full).unwrap(), 1200.0);
        let dead: Vec<_> = (0..3)
            .map(|_| {
                let mut b = Battery::new(5.0);
                b.drain(10.0).unwrap();
                b
            })
            .collect();
        assert_eq!(wban_lifetime(&dead).unwrap(), 0.0);
        assert_eq!(
            wban_lifetime(&[Battery::new(100.0), Battery::new(50.0)]).unwrap(),
            150.0
        );
        assert!(wban_lifetime(&[]).is_err());
    }

    proptest! {
        #[test]
        fn conservation(amounts in proptest::collection::vec(0.0f64..2.0, 0..400)) {
            let mut b = Battery::new(150.0);
            let mut ledger = 0u64;
            let mut last = b.residual_mj();
            for a in amounts {
                let taken = b.drain(a).unwrap();
                ledger += mj_to_fj(taken);
                prop_assert!(b.residual_mj() <= last);
                last = b.residual_mj();
            }
            prop_assert_eq!(b.initial_fj - b.residual_fj, ledger);
            prop_assert!((b.initial_mj() - b.residual_mj() - b.drained_mj()).abs() <= 1e-12);
        }
    }
}
