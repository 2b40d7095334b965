//! Experiment description and node placement.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelModel, Position};
use crate::energy::EnergyParams;
use crate::engine::rng::rng_stream;
use crate::error::{Error, Result};
use crate::ima::{NodeId, ProtocolParams};
use crate::mac::MacParams;

/// Radius of the volume around a coordinator in which unplaced sensors land.
pub const BODY_RADIUS_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    /// Drawn around the coordinator when absent.
    #[serde(default)]
    pub position: Option<Position>,
    #[serde(default = "default_sampling_period")]
    pub sampling_period_s: f64,
}

fn default_sampling_period() -> f64 {
    5.0
}

impl SensorConfig {
    pub fn random() -> Self {
        SensorConfig {
            position: None,
            sampling_period_s: default_sampling_period(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WbanConfig {
    pub coordinator: Position,
    pub sensors: Vec<SensorConfig>,
    #[serde(default)]
    pub uses_ima: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub space_m: [f64; 3],
    pub wbans: Vec<WbanConfig>,
    pub duration_s: f64,
    pub seed: u64,
    pub channel: ChannelModel,
    pub mac: MacParams,
    pub energy: EnergyParams,
    pub protocol: ProtocolParams,
    pub metric_sample_period_s: f64,
    pub outage_thresholds_db: Vec<f64>,
    /// Re-draw randomly placed sensors at every beacon.
    pub mobility: bool,
    pub max_sensors: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            space_m: [3.0, 3.0, 3.0],
            wbans: Vec::new(),
            duration_s: 3000.0,
            seed: 1,
            channel: ChannelModel::default(),
            mac: MacParams::default(),
            energy: EnergyParams::default(),
            protocol: ProtocolParams::default(),
            metric_sample_period_s: 10.0,
            outage_thresholds_db: vec![10.0, 17.3, 25.0],
            mobility: false,
            max_sensors: 8,
        }
    }
}

impl Scenario {
    /// Two coexisting WBANs with coordinators 2 m apart and eight randomly
    /// placed sensors each. WBAN 0 is the subject and runs IMA.
    pub fn paper_like() -> Self {
        let wban = |x: f64, ima: bool| WbanConfig {
            coordinator: Position::new(x, 1.5, 1.0),
            sensors: vec![SensorConfig::random(); 8],
            uses_ima: ima,
        };
        Scenario {
            wbans: vec![wban(0.5, true), wban(2.5, false)],
            ..Scenario::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let sc: Scenario = serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        let d = Sha256::digest(canonical.as_bytes());
        d.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.space_m.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::config("space_m extents must be > 0"));
        }
        if self.wbans.is_empty() {
            return Err(Error::config("wbans: at least one WBAN is required"));
        }
        if self.wbans.len() > u16::MAX as usize {
            return Err(Error::config("wbans: too many WBANs"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::config("duration_s must be > 0"));
        }
        if !(self.metric_sample_period_s.is_finite() && self.metric_sample_period_s > 0.0) {
            return Err(Error::config("metric_sample_period_s must be > 0"));
        }
        if self.outage_thresholds_db.iter().any(|t| t.is_nan()) {
            return Err(Error::config("outage_thresholds_db must not contain NaN"));
        }
        self.channel.validate()?;
        self.mac.validate()?;
        self.energy.validate()?;
        self.protocol.validate()?;
        for (w, wban) in self.wbans.iter().enumerate() {
            if !wban.coordinator.within(&self.space_m) {
                return Err(Error::config(format!(
                    "wbans[{w}].coordinator {:?} lies outside the space",
                    wban.coordinator
                )));
            }
            if wban.sensors.is_empty() || wban.sensors.len() > self.max_sensors {
                return Err(Error::config(format!(
                    "wbans[{w}].sensors must hold 1..={} sensors, got {}",
                    self.max_sensors,
                    wban.sensors.len()
                )));
            }
            for (s, sensor) in wban.sensors.iter().enumerate() {
                if let Some(p) = sensor.position {
                    if !p.within(&self.space_m) {
                        return Err(Error::config(format!(
                            "wbans[{w}].sensors[{s}].position {p:?} lies outside the space"
                        )));
                    }
                }
                if !(sensor.sampling_period_s.is_finite() && sensor.sampling_period_s > 0.0) {
                    return Err(Error::config(format!(
                        "wbans[{w}].sensors[{s}].sampling_period_s must be > 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A placed node.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub id: NodeId,
    pub position: Position,
    /// Whether the position came from the random body-volume draw.
    pub random: bool,
}

/// Uniform point in the body volume around `center`, clamped to the space.
pub fn draw_body_position<R: Rng>(rng: &mut R, center: &Position, space: &[f64; 3]) -> Position {
    let (dx, dy, dz) = loop {
        let v: (f64, f64, f64) = (
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if v.0 * v.0 + v.1 * v.1 + v.2 * v.2 <= 1.0 {
            break v;
        }
    };
    Position::new(
        (center.x + BODY_RADIUS_M * dx).clamp(0.0, space[0]),
        (center.y + BODY_RADIUS_M * dy).clamp(0.0, space[1]),
        (center.z + BODY_RADIUS_M * dz).clamp(0.0, space[2]),
    )
}

/// Places every node. Explicit positions are used as given; the rest are
/// drawn from one stream per sensor.
pub fn build_topology(scenario: &Scenario) -> Result<Vec<Placement>> {
    let mut out = Vec::new();
    for (w, wban) in scenario.wbans.iter().enumerate() {
        let w = w as u16;
        if !wban.coordinator.within(&scenario.space_m) {
            return Err(Error::config(format!(
                "wbans[{w}].coordinator lies outside the space"
            )));
        }
        out.push(Placement {
            id: NodeId::coordinator(w),
            position: wban.coordinator,
            random: false,
        });
        for (s, sensor) in wban.sensors.iter().enumerate() {
            let id = NodeId::new(w, s as u16 + 1);
            let placement = match sensor.position {
                Some(p) if p.within(&scenario.space_m) => Placement {
                    id,
                    position: p,
                    random: false,
                },
                Some(p) => {
                    return Err(Error::config(format!(
                        "sensor {id} position {p:?} lies outside the space"
                    )))
                }
                None => {
                    let mut rng = rng_stream(scenario.seed, &format!("topology/{id}"));
                    Placement {
                        id,
                        position: draw_body_position(
                            &mut rng,
                            &wban.coordinator,
                            &scenario.space_m,
                        ),
                        random: true,
                    }
                }
            };
            out.push(placement);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_like_is_valid() {
        let sc = Scenario::paper_like();
        sc.validate().unwrap();
        assert_eq!(sc.wbans.len(), 2);
        assert_eq!(sc.wbans[0].sensors.len(), 8);
        assert!((sc.wbans[0].coordinator.distance(&sc.wbans[1].coordinator) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_positions_ignore_seed() {
        let mut sc = Scenario::paper_like();
        for wban in &mut sc.wbans {
            let c = wban.coordinator;
            for (k, s) in wban.sensors.iter_mut().enumerate() {
                s.position = Some(Position::new(c.x, c.y, 0.1 * k as f64));
            }
        }
        let a = build_topology(&sc).unwrap();
        sc.seed = 999;
        let b = build_topology(&sc).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| !p.random));
    }

    #[test]
    fn random_layout_depends_only_on_seed() {
        let sc = Scenario::paper_like();
        assert_eq!(build_topology(&sc).unwrap(), build_topology(&sc).unwrap());
        let mut other = sc.clone();
        other.seed += 1;
        assert_ne!(
            build_topology(&sc).unwrap(),
            build_topology(&other).unwrap()
        );
        for p in build_topology(&sc).unwrap() {
            assert!(p.position.within(&sc.space_m));
            if p.random {
                let c = sc.wbans[p.id.wban as usize].coordinator;
                assert!(p.position.distance(&c) <= BODY_RADIUS_M + 1e-12);
            }
        }
    }

    #[test]
    fn out_of_space_sensor_rejected() {
        let mut sc = Scenario::paper_like();
        sc.wbans[0].sensors[0].position = Some(Position::new(5.0, 0.0, 0.0));
        assert!(sc.validate().is_err());
        assert!(build_topology(&sc).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let sc = Scenario::paper_like();
        let back = Scenario::from_json_str(&sc.to_json_pretty()).unwrap();
        assert_eq!(back, sc);
        assert_eq!(back.digest(), sc.digest());

        let mut v: serde_json::Value = serde_json::from_str(&sc.to_json_pretty()).unwrap();
        v["bogus"] = serde_json::json!(1);
        let err = Scenario::from_json_value(v).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let err = Scenario::from_json_str("{\n  \"duration_s\": \"x\"\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn sensor_count_limit() {
        let mut sc = Scenario::paper_like();
        sc.wbans[0].sensors.push(SensorConfig::random());
        assert!(sc.validate().is_err());
        sc.max_sensors = 9;
        assert!(sc.validate().is_ok());
    }
}
