//! Interference mitigation for coexisting wireless body area networks.
//!
//! A sensor with a packet broadcasts an RTS; nearby members of its own WBAN
//! that hear both the coordinator's beacon and the RTS well enough offer to
//! relay. The one with the most residual energy forwards the packet.
//!
//! [`engine`] runs whole scenarios; the other modules hold the pure pieces
//! (channel, MAC, protocol rules, energy, metrics) it is built from.

pub mod channel;
pub mod energy;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod ima;
pub mod mac;
pub mod metrics;
mod serde_inf;

pub use engine::{run_scenario, Scenario};
pub use error::{Error, Result};
pub use ima::NodeId;
pub use metrics::MetricsReport;
