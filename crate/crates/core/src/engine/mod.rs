//! Discrete-event simulation of coexisting WBANs.

pub mod event;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use event::{EventQueue, Nanos};
pub use rng::{rng_stream, SimRng};
pub use scenario::{build_topology, Scenario, SensorConfig, WbanConfig};
pub use sim::{run_scenario, run_scenario_traced, CtsAudit, RxRecord, Simulator, Trace, TxRecord};
