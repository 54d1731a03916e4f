//! Deterministic emulator of a federated science-instrument environment:
//! multi-site virtual network, EPICS-style instrument control, container
//! image mobility, workflow orchestration and a tomographic reconstruction
//! workload, all driven by one virtual-time event loop.

pub mod cli;
pub mod containers;
pub mod engine;
pub mod instrument;
pub mod netsim;
pub mod orchestrator;
pub mod protocols;
pub mod tomo;
pub mod topology;

pub use engine::{Engine, DEFAULT_SEED};
