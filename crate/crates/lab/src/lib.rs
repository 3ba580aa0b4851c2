//! Experiment harness for the throttle-valve control laboratory: structured
//! configuration, checkpoints, CSV export, metrics and the scenario suite.
//! The `valve-lab` binary is a thin command-line layer over this crate.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod metrics;
pub mod policy;
pub mod scenarios;

pub use checkpoint::Checkpoint;
pub use config::LabConfig;
pub use metrics::MetricReport;
pub use policy::Policy;

/// File name under which `curves` stores, and `evaluate` looks up, an
/// agent's checkpoint for a valve.
pub fn checkpoint_name(agent: valve_core::ControllerKind, valve: u8) -> String {
    let tag = match agent {
        valve_core::ControllerKind::Pi => "pi",
        valve_core::ControllerKind::Td3 => "td3",
        valve_core::ControllerKind::PiRl => "pirl",
    };
    format!("{tag}_valve{valve}.ckpt")
}
