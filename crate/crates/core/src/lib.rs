//! Throttle-valve control core.
//!
//! Everything in this crate is pure computation over owned data: the valve
//! simulator, ARX identification and PI synthesis, the discrete PI law, a
//! small MLP numerical core, the TD3 actor-critic and its PI-guided variant,
//! and the episodic tracking environment. It builds under `no_std` with
//! `alloc`; file formats, the CLI and the experiment harness live in the
//! `valve-lab` crate.
//!
//! Units: angles are degrees, controls are PWM percent points on `[0, 100]`,
//! time is seconds with a 50 ms sampling period.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod env;
pub mod guided;
pub mod nn;
pub mod pi;
pub mod rng;
pub mod sysid;
pub mod td3;
pub mod valve;

pub use env::{Env, EpisodeConfig, EpisodeTrace, Observation, StepRecord};
pub use guided::{GuidedConfig, GuidedPolicy, RangeMode};
pub use nn::{Adam, AdamConfig, Mlp, Squash};
pub use pi::{PiController, PiGains};
pub use sysid::{ArxFit, PiDesignSpec, PrbsConfig};
pub use td3::{Td3Config, Td3Policy, TrainOutcome};
pub use valve::{ValveParams, ValveState};

/// Anything that maps an observation to a control in percent points.
pub trait Controller {
    fn control(&self, obs: &Observation) -> f64;
}

/// Controller family, used to tag traces and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ControllerKind {
    Pi,
    Td3,
    PiRl,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Pi, ControllerKind::Td3, ControllerKind::PiRl];

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Pi => "PI",
            ControllerKind::Td3 => "TD3",
            ControllerKind::PiRl => "PI-RL",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "PI" | "pi" => Some(ControllerKind::Pi),
            "TD3" | "td3" => Some(ControllerKind::Td3),
            "PI-RL" | "pi-rl" | "pirl" | "PIRL" => Some(ControllerKind::PiRl),
            _ => None,
        }
    }
}

impl core::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}
