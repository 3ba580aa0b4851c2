//! Deployable controllers behind one type.

use valve_core::{Controller, ControllerKind, GuidedPolicy, Observation, PiController, Td3Policy};

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Pi(PiController),
    Td3(Td3Policy),
    PiRl(GuidedPolicy),
}

impl Policy {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Policy::Pi(_) => ControllerKind::Pi,
            Policy::Td3(_) => ControllerKind::Td3,
            Policy::PiRl(_) => ControllerKind::PiRl,
        }
    }
}

impl Controller for Policy {
    fn control(&self, obs: &Observation) -> f64 {
        match self {
            Policy::Pi(c) => c.control(obs),
            Policy::Td3(c) => c.control(obs),
            Policy::PiRl(c) => c.control(obs),
        }
    }
}
