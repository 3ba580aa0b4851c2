//! Discrete-time PI law in incremental (velocity) form.
//!
//! `u_t = u_{t-1} - r0*alpha_t - r1*alpha_{t-1} + (r0 + r1)*alpha_ref`,
//! clamped to `[u_min, u_max]`. Because the previous *clamped* control is fed
//! back, the integrator state cannot wind up under saturation.

use crate::env::Observation;
use crate::Controller;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiGains {
    pub r0: f64,
    pub r1: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl PiGains {
    pub fn new(r0: f64, r1: f64, u_min: f64, u_max: f64) -> Self {
        PiGains { r0, r1, u_min, u_max }
    }

    /// Gains tuned on the physical valves, keyed by valve id.
    pub fn builtin(valve_id: u8) -> Option<Self> {
        match valve_id {
            1 => Some(PiGains::new(-2.28, 1.83, 0.0, 80.0)),
            2 => Some(PiGains::new(-1.31, 1.01, 0.0, 80.0)),
            3 => Some(PiGains::new(-2.33, 1.96, 0.0, 60.0)),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.r0.is_finite() && self.r1.is_finite() && self.u_min < self.u_max
    }
}

/// Unclamped PI output, evaluated in error form so that zero tracking error
/// returns `u_prev` bit for bit.
pub fn pi_raw(obs: &Observation, gains: &PiGains) -> f64 {
    obs.u_prev + gains.r0 * (obs.alpha_ref - obs.alpha) + gains.r1 * (obs.alpha_ref - obs.alpha_prev)
}

pub fn pi_control(obs: &Observation, gains: &PiGains) -> f64 {
    pi_raw(obs, gains).clamp(gains.u_min, gains.u_max)
}

/// Stand-alone PI controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiController {
    pub gains: PiGains,
}

impl Controller for PiController {
    fn control(&self, obs: &Observation) -> f64 {
        pi_control(obs, &self.gains)
    }
}
