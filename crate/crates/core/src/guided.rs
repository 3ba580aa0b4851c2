//! PI-guided TD3 (PI-RL).
//!
//! The applied control is the output of a frozen PI law plus a learned
//! perturbation `xi(x)` confined to `S(U) = [lo, hi]`, the whole clamped to
//! the admissible range. The actor only ever sees the PI law through the
//! critic, so with `eta = 0` the agent is exactly the PI controller.

use alloc::vec::Vec;

use crate::env::{Env, Observation};
use crate::nn::Mlp;
use crate::pi::{pi_control, PiGains};
use crate::rng::{derive_seed, stream};
use crate::td3::{run_training, ActionMap, ActorCritic, Normalizer, ReplayBuffer, Td3Config, TrainError, TrainOutcome};
use crate::Controller;

/// Placement of the perturbation range relative to the PI output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangeMode {
    /// `[-eta u_max / 2, eta u_max / 2]`
    #[default]
    Symmetric,
    /// `[0, eta u_max]`
    OneSided,
}

impl RangeMode {
    pub fn label(self) -> &'static str {
        match self {
            RangeMode::Symmetric => "symmetric",
            RangeMode::OneSided => "one-sided",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "symmetric" => Some(RangeMode::Symmetric),
            "one-sided" | "onesided" | "one_sided" => Some(RangeMode::OneSided),
            _ => None,
        }
    }
}

pub fn perturbation_range(u_max: f64, eta: f64, mode: RangeMode) -> (f64, f64) {
    let width = eta * u_max;
    match mode {
        RangeMode::Symmetric => (-0.5 * width, 0.5 * width),
        RangeMode::OneSided => (0.0, width),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedConfig {
    /// Fraction of `u_max` the perturbation range spans.
    pub eta: f64,
    pub mode: RangeMode,
    /// Clip on behaviour noise, in actor output units.
    pub explore_clip: f64,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        GuidedConfig { eta: 0.5, mode: RangeMode::Symmetric, explore_clip: 0.5 }
    }
}

impl GuidedConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(TrainError::InvalidConfig("eta must lie in [0, 1]"));
        }
        if !(self.explore_clip >= 0.0) {
            return Err(TrainError::InvalidConfig("explore clip must be >= 0"));
        }
        Ok(())
    }
}

/// `u = clamp(PI(x) + center + half_width * y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedMap {
    pub gains: PiGains,
    pub center: f64,
    pub half_width: f64,
    pub explore_clip: f64,
}

impl GuidedMap {
    pub fn new(gains: PiGains, cfg: &GuidedConfig) -> Self {
        let (lo, hi) = perturbation_range(gains.u_max, cfg.eta, cfg.mode);
        GuidedMap { gains, center: 0.5 * (lo + hi), half_width: 0.5 * (hi - lo), explore_clip: cfg.explore_clip }
    }

    pub fn perturbation(&self, y: f64) -> f64 {
        self.center + self.half_width * y
    }

    fn unclamped(&self, obs: &Observation, y: f64) -> f64 {
        pi_control(obs, &self.gains) + self.perturbation(y)
    }
}

impl ActionMap for GuidedMap {
    fn control(&self, obs: &Observation, y: f64) -> f64 {
        self.unclamped(obs, y).clamp(self.gains.u_min, self.gains.u_max)
    }

    fn slope(&self, obs: &Observation, y: f64) -> f64 {
        let raw = self.unclamped(obs, y);
        if (-1.0..=1.0).contains(&y) && raw >= self.gains.u_min && raw <= self.gains.u_max {
            self.half_width
        } else {
            0.0
        }
    }

    fn explore(&self, y: f64, noise: f64) -> f64 {
        (y + noise.clamp(-self.explore_clip, self.explore_clip)).clamp(-1.0, 1.0)
    }

    fn guide_offset(&self, _obs: &Observation, y: f64) -> Option<f64> {
        Some(self.perturbation(y))
    }
}

/// Deployed PI-RL agent: frozen PI gains plus the learned perturbation net.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedPolicy {
    pub gains: PiGains,
    pub perturb: Mlp,
    pub cfg: GuidedConfig,
    pub norm: Normalizer,
}

impl GuidedPolicy {
    pub fn from_agent(agent: &ActorCritic, gains: PiGains, cfg: GuidedConfig) -> Self {
        GuidedPolicy { gains, perturb: agent.actor.clone(), cfg, norm: agent.norm }
    }

    pub fn map(&self) -> GuidedMap {
        GuidedMap::new(self.gains, &self.cfg)
    }

    /// Perturbation in control units, before the final clamp.
    pub fn perturbation(&self, obs: &Observation) -> f64 {
        self.map().perturbation(self.actor_output(obs))
    }

    fn actor_output(&self, obs: &Observation) -> f64 {
        self.perturb.forward(&self.norm.obs(obs)).expect("actor input width")[0]
    }
}

impl Controller for GuidedPolicy {
    fn control(&self, obs: &Observation) -> f64 {
        guided_control(self, obs)
    }
}

/// Deterministic PI-RL control.
pub fn guided_control(policy: &GuidedPolicy, obs: &Observation) -> f64 {
    policy.map().control(obs, policy.actor_output(obs))
}

/// Trains the perturbation of a PI-RL agent around frozen `gains`. With
/// `warm_start`, the actor starts from an existing perturbation network.
pub fn train_pirl(
    env: &mut Env,
    gains: PiGains,
    cfg: &Td3Config,
    gcfg: &GuidedConfig,
    budget: usize,
    seed: u64,
    warm_start: Option<&GuidedPolicy>,
) -> Result<TrainOutcome, TrainError> {
    train_pirl_with(env, gains, cfg, gcfg, budget, seed, warm_start, |_, _| {})
}

#[allow(clippy::too_many_arguments)]
pub fn train_pirl_with(
    env: &mut Env,
    gains: PiGains,
    cfg: &Td3Config,
    gcfg: &GuidedConfig,
    budget: usize,
    seed: u64,
    warm_start: Option<&GuidedPolicy>,
    on_episode: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    gcfg.validate()?;
    if budget == 0 {
        return Err(TrainError::InvalidConfig("budget must be >= 1"));
    }
    if !gains.is_valid() {
        return Err(TrainError::InvalidConfig("PI gains must be finite with u_min < u_max"));
    }
    let params = *env.params();
    let norm = Normalizer { alpha_max: params.alpha_max, u_max: params.u_max };
    let mut rng = stream(derive_seed(seed, &[0x9121]));
    let mut agent = ActorCritic::new(cfg, norm, &mut rng)?;
    if let Some(init) = warm_start {
        if !init.perturb.same_architecture(&agent.actor) {
            return Err(TrainError::Nn(crate::nn::NnError::ArchitectureMismatch));
        }
        agent = ActorCritic::from_networks(cfg, norm, init.perturb.clone(), agent.critic1, agent.critic2);
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let map = GuidedMap::new(gains, gcfg);
    let curve: Vec<f64> = run_training(env, &mut agent, &map, cfg, budget, &mut rng, &mut buffer, on_episode)?;
    Ok(TrainOutcome { agent, curve, buffer })
}
