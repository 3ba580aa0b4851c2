//! Episodic reference-tracking environment around the valve simulator.
//!
//! The observation is `(alpha_ref, alpha_prev, alpha, u_prev)`, the per-step
//! cost is the absolute tracking error of the *true* plate angle, and an
//! episode lasts `horizon` steps with one reference drawn uniformly per
//! episode. Optional sensor noise corrupts only what the controller sees;
//! optional actuator noise corrupts the control that reaches the valve.

use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::rng::{derive_seed, gaussian, stream, uniform, Stream};
use crate::valve::{self, ValveError, ValveParams, ValveState};
use crate::{Controller, ControllerKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error(transparent)]
    Valve(#[from] ValveError),
    #[error("invalid episode config: {0}")]
    InvalidConfig(&'static str),
    #[error("control {u} outside [0, {u_max}]")]
    ControlOutOfRange { u: f64, u_max: f64 },
}

/// Controller input at one sampling instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub alpha_ref: f64,
    pub alpha_prev: f64,
    pub alpha: f64,
    pub u_prev: f64,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.alpha_ref.is_finite() && self.alpha_prev.is_finite() && self.alpha.is_finite() && self.u_prev.is_finite()
    }

    /// Network input: every field mapped affinely onto `[-1, 1]`.
    pub fn normalized(&self, alpha_max: f64, u_max: f64) -> [f64; 4] {
        [
            2.0 * self.alpha_ref / alpha_max - 1.0,
            2.0 * self.alpha_prev / alpha_max - 1.0,
            2.0 * self.alpha / alpha_max - 1.0,
            2.0 * self.u_prev / u_max - 1.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub dt: f64,
    pub ref_low: f64,
    pub ref_high: f64,
    pub gamma: f64,
    /// Sensor noise on observed angles, degrees.
    pub output_noise_std: f64,
    /// Actuator noise on the applied control, percent points.
    pub control_noise_std: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            horizon: 100,
            dt: 0.05,
            ref_low: 5.0,
            ref_high: 85.0,
            gamma: 0.99,
            output_noise_std: 0.0,
            control_noise_std: 0.0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, alpha_max: f64) -> Result<(), EnvError> {
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1"));
        }
        if !(self.dt > 0.0) {
            return Err(EnvError::InvalidConfig("dt must be positive"));
        }
        if !(0.0 <= self.ref_low && self.ref_low <= self.ref_high && self.ref_high <= alpha_max) {
            return Err(EnvError::InvalidConfig("reference range must satisfy 0 <= low <= high <= alpha_max"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(EnvError::InvalidConfig("gamma must lie in [0, 1)"));
        }
        if !(self.output_noise_std >= 0.0 && self.control_noise_std >= 0.0) {
            return Err(EnvError::InvalidConfig("noise std must be >= 0"));
        }
        Ok(())
    }
}

/// Adds `Normal(0, std^2)` to `value` and clamps the result to `bounds`.
pub fn inject_noise<R: Rng + ?Sized>(value: f64, std: f64, rng: &mut R, bounds: (f64, f64)) -> f64 {
    if std == 0.0 {
        return value;
    }
    (value + gaussian(rng, std)).clamp(bounds.0, bounds.1)
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub cost: f64,
    pub done: bool,
    pub alpha_true: f64,
    pub u_applied: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub alpha_ref: f64,
    pub alpha: f64,
    pub u_applied: f64,
    pub u_commanded: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub valve_id: u8,
    pub controller: ControllerKind,
    pub seed: u64,
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn new(valve_id: u8, controller: ControllerKind, seed: u64) -> Self {
        EpisodeTrace { valve_id, controller, seed, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.records.iter().map(|r| r.cost).sum()
    }

    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        self.records.iter().rev().fold(0.0, |acc, r| r.cost + gamma * acc)
    }

    /// `||alpha - alpha_ref||_2` over the whole trace. Despite the customary
    /// "MSE" name this is an L2 norm, not a mean.
    pub fn mse(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let ss: f64 = self.records.iter().map(|r| (r.alpha - r.alpha_ref) * (r.alpha - r.alpha_ref)).sum();
        Some(libm::sqrt(ss))
    }

    /// Per-step mean of the squared tracking error.
    pub fn mean_squared_error(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let ss: f64 = self.records.iter().map(|r| (r.alpha - r.alpha_ref) * (r.alpha - r.alpha_ref)).sum();
        Some(ss / self.records.len() as f64)
    }
}

/// Single-owner environment. References and initial angles, process noise,
/// sensor noise and actuator noise each draw from their own random stream,
/// so two controllers run with the same seed see the same references and
/// sensor noise never perturbs the plant's noise sequence.
#[derive(Debug, Clone)]
pub struct Env {
    params: ValveParams,
    cfg: EpisodeConfig,
    state: ValveState,
    alpha_ref: f64,
    observed: f64,
    observed_prev: f64,
    u_prev: f64,
    t: usize,
    elapsed: usize,
    episode_rng: Stream,
    plant_rng: Stream,
    sensor_rng: Stream,
    actuator_rng: Stream,
}

impl Env {
    pub fn new(params: ValveParams, cfg: EpisodeConfig) -> Result<Self, EnvError> {
        params.validate()?;
        cfg.validate(params.alpha_max)?;
        let state = ValveState::at_rest(&params);
        Ok(Env {
            params,
            cfg,
            state,
            alpha_ref: cfg.ref_low,
            observed: state.alpha,
            observed_prev: state.alpha,
            u_prev: 0.0,
            t: 0,
            elapsed: 0,
            episode_rng: stream(derive_seed(cfg.seed, &[1])),
            plant_rng: stream(derive_seed(cfg.seed, &[2])),
            sensor_rng: stream(derive_seed(cfg.seed, &[3])),
            actuator_rng: stream(derive_seed(cfg.seed, &[4])),
        })
    }

    pub fn params(&self) -> &ValveParams {
        &self.params
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn valve_state(&self) -> &ValveState {
        &self.state
    }

    pub fn alpha_ref(&self) -> f64 {
        self.alpha_ref
    }

    /// Steps since the last reset or segment start.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Starts a new episode: draws a reference on `[ref_low, ref_high]` and a
    /// plate angle on `[0, alpha_max]` with cleared input memory.
    pub fn reset(&mut self) -> Observation {
        self.alpha_ref = uniform(&mut self.episode_rng, self.cfg.ref_low, self.cfg.ref_high);
        let alpha0 = uniform(&mut self.episode_rng, 0.0, self.params.alpha_max);
        self.state = ValveState::at_angle(alpha0);
        self.u_prev = 0.0;
        self.t = 0;
        self.elapsed = 0;
        self.observed = self.observe(alpha0);
        self.observed_prev = self.observed;
        self.observation()
    }

    /// Draws a fresh reference on the configured range without touching the plant.
    pub fn sample_reference(&mut self) -> f64 {
        uniform(&mut self.episode_rng, self.cfg.ref_low, self.cfg.ref_high)
    }

    /// Changes the reference and restarts the step counter, keeping the plant state.
    pub fn begin_segment(&mut self, alpha_ref: f64) -> Observation {
        self.alpha_ref = alpha_ref;
        self.t = 0;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation { alpha_ref: self.alpha_ref, alpha_prev: self.observed_prev, alpha: self.observed, u_prev: self.u_prev }
    }

    fn observe(&mut self, alpha: f64) -> f64 {
        inject_noise(alpha, self.cfg.output_noise_std, &mut self.sensor_rng, (0.0, self.params.alpha_max))
    }

    pub fn step(&mut self, u: f64) -> Result<Step, EnvError> {
        if !(0.0..=self.params.u_max).contains(&u) {
            return Err(EnvError::ControlOutOfRange { u, u_max: self.params.u_max });
        }
        let applied = inject_noise(u, self.cfg.control_noise_std, &mut self.actuator_rng, (0.0, self.params.u_max));
        self.state = valve::step(&self.params, &self.state, applied, &mut self.plant_rng)?;
        self.observed_prev = self.observed;
        self.observed = self.observe(self.state.alpha);
        self.u_prev = u;
        self.t += 1;
        self.elapsed += 1;
        let cost = (self.state.alpha - self.alpha_ref).abs();
        Ok(Step {
            obs: self.observation(),
            cost,
            done: self.t >= self.cfg.horizon,
            alpha_true: self.state.alpha,
            u_applied: applied,
        })
    }

    fn record(&self, step: &Step, u: f64) -> StepRecord {
        StepRecord {
            t: self.elapsed as f64 * self.cfg.dt,
            alpha_ref: self.alpha_ref,
            alpha: step.alpha_true,
            u_applied: step.u_applied,
            u_commanded: u,
            cost: step.cost,
        }
    }
}

/// Clamps a controller output into the admissible control range.
fn admissible(u: f64, u_max: f64) -> f64 {
    if u.is_nan() {
        0.0
    } else {
        u.clamp(0.0, u_max)
    }
}

/// Runs one full episode from a reset under `controller`.
pub fn run_episode<C: Controller + ?Sized>(env: &mut Env, controller: &C, kind: ControllerKind) -> Result<EpisodeTrace, EnvError> {
    let mut trace = EpisodeTrace::new(env.params.id, kind, env.cfg.seed);
    let mut obs = env.reset();
    loop {
        let u = admissible(controller.control(&obs), env.params.u_max);
        let step = env.step(u)?;
        trace.records.push(env.record(&step, u));
        obs = step.obs;
        if step.done {
            return Ok(trace);
        }
    }
}

/// Chains reference segments of `segment_steps` steps without resetting the
/// plant in between. The first segment starts from a reset.
pub fn run_tracking<C: Controller + ?Sized>(
    env: &mut Env,
    controller: &C,
    kind: ControllerKind,
    references: &[f64],
    segment_steps: usize,
) -> Result<EpisodeTrace, EnvError> {
    let mut trace = EpisodeTrace::new(env.params.id, kind, env.cfg.seed);
    if references.is_empty() {
        return Ok(trace);
    }
    env.reset();
    for &r in references {
        let mut obs = env.begin_segment(r);
        for _ in 0..segment_steps {
            let u = admissible(controller.control(&obs), env.params.u_max);
            let step = env.step(u)?;
            trace.records.push(env.record(&step, u));
            obs = step.obs;
        }
    }
    Ok(trace)
}
