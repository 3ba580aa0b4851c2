//! Twin-delayed deep deterministic policy gradient under a cost convention.
//!
//! Two critics are regressed onto a shared empirical Bellman target (policy
//! evaluation) and the actor is moved down the gradient of the first critic
//! (policy improvement) every `policy_delay` critic steps. Because `Q` here
//! is an expected discounted *cost*, the pessimistic twin aggregation takes
//! the maximum of the two target critics.
//!
//! The actor emits a squashed value `y` in `[-1, 1]`; an [`ActionMap`] turns
//! it into a control. Plain TD3 spans the whole control range with it
//! ([`DirectMap`]); the PI-guided agent in [`crate::guided`] uses it as a
//! bounded perturbation around the PI output. The training loop here is
//! shared by both.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, Observation};
use crate::nn::{soft_update, Adam, AdamConfig, Mlp, NnError, Squash, Tape};
use crate::rng::{derive_seed, gaussian, stream, Stream};
use crate::Controller;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub gamma: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub policy_delay: usize,
    /// Target policy smoothing, in actor output units.
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    /// Behaviour noise, in actor output units.
    pub explore_std: f64,
    /// Steps of uniformly random actor output before learning starts.
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Multiplies stored costs inside the Bellman target.
    pub cost_scale: f64,
    /// Scale of the actor's last-layer initialization.
    pub actor_final_scale: f64,
    /// Treat the horizon cut as a true terminal state (no bootstrap).
    pub terminal_on_horizon: bool,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            gamma: 0.99,
            batch_size: 256,
            tau: 0.005,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            explore_std: 0.1,
            warmup_steps: 1000,
            buffer_capacity: 1_000_000,
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            cost_scale: 0.01,
            actor_final_scale: 0.01,
            terminal_on_horizon: false,
        }
    }
}

impl Td3Config {
    /// Reduced profile for desk-scale runs: 2x32 networks, faster learning rates.
    pub fn desk() -> Self {
        Td3Config { hidden: vec![32, 32], actor_lr: 1e-3, critic_lr: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainError::InvalidConfig("gamma must lie in [0, 1)"));
        }
        if self.policy_delay == 0 {
            return Err(TrainError::InvalidConfig("policy delay must be >= 1"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(TrainError::InvalidConfig("batch size and capacity must be >= 1"));
        }
        if !(self.target_noise_std >= 0.0 && self.target_noise_clip >= 0.0 && self.explore_std >= 0.0) {
            return Err(TrainError::InvalidConfig("noise parameters must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrainError::InvalidConfig("tau must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn actor_sizes(&self) -> Vec<usize> {
        let mut s = vec![4];
        s.extend_from_slice(&self.hidden);
        s.push(1);
        s
    }

    pub fn critic_sizes(&self) -> Vec<usize> {
        let mut s = vec![5];
        s.extend_from_slice(&self.hidden);
        s.push(1);
        s
    }
}

/// Affine maps between physical units and network units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub alpha_max: f64,
    pub u_max: f64,
}

impl Normalizer {
    pub fn obs(&self, o: &Observation) -> [f64; 4] {
        o.normalized(self.alpha_max, self.u_max)
    }

    pub fn control(&self, u: f64) -> f64 {
        2.0 * u / self.u_max - 1.0
    }

    pub fn critic_input(&self, o: &Observation, u: f64) -> [f64; 5] {
        let x = self.obs(o);
        [x[0], x[1], x[2], x[3], self.control(u)]
    }
}

/// Maps actor output to the control applied to the valve.
pub trait ActionMap {
    fn control(&self, obs: &Observation, y: f64) -> f64;
    /// `d control / d y`, zero where the control is clamped.
    fn slope(&self, obs: &Observation, y: f64) -> f64;
    /// Behaviour output after adding exploration noise.
    fn explore(&self, y: f64, noise: f64) -> f64 {
        y + noise
    }
    /// Pre-clamp offset from the guide, for guided maps.
    fn guide_offset(&self, _obs: &Observation, _y: f64) -> Option<f64> {
        None
    }
}

/// Plain TD3: `y in [-1, 1]` spans `[0, u_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectMap {
    pub u_max: f64,
}

impl ActionMap for DirectMap {
    fn control(&self, _obs: &Observation, y: f64) -> f64 {
        (0.5 * (y + 1.0) * self.u_max).clamp(0.0, self.u_max)
    }

    fn slope(&self, _obs: &Observation, y: f64) -> f64 {
        if (-1.0..=1.0).contains(&y) {
            0.5 * self.u_max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub x: Observation,
    /// Applied control, normalized to `[-1, 1]`.
    pub u: f64,
    pub c: f64,
    pub x_next: Observation,
    pub done: bool,
    pub guide_offset: Option<f64>,
}

/// Ring buffer; once full, the oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: Vec::with_capacity(capacity.min(1 << 16)), capacity: capacity.max(1), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Transition>, TrainError> {
        if self.items.len() < n || n == 0 {
            return Err(TrainError::InsufficientData { have: self.items.len(), need: n.max(1) });
        }
        Ok(self.sample_indices(rng, n).into_iter().map(|i| self.items[i]).collect())
    }
}

/// A state-control value with its sensitivity to the (normalized) control.
pub trait QValue {
    /// Returns `(Q, dQ/du)` for a critic input whose last entry is the control.
    fn value_grad(&self, input: &[f64]) -> (f64, f64);
}

impl QValue for Mlp {
    fn value_grad(&self, input: &[f64]) -> (f64, f64) {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape).expect("critic input width");
        let q = tape.output()[0];
        let g = self.backward(&tape, &[1.0], None).expect("critic output width");
        (q, *g.last().unwrap())
    }
}

fn scalar(net: &Mlp, x: &[f64], tape: &mut Tape) -> f64 {
    net.forward_tape(x, tape).expect("network input width");
    tape.output()[0]
}

/// Bellman targets `scale c + gamma (1 - done) max(Q1', Q2')(x', u')`, with
/// `u'` from the target actor plus clipped smoothing noise.
#[allow(clippy::too_many_arguments)]
pub fn critic_targets<M: ActionMap, R: Rng + ?Sized>(
    batch: &[Transition],
    actor_target: &Mlp,
    critic1_target: &Mlp,
    critic2_target: &Mlp,
    map: &M,
    norm: &Normalizer,
    cfg: &Td3Config,
    rng: &mut R,
) -> Vec<f64> {
    let mut tape = Tape::default();
    batch
        .iter()
        .map(|t| {
            let noise = gaussian(rng, cfg.target_noise_std).clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
            let immediate = cfg.cost_scale * t.c;
            if t.done || cfg.gamma == 0.0 {
                return immediate;
            }
            let y = (scalar(actor_target, &norm.obs(&t.x_next), &mut tape) + noise).clamp(-1.0, 1.0);
            let u = map.control(&t.x_next, y);
            let input = norm.critic_input(&t.x_next, u);
            let q1 = scalar(critic1_target, &input, &mut tape);
            let q2 = scalar(critic2_target, &input, &mut tape);
            immediate + cfg.gamma * q1.max(q2)
        })
        .collect()
}

/// One Adam step of `actor` on the batch mean of `critic(x, map(actor(x)))`.
/// Returns the pre-step objective.
pub fn actor_step<Q: QValue, M: ActionMap>(
    actor: &mut Mlp,
    opt: &mut Adam,
    critic: &Q,
    batch: &[Transition],
    map: &M,
    norm: &Normalizer,
) -> Result<f64, TrainError> {
    let n = batch.len() as f64;
    let mut grads = vec![0.0; actor.num_params()];
    let mut tape = Tape::default();
    let mut objective = 0.0;
    for t in batch {
        let x = norm.obs(&t.x);
        actor.forward_tape(&x, &mut tape)?;
        let y = tape.output()[0];
        let u = map.control(&t.x, y);
        let (q, dq_du) = critic.value_grad(&norm.critic_input(&t.x, u));
        objective += q / n;
        // d u_normalized / d u = 2 / u_max
        let upstream = dq_du * (2.0 / norm.u_max) * map.slope(&t.x, y) / n;
        actor.backward(&tape, &[upstream], Some(&mut grads))?;
    }
    opt.step(actor.params_mut(), &grads)?;
    Ok(objective)
}

/// Networks and optimizer state of one actor-critic agent.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    pub norm: Normalizer,
    pub critic_updates: u64,
    pub actor_updates: u64,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(cfg: &Td3Config, norm: Normalizer, rng: &mut R) -> Result<Self, TrainError> {
        let actor = Mlp::init(&cfg.actor_sizes(), Squash::Tanh, cfg.actor_final_scale, rng)?;
        let critic1 = Mlp::init(&cfg.critic_sizes(), Squash::Identity, 1.0, rng)?;
        let critic2 = Mlp::init(&cfg.critic_sizes(), Squash::Identity, 1.0, rng)?;
        Ok(Self::from_networks(cfg, norm, actor, critic1, critic2))
    }

    pub fn from_networks(cfg: &Td3Config, norm: Normalizer, actor: Mlp, critic1: Mlp, critic2: Mlp) -> Self {
        let actor_adam = AdamConfig { lr: cfg.actor_lr, ..AdamConfig::default() };
        let critic_adam = AdamConfig { lr: cfg.critic_lr, ..AdamConfig::default() };
        ActorCritic {
            actor_opt: Adam::new(actor_adam, actor.num_params()),
            critic1_opt: Adam::new(critic_adam, critic1.num_params()),
            critic2_opt: Adam::new(critic_adam, critic2.num_params()),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            norm,
            critic_updates: 0,
            actor_updates: 0,
        }
    }

    /// Deterministic actor output for an observation.
    pub fn actor_output(&self, obs: &Observation) -> f64 {
        self.actor.forward(&self.norm.obs(obs)).expect("actor input width")[0]
    }

    /// One Adam step of both critics on a batch against shared targets.
    /// Returns the pre-step loss `mean (Q1 - y)^2 + mean (Q2 - y)^2`.
    pub fn critic_step<M: ActionMap, R: Rng + ?Sized>(
        &mut self,
        batch: &[Transition],
        map: &M,
        cfg: &Td3Config,
        rng: &mut R,
    ) -> Result<f64, TrainError> {
        let targets =
            critic_targets(batch, &self.actor_target, &self.critic1_target, &self.critic2_target, map, &self.norm, cfg, rng);
        let n = batch.len() as f64;
        let mut g1 = vec![0.0; self.critic1.num_params()];
        let mut g2 = vec![0.0; self.critic2.num_params()];
        let mut tape = Tape::default();
        let mut loss = 0.0;
        for (t, y) in batch.iter().zip(&targets) {
            let input = self.norm.critic_input(&t.x, 0.5 * (t.u + 1.0) * self.norm.u_max);
            for (critic, grads) in [(&self.critic1, &mut g1), (&self.critic2, &mut g2)] {
                critic.forward_tape(&input, &mut tape)?;
                let err = tape.output()[0] - y;
                loss += err * err / n;
                critic.backward(&tape, &[2.0 * err / n], Some(grads))?;
            }
        }
        self.critic1_opt.step(self.critic1.params_mut(), &g1)?;
        self.critic2_opt.step(self.critic2.params_mut(), &g2)?;
        self.critic_updates += 1;
        Ok(loss)
    }

    /// Actor step on the first critic followed by soft target updates.
    pub fn actor_step<M: ActionMap>(&mut self, batch: &[Transition], map: &M, cfg: &Td3Config) -> Result<f64, TrainError> {
        let objective = actor_step(&mut self.actor, &mut self.actor_opt, &self.critic1, batch, map, &self.norm)?;
        soft_update(&mut self.actor_target, &self.actor, cfg.tau)?;
        soft_update(&mut self.critic1_target, &self.critic1, cfg.tau)?;
        soft_update(&mut self.critic2_target, &self.critic2, cfg.tau)?;
        self.actor_updates += 1;
        Ok(objective)
    }

    /// Samples a batch and runs one critic step from the buffer.
    pub fn critic_update<M: ActionMap, R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        map: &M,
        cfg: &Td3Config,
        rng: &mut R,
    ) -> Result<f64, TrainError> {
        let batch = buffer.sample(rng, cfg.batch_size)?;
        self.critic_step(&batch, map, cfg, rng)
    }

    pub fn actor_update<M: ActionMap, R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        map: &M,
        cfg: &Td3Config,
        rng: &mut R,
    ) -> Result<f64, TrainError> {
        let batch = buffer.sample(rng, cfg.batch_size)?;
        self.actor_step(&batch, map, cfg)
    }

    /// One critic step, plus an actor step every `policy_delay` critic steps,
    /// both on the same sampled batch.
    pub fn update<M: ActionMap, R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        map: &M,
        cfg: &Td3Config,
        rng: &mut R,
    ) -> Result<(), TrainError> {
        let batch = buffer.sample(rng, cfg.batch_size)?;
        self.critic_step(&batch, map, cfg, rng)?;
        if self.critic_updates % cfg.policy_delay as u64 == 0 {
            self.actor_step(&batch, map, cfg)?;
        }
        Ok(())
    }
}

/// Behaviour control of a plain TD3 actor: deterministic output mapped onto
/// `[0, u_max]`, plus Gaussian noise of `explore_std` when exploring.
pub fn select_control<R: Rng + ?Sized>(
    agent: &ActorCritic,
    obs: &Observation,
    explore: bool,
    explore_std: f64,
    rng: &mut R,
) -> f64 {
    let map = DirectMap { u_max: agent.norm.u_max };
    let mut y = agent.actor_output(obs);
    if explore {
        y = map.explore(y, gaussian(rng, explore_std));
    }
    map.control(obs, y)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: ActorCritic,
    /// Undiscounted cumulative cost of every behaviour episode.
    pub curve: Vec<f64>,
    pub buffer: ReplayBuffer,
}

/// Episodic interaction with per-step learning, shared by TD3 and PI-RL.
pub fn run_training<M: ActionMap>(
    env: &mut Env,
    agent: &mut ActorCritic,
    map: &M,
    cfg: &Td3Config,
    budget: usize,
    rng: &mut Stream,
    buffer: &mut ReplayBuffer,
    mut on_episode: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    let mut curve = Vec::with_capacity(budget);
    let mut total_steps = 0usize;
    for episode in 0..budget {
        let mut obs = env.reset();
        let mut episode_cost = 0.0;
        loop {
            let y = if total_steps < cfg.warmup_steps {
                rng.random_range(-1.0..=1.0)
            } else {
                map.explore(agent.actor_output(&obs), gaussian(rng, cfg.explore_std))
            };
            let u = map.control(&obs, y);
            let step = env.step(u)?;
            buffer.push(Transition {
                x: obs,
                u: agent.norm.control(u),
                c: step.cost,
                x_next: step.obs,
                done: step.done && cfg.terminal_on_horizon,
                guide_offset: map.guide_offset(&obs, y),
            });
            episode_cost += step.cost;
            total_steps += 1;
            if total_steps >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
                agent.update(buffer, map, cfg, rng)?;
            }
            obs = step.obs;
            if step.done {
                break;
            }
        }
        on_episode(episode, episode_cost);
        curve.push(episode_cost);
    }
    Ok(curve)
}

/// Trains a plain TD3 agent. `seed` drives network initialization, sampling
/// and exploration; the environment keeps its own seed from `env`.
pub fn train_td3(env: &mut Env, cfg: &Td3Config, budget: usize, seed: u64) -> Result<TrainOutcome, TrainError> {
    train_td3_with(env, cfg, budget, seed, |_, _| {})
}

pub fn train_td3_with(
    env: &mut Env,
    cfg: &Td3Config,
    budget: usize,
    seed: u64,
    on_episode: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    if budget == 0 {
        return Err(TrainError::InvalidConfig("budget must be >= 1"));
    }
    let params = *env.params();
    let norm = Normalizer { alpha_max: params.alpha_max, u_max: params.u_max };
    let mut rng = stream(derive_seed(seed, &[0x7d3]));
    let mut agent = ActorCritic::new(cfg, norm, &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let map = DirectMap { u_max: params.u_max };
    let curve = run_training(env, &mut agent, &map, cfg, budget, &mut rng, &mut buffer, on_episode)?;
    Ok(TrainOutcome { agent, curve, buffer })
}

/// Deployed TD3 actor.
#[derive(Debug, Clone, PartialEq)]
pub struct Td3Policy {
    pub actor: Mlp,
    pub norm: Normalizer,
}

impl Td3Policy {
    pub fn from_agent(agent: &ActorCritic) -> Self {
        Td3Policy { actor: agent.actor.clone(), norm: agent.norm }
    }
}

impl Controller for Td3Policy {
    fn control(&self, obs: &Observation) -> f64 {
        let y = self.actor.forward(&self.norm.obs(obs)).expect("actor input width")[0];
        DirectMap { u_max: self.norm.u_max }.control(obs, y)
    }
}
