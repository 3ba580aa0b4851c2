//! Scenario suite: tracking, noise robustness and learning curves.
//!
//! Every scenario expands into independent jobs that run on a bounded rayon
//! pool. Each job derives its own seeds from the base seed and its
//! coordinates, and results are collected in job order, so the output does
//! not depend on the number of workers.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;
use valve_core::env::{run_tracking as track, EnvError};
use valve_core::guided::train_pirl_with;
use valve_core::rng::{derive_seed, stream, uniform};
use valve_core::td3::{train_td3_with, TrainError};
use valve_core::sysid::{fit_arx, generate_prbs};
use valve_core::valve;
use valve_core::{ArxFit, PrbsConfig, ValveParams, ValveState};
use valve_core::{ControllerKind, Env, EpisodeConfig, EpisodeTrace, PiController, PiGains};

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, LabConfig, NoiseKind};
use crate::metrics::{mean_curve, moving_average, MetricReport};
use crate::policy::Policy;

const TAG_REFS: u64 = 0x5245;
const TAG_EVAL_ENV: u64 = 0xE7A1;
const TAG_TRAIN_ENV: u64 = 0x7E4E;
const TAG_AGENT: u64 = 0xA6E7;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("missing checkpoint for {controller} on valve {valve}")]
    MissingCheckpoint { valve: u8, controller: ControllerKind },
    #[error("no built-in PI gains for valve {0}")]
    NoGains(u8),
    #[error("experiment: {0}")]
    Experiment(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool, ScenarioError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| ScenarioError::Pool(e.to_string()))
}

/// Seed-generated reference levels, uniform on `[lo, hi]`.
pub fn reference_sequence(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed);
    (0..n).map(|_| uniform(&mut rng, lo, hi)).collect()
}

/// Number of segments and steps per segment for a tracking run.
pub fn segment_plan(period: f64, duration: f64, dt: f64) -> (usize, usize) {
    let steps = (period / dt).round().max(1.0) as usize;
    let segments = (duration / period).round().max(1.0) as usize;
    (segments, steps)
}

pub fn builtin_gains(valve: u8) -> Result<PiGains, ScenarioError> {
    PiGains::builtin(valve).ok_or(ScenarioError::NoGains(valve))
}

/// Controllers available to a scenario, keyed by valve and kind.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    policies: BTreeMap<(u8, ControllerKind), Policy>,
}

impl PolicySet {
    /// The PI controller on every listed valve.
    pub fn with_pi(valves: &[u8]) -> Result<Self, ScenarioError> {
        let mut set = PolicySet::default();
        for &v in valves {
            set.insert(v, Policy::Pi(PiController { gains: builtin_gains(v)? }));
        }
        Ok(set)
    }

    pub fn insert(&mut self, valve: u8, policy: Policy) {
        self.policies.insert((valve, policy.kind()), policy);
    }

    pub fn get(&self, valve: u8, controller: ControllerKind) -> Result<&Policy, ScenarioError> {
        self.policies.get(&(valve, controller)).ok_or(ScenarioError::MissingCheckpoint { valve, controller })
    }
}

/// One matched tracking run: the references and the plant/sensor seeds depend
/// on `(base_seed, valve, run)` only, never on the controller.
#[allow(clippy::too_many_arguments)]
pub fn tracking_job(
    cfg: &LabConfig,
    policy: &Policy,
    valve: u8,
    base_seed: u64,
    run: u64,
    period: f64,
    noise: Option<(NoiseKind, f64)>,
) -> Result<EpisodeTrace, ScenarioError> {
    let params = cfg.valve(valve)?;
    let mut env_cfg: EpisodeConfig = cfg.episode_config(derive_seed(base_seed, &[TAG_EVAL_ENV, valve as u64, run]));
    match noise {
        Some((NoiseKind::Output, s)) => env_cfg.output_noise_std = s,
        Some((NoiseKind::Control, s)) => env_cfg.control_noise_std = s,
        None => {}
    }
    let (segments, steps) = segment_plan(period, cfg.scenario.duration, env_cfg.dt);
    let refs = reference_sequence(derive_seed(base_seed, &[TAG_REFS, run]), segments, env_cfg.ref_low, env_cfg.ref_high);
    let mut env = Env::new(params, env_cfg)?;
    let mut trace = track(&mut env, policy, policy.kind(), &refs, steps)?;
    trace.seed = run;
    Ok(trace)
}

/// Tracking scenario at `period`: one trace per valve, controller and run,
/// and a report row per valve and controller.
pub fn run_tracking(
    cfg: &LabConfig,
    policies: &PolicySet,
    period: f64,
    workers: usize,
) -> Result<(Vec<EpisodeTrace>, MetricReport), ScenarioError> {
    let controllers = cfg.controllers()?;
    let runs = cfg.scenario.eval_runs as u64;
    let mut jobs = Vec::new();
    for &v in &cfg.scenario.valves {
        for &c in &controllers {
            let policy = policies.get(v, c)?;
            for k in 0..runs {
                jobs.push((v, policy, k));
            }
        }
    }
    let traces: Vec<EpisodeTrace> = pool(workers)?.install(|| {
        jobs.par_iter().map(|&(v, p, k)| tracking_job(cfg, p, v, cfg.seed, k, period, None)).collect::<Result<_, _>>()
    })?;
    let mut report = MetricReport { seeds: vec![cfg.seed], ..Default::default() };
    let condition = format!("period:{period}");
    for &v in &cfg.scenario.valves {
        for &c in &controllers {
            let values: Vec<f64> =
                traces.iter().filter(|t| t.valve_id == v && t.controller == c).map(|t| t.mse().unwrap_or(f64::NAN)).collect();
            report.push(Some(v), c, condition.clone(), &values);
        }
    }
    Ok((traces, report))
}

/// Noise grid at the configured period. Rows aggregate over valves and runs,
/// one per noise kind, level and controller.
pub fn run_noise_robustness(cfg: &LabConfig, policies: &PolicySet, workers: usize) -> Result<MetricReport, ScenarioError> {
    let controllers = cfg.controllers()?;
    let kinds = cfg.noise_kinds()?;
    let runs = cfg.scenario.eval_runs as u64;
    let mut conditions = Vec::new();
    for &kind in &kinds {
        for &std in &cfg.scenario.noise_stds {
            conditions.push((kind, std));
        }
    }
    let mut jobs = Vec::new();
    for (ci, &(kind, std)) in conditions.iter().enumerate() {
        for &c in &controllers {
            for &v in &cfg.scenario.valves {
                let policy = policies.get(v, c)?;
                for k in 0..runs {
                    jobs.push((ci, c, v, policy, k, kind, std));
                }
            }
        }
    }
    let period = cfg.scenario.period;
    let scores: Vec<f64> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(_, _, v, p, k, kind, std)| tracking_job(cfg, p, v, cfg.seed, k, period, Some((kind, std))).map(|t| t.mse().unwrap_or(f64::NAN)))
            .collect::<Result<_, _>>()
    })?;
    let mut report = MetricReport { seeds: vec![cfg.seed], ..Default::default() };
    for (ci, &(kind, std)) in conditions.iter().enumerate() {
        for &c in &controllers {
            let values: Vec<f64> = jobs.iter().zip(&scores).filter(|(j, _)| j.0 == ci && j.1 == c).map(|(_, s)| *s).collect();
            report.push(None, c, format!("{}:{std}", kind.label()), &values);
        }
    }
    Ok(report)
}

/// Open-loop PRBS experiment on the simulator, starting from the steady
/// state of the sequence's center level. Returns `(u, alpha)` aligned so that
/// `alpha[t]` follows `u[..t]`.
pub fn prbs_experiment(params: &ValveParams, prbs: &PrbsConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>), ScenarioError> {
    let u = generate_prbs(prbs).map_err(|e| ScenarioError::Experiment(e.to_string()))?;
    let start = (params.alpha_rest + params.static_gain() * prbs.center).clamp(0.0, params.alpha_max);
    let mut state = ValveState { u_prev: prbs.center, u_eff: prbs.center, u_eff_prev: prbs.center, u_prev2: prbs.center, ..ValveState::at_angle(start) };
    let mut rng = stream(seed);
    let mut alpha = Vec::with_capacity(u.len());
    alpha.push(state.alpha);
    for &ut in &u[..u.len() - 1] {
        state = valve::step(params, &state, ut, &mut rng).map_err(|e| ScenarioError::Experiment(e.to_string()))?;
        alpha.push(state.alpha);
    }
    Ok((u, alpha))
}

/// ARX fit after removing each signal's mean, which absorbs the spring
/// offset the ARX structure has no term for.
pub fn fit_detrended(u: &[f64], alpha: &[f64]) -> Result<ArxFit, ScenarioError> {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let (mu, ma) = (mean(u), mean(alpha));
    let du: Vec<f64> = u.iter().map(|v| v - mu).collect();
    let da: Vec<f64> = alpha.iter().map(|v| v - ma).collect();
    fit_arx(&du, &da).map_err(|e| ScenarioError::Experiment(e.to_string()))
}

/// Coordinates of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainJob {
    pub agent: ControllerKind,
    pub valve: u8,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub job: TrainJob,
    pub curve: Vec<f64>,
    /// Seconds since the start of training at the end of each episode; empty
    /// unless timing was requested.
    pub wall_time: Vec<f64>,
    pub checkpoint: Checkpoint,
}

impl TrainedAgent {
    pub fn policy(&self) -> Policy {
        self.checkpoint.policy().expect("fresh checkpoint is consistent")
    }
}

/// Trains one agent. TD3 and PI-RL runs with the same seed and valve see the
/// same sequence of episode references, initial angles and plant noise. The
/// checkpoint records the tracking MSE of evaluation run 0 under `job.seed`.
pub fn train_agent(cfg: &LabConfig, job: TrainJob, episodes: usize, timing: bool) -> Result<TrainedAgent, ScenarioError> {
    let params = cfg.valve(job.valve)?;
    let td3 = cfg.td3_config()?;
    let guided = cfg.guided_config()?;
    let env_cfg = cfg.episode_config(derive_seed(job.seed, &[TAG_TRAIN_ENV, job.valve as u64]));
    let agent_seed = derive_seed(job.seed, &[TAG_AGENT, job.valve as u64]);
    let mut env = Env::new(params, env_cfg)?;
    let start = Instant::now();
    let mut wall_time = Vec::new();
    let clock = |_: usize, _: f64| {
        if timing {
            wall_time.push(start.elapsed().as_secs_f64());
        }
    };
    let mut checkpoint = match job.agent {
        ControllerKind::Td3 => {
            let out = train_td3_with(&mut env, &td3, episodes, agent_seed, clock)?;
            let ck = Checkpoint::from_td3(&out.agent, &td3, job.valve, job.seed, episodes);
            (ck, out.curve)
        }
        ControllerKind::PiRl => {
            let gains = builtin_gains(job.valve)?;
            let out = train_pirl_with(&mut env, gains, &td3, &guided, episodes, agent_seed, None, clock)?;
            let ck = Checkpoint::from_pirl(&out.agent, &td3, gains, &guided, job.valve, job.seed, episodes);
            (ck, out.curve)
        }
        ControllerKind::Pi => return Err(ScenarioError::Train(TrainError::InvalidConfig("PI is not trained"))),
    };
    let policy = checkpoint.0.policy().expect("fresh checkpoint is consistent");
    let eval = tracking_job(cfg, &policy, job.valve, job.seed, 0, cfg.scenario.period, None)?;
    checkpoint.0.manifest.eval_mse = eval.mse();
    checkpoint.0.manifest.eval_seed = Some(job.seed);
    Ok(TrainedAgent { job, curve: checkpoint.1, wall_time, checkpoint: checkpoint.0 })
}

/// Replays the evaluation recorded in a checkpoint.
pub fn replay_eval_mse(cfg: &LabConfig, checkpoint: &Checkpoint) -> Result<Option<f64>, ScenarioError> {
    let Some(seed) = checkpoint.manifest.eval_seed else {
        return Ok(None);
    };
    let policy = checkpoint.policy().map_err(|e| ScenarioError::Pool(e.to_string()))?;
    Ok(tracking_job(cfg, &policy, checkpoint.manifest.valve, seed, 0, cfg.scenario.period, None)?.mse())
}

#[derive(Debug, Clone)]
pub struct LearningCurves {
    pub runs: Vec<TrainedAgent>,
    /// Per agent: mean over valves and seeds, and its moving average.
    pub aggregate: Vec<(ControllerKind, Vec<f64>, Vec<f64>)>,
}

impl LearningCurves {
    pub fn mean(&self, agent: ControllerKind) -> Option<&[f64]> {
        self.aggregate.iter().find(|a| a.0 == agent).map(|a| a.1.as_slice())
    }

    pub fn smoothed(&self, agent: ControllerKind) -> Option<&[f64]> {
        self.aggregate.iter().find(|a| a.0 == agent).map(|a| a.2.as_slice())
    }
}

/// Trains every agent on every valve and seed, in parallel.
pub fn run_learning_curves(
    cfg: &LabConfig,
    agents: &[ControllerKind],
    episodes: usize,
    workers: usize,
    timing: bool,
) -> Result<LearningCurves, ScenarioError> {
    let mut jobs = Vec::new();
    for &agent in agents {
        for &valve in &cfg.scenario.valves {
            for &seed in &cfg.scenario.train_seeds {
                jobs.push(TrainJob { agent, valve, seed });
            }
        }
    }
    let runs: Vec<TrainedAgent> =
        pool(workers)?.install(|| jobs.par_iter().map(|&j| train_agent(cfg, j, episodes, timing)).collect::<Result<_, _>>())?;
    let aggregate = agents
        .iter()
        .map(|&a| {
            let curves: Vec<&[f64]> = runs.iter().filter(|r| r.job.agent == a).map(|r| r.curve.as_slice()).collect();
            let mean = mean_curve(&curves);
            let smooth = moving_average(&mean, cfg.scenario.smoothing_window);
            (a, mean, smooth)
        })
        .collect();
    Ok(LearningCurves { runs, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prbs_fit_recovers_linearized_valve() {
        for id in 1..=3 {
            let p = ValveParams::builtin(id).unwrap().linearized();
            let (u, alpha) = prbs_experiment(&p, &PrbsConfig::default(), 0).unwrap();
            assert_eq!(u.len(), alpha.len());
            let fit = fit_detrended(&u, &alpha).unwrap();
            // mean removal leaves an edge bias of order 1/N
            for (got, want) in [(fit.a, p.a), (fit.b1, p.b1), (fit.b2, p.b2)] {
                assert!((got - want).abs() <= 1e-3 * want.abs(), "valve {id}: {got} vs {want}");
            }
        }
    }

    fn noise_free() -> LabConfig {
        let mut cfg = LabConfig::default();
        cfg.valve.noise_std = Some(0.0);
        cfg.valve.hyst_up = Some(0.0);
        cfg.valve.hyst_down = Some(0.0);
        cfg
    }

    #[test]
    fn segment_plan_examples() {
        assert_eq!(segment_plan(5.0, 40.0, 0.05), (8, 100));
        assert_eq!(segment_plan(2.5, 40.0, 0.05), (16, 50));
    }

    #[test]
    fn references_are_seeded_and_in_range() {
        let a = reference_sequence(3, 8, 5.0, 85.0);
        assert_eq!(a, reference_sequence(3, 8, 5.0, 85.0));
        assert_ne!(a, reference_sequence(4, 8, 5.0, 85.0));
        assert!(a.iter().all(|r| (5.0..=85.0).contains(r)));
    }

    #[test]
    fn pi_settles_each_segment_on_linearized_valve() {
        let mut cfg = noise_free();
        cfg.scenario.valves = vec![1];
        cfg.scenario.controllers = vec!["PI".into()];
        cfg.scenario.eval_runs = 3;
        assert_eq!(cfg.valve(1).unwrap(), ValveParams::valve1().linearized());
        let set = PolicySet::with_pi(&[1]).unwrap();
        let (traces, _) = run_tracking(&cfg, &set, 5.0, 1).unwrap();
        for t in &traces {
            assert_eq!(t.len(), 800);
            for seg in t.records.chunks(100) {
                for r in &seg[90..] {
                    assert!((r.alpha - r.alpha_ref).abs() < 0.5, "{} vs {}", r.alpha, r.alpha_ref);
                }
            }
        }
    }

    #[test]
    fn faster_references_cost_more() {
        let mut cfg = LabConfig::default();
        cfg.scenario.controllers = vec!["PI".into()];
        cfg.scenario.eval_runs = 4;
        let set = PolicySet::with_pi(&cfg.scenario.valves).unwrap();
        let (_, slow) = run_tracking(&cfg, &set, 5.0, 1).unwrap();
        let (_, fast) = run_tracking(&cfg, &set, 2.5, 1).unwrap();
        for v in 1..=3 {
            let s = slow.find(Some(v), ControllerKind::Pi, "period:5").unwrap();
            let f = fast.find(Some(v), ControllerKind::Pi, "period:2.5").unwrap();
            assert!(f.mean >= s.mean, "valve {v}: {} < {}", f.mean, s.mean);
        }
    }

    #[test]
    fn reports_are_reproducible_and_worker_independent() {
        let mut cfg = LabConfig::default();
        cfg.scenario.controllers = vec!["PI".into()];
        cfg.scenario.eval_runs = 3;
        let set = PolicySet::with_pi(&cfg.scenario.valves).unwrap();
        let a = run_tracking(&cfg, &set, 5.0, 1).unwrap();
        let b = run_tracking(&cfg, &set, 5.0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_grid_shape_and_zero_level() {
        let mut cfg = LabConfig::default();
        cfg.scenario.controllers = vec!["PI".into()];
        cfg.scenario.eval_runs = 2;
        cfg.scenario.noise_stds = vec![0.0, 5.0];
        let set = PolicySet::with_pi(&cfg.scenario.valves).unwrap();
        let report = run_noise_robustness(&cfg, &set, 1).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 1);
        let (traces, _) = run_tracking(&cfg, &set, 5.0, 1).unwrap();
        let nominal: Vec<f64> = traces.iter().map(|t| t.mse().unwrap()).collect();
        let (m, _) = crate::metrics::mean_std(&nominal);
        for kind in ["output", "control"] {
            let row = report.find(None, ControllerKind::Pi, &format!("{kind}:0")).unwrap();
            assert!((row.mean - m).abs() <= 1e-12 * m, "{kind}");
            assert_eq!(row.count, 6);
        }
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let cfg = LabConfig::default();
        let set = PolicySet::with_pi(&cfg.scenario.valves).unwrap();
        assert!(matches!(run_tracking(&cfg, &set, 5.0, 1), Err(ScenarioError::MissingCheckpoint { .. })));
    }

    #[test]
    fn tiny_learning_curves() {
        let mut cfg = LabConfig::default();
        cfg.scenario.valves = vec![1, 3];
        cfg.scenario.train_seeds = vec![0];
        cfg.td3.hidden = Some(vec![8, 8]);
        cfg.td3.batch_size = Some(16);
        cfg.td3.warmup_steps = Some(50);
        let lc = run_learning_curves(&cfg, &[ControllerKind::Td3, ControllerKind::PiRl], 2, 2, false).unwrap();
        assert_eq!(lc.runs.len(), 4);
        for r in &lc.runs {
            assert_eq!(r.curve.len(), 2);
            assert!(r.wall_time.is_empty());
            assert_eq!(replay_eval_mse(&cfg, &r.checkpoint).unwrap(), r.checkpoint.manifest.eval_mse);
        }
        for agent in [ControllerKind::Td3, ControllerKind::PiRl] {
            let per: Vec<&TrainedAgent> = lc.runs.iter().filter(|r| r.job.agent == agent).collect();
            let mean = lc.mean(agent).unwrap();
            for i in 0..2 {
                let m = (per[0].curve[i] + per[1].curve[i]) / 2.0;
                assert!((mean[i] - m).abs() <= 1e-12 * m);
            }
        }
    }
}
