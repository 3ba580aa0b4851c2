use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use valve_core::rng::{derive_seed, stream};
use valve_core::sysid::{closed_loop_poles, design_pi_gains, spectral_radius};
use valve_core::valve::{hysteresis_metrics, staircase_experiment, StaircaseConfig};
use valve_core::{ArxFit, ControllerKind, PrbsConfig};
use valve_lab::export::{self, CurveRun};
use valve_lab::scenarios::{self, PolicySet, TrainJob};
use valve_lab::{checkpoint_name, Checkpoint, LabConfig};

/// Throttle-valve control lab: PI, TD3 and PI-guided TD3 on simulated
/// hysteretic valves.
#[derive(Parser)]
#[command(name = "valve-lab", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agent {
    Td3,
    Pirl,
}

impl Agent {
    fn kind(self) -> ControllerKind {
        match self {
            Agent::Td3 => ControllerKind::Td3,
            Agent::Pirl => ControllerKind::PiRl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Tracking,
    Noise,
}

#[derive(Subcommand)]
enum Cmd {
    /// Open-loop staircase sweep; writes the samples and prints loop metrics.
    Staircase {
        #[arg(long, default_value_t = 1)]
        valve: u8,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// PRBS identification experiment and ARX fit.
    Identify {
        #[arg(long, default_value_t = 1)]
        valve: u8,
        /// Use the noise- and hysteresis-free valve.
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify, then place the closed-loop poles of a PI law.
    TunePi {
        #[arg(long, default_value_t = 1)]
        valve: u8,
        #[arg(long)]
        linear: bool,
    },
    /// Train one agent on one valve.
    Train {
        #[arg(long, value_enum)]
        agent: Agent,
        #[arg(long, default_value_t = 1)]
        valve: u8,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Fill the wall_time_s column of the curve.
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate the configured controllers on a scenario.
    Evaluate {
        #[arg(long, value_enum)]
        scenario: Scenario,
        /// Directory holding td3_valveN.ckpt / pirl_valveN.ckpt.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV (tracking only).
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Seconds between reference changes (overrides the config).
        #[arg(long)]
        period: Option<f64>,
    },
    /// Train TD3 and PI-RL on every configured valve and seed.
    Curves {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        timing: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    match cli.cmd {
        Cmd::Staircase { valve, repeats, out } => staircase(&cfg, valve, repeats, &out),
        Cmd::Identify { valve, linear, out } => identify(&cfg, valve, linear, Some(&out)).map(|_| ()),
        Cmd::TunePi { valve, linear } => tune_pi(&cfg, valve, linear),
        Cmd::Train { agent, valve, episodes, checkpoint, curve, timing } => {
            train(&cfg, agent, valve, episodes, &checkpoint, curve.as_deref(), timing)
        }
        Cmd::Evaluate { scenario, checkpoints, out, traces, period } => {
            evaluate(&cfg, scenario, checkpoints.as_deref(), &out, traces.as_deref(), period)
        }
        Cmd::Curves { episodes, out_dir, timing } => curves(&cfg, episodes, &out_dir, timing),
    }
}

fn staircase(cfg: &LabConfig, valve: u8, repeats: usize, out: &Path) -> Result<()> {
    let params = cfg.valve(valve)?;
    let sc = StaircaseConfig { dt: cfg.env.dt, ..StaircaseConfig::default() };
    let mut rng = stream(derive_seed(cfg.seed, &[valve as u64]));
    let traces = staircase_experiment(&params, &sc, &mut rng, repeats)?;
    export::to_file(out, |f| export::write_staircase(f, &traces))?;
    println!("repeat,loop_area,asymmetry");
    for t in &traces {
        let m = hysteresis_metrics(t)?;
        println!("{},{:.3},{:.3}", t.repeat, m.loop_area, m.asymmetry);
    }
    Ok(())
}

fn identify(cfg: &LabConfig, valve: u8, linear: bool, out: Option<&Path>) -> Result<ArxFit> {
    let mut params = cfg.valve(valve)?;
    if linear {
        params = params.linearized();
    }
    let prbs = PrbsConfig {
        length: cfg.design.prbs_length,
        center: cfg.design.prbs_center,
        amplitude: cfg.design.prbs_amplitude,
        seed: cfg.seed.max(1),
    };
    let (u, alpha) = scenarios::prbs_experiment(&params, &prbs, derive_seed(cfg.seed, &[valve as u64]))?;
    if let Some(out) = out {
        export::to_file(out, |f| export::write_identification(f, &u, &alpha, cfg.env.dt))?;
    }
    let fit = scenarios::fit_detrended(&u, &alpha)?;
    println!("valve {valve}: a = {:.5}, b1 = {:.5}, b2 = {:.5}, residual rms = {:.4}", fit.a, fit.b1, fit.b2, fit.residual_rms);
    println!("simulator: a = {}, b1 = {}, b2 = {}", params.a, params.b1, params.b2);
    Ok(fit)
}

fn tune_pi(cfg: &LabConfig, valve: u8, linear: bool) -> Result<()> {
    let fit = identify(cfg, valve, linear, None)?;
    let spec = cfg.design_spec();
    let d = design_pi_gains(&fit, &spec, cfg.placement()?)?;
    println!("r0 = {:.5}, r1 = {:.5}, double pole = {:.5}, third pole = {:.5}", d.r0, d.r1, d.double_pole, d.third_pole);
    println!("closed loop {}", if d.stable { "stable" } else { "UNSTABLE" });
    let builtin = scenarios::builtin_gains(valve)?;
    let rho = spectral_radius(&closed_loop_poles(&fit, &builtin));
    println!("built-in gains r0 = {}, r1 = {}: spectral radius {:.5} on this fit", builtin.r0, builtin.r1, rho);
    Ok(())
}

fn train(cfg: &LabConfig, agent: Agent, valve: u8, episodes: Option<usize>, ckpt: &Path, curve: Option<&Path>, timing: bool) -> Result<()> {
    let episodes = episodes.unwrap_or(cfg.scenario.episodes);
    let job = TrainJob { agent: agent.kind(), valve, seed: cfg.seed };
    let run = scenarios::train_agent(cfg, job, episodes, timing)?;
    run.checkpoint.save(ckpt)?;
    if let Some(p) = curve {
        let wt = timing.then_some(run.wall_time.as_slice());
        export::to_file(p, |f| export::write_curve(f, &run.curve, wt))?;
    }
    if let Some(m) = run.checkpoint.manifest.eval_mse {
        println!("{} valve {valve}: {episodes} episodes, evaluation MSE {m:.3}", job.agent);
    }
    Ok(())
}

fn evaluate(cfg: &LabConfig, scenario: Scenario, dir: Option<&Path>, out: &Path, traces: Option<&Path>, period: Option<f64>) -> Result<()> {
    let mut set = PolicySet::with_pi(&cfg.scenario.valves)?;
    for kind in cfg.controllers()? {
        if kind == ControllerKind::Pi {
            continue;
        }
        for &v in &cfg.scenario.valves {
            let Some(dir) = dir else {
                bail!("{kind} needs --checkpoints");
            };
            let path = dir.join(checkpoint_name(kind, v));
            if !path.exists() {
                bail!("missing checkpoint for {kind} on valve {v}: {}", path.display());
            }
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if ck.manifest.valve != v || ck.kind()? != kind {
                bail!("{} holds {} for valve {}", path.display(), ck.manifest.kind, ck.manifest.valve);
            }
            set.insert(v, ck.policy()?);
        }
    }
    let report = match scenario {
        Scenario::Tracking => {
            let period = period.unwrap_or(cfg.scenario.period);
            let (tr, report) = scenarios::run_tracking(cfg, &set, period, cfg.workers)?;
            if let Some(p) = traces {
                export::to_file(p, |f| export::write_traces(f, &tr))?;
            }
            report
        }
        Scenario::Noise => scenarios::run_noise_robustness(cfg, &set, cfg.workers)?,
    };
    export::to_file(out, |f| export::write_report(f, &report))?;
    for r in &report.rows {
        let valve = r.valve.map(|v| v.to_string()).unwrap_or_else(|| "all".into());
        println!("valve {valve:>3} {:>5} {:<12} {:9.3} +- {:.3}", r.controller.label(), r.condition, r.mean, r.std);
    }
    Ok(())
}

fn curves(cfg: &LabConfig, episodes: Option<usize>, dir: &Path, timing: bool) -> Result<()> {
    let episodes = episodes.unwrap_or(cfg.scenario.episodes);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let agents = [ControllerKind::Td3, ControllerKind::PiRl];
    let lc = scenarios::run_learning_curves(cfg, &agents, episodes, cfg.workers, timing)?;
    let runs: Vec<CurveRun> =
        lc.runs.iter().map(|r| CurveRun { agent: r.job.agent, valve: r.job.valve, seed: r.job.seed, curve: &r.curve }).collect();
    export::to_file(&dir.join("curve_runs.csv"), |f| export::write_curve_runs(f, &runs))?;
    let rows: Vec<(ControllerKind, &[f64], &[f64])> = lc.aggregate.iter().map(|(a, m, s)| (*a, m.as_slice(), s.as_slice())).collect();
    export::to_file(&dir.join("curve_aggregate.csv"), |f| export::write_curve_aggregate(f, &rows))?;
    if timing {
        for r in &lc.runs {
            let name = format!("{}_seed{}_curve.csv", checkpoint_name(r.job.agent, r.job.valve).trim_end_matches(".ckpt"), r.job.seed);
            export::to_file(&dir.join(name), |f| export::write_curve(f, &r.curve, Some(&r.wall_time)))?;
        }
    }
    let first = cfg.scenario.train_seeds.first().copied();
    for r in lc.runs.iter().filter(|r| Some(r.job.seed) == first) {
        r.checkpoint.save(&dir.join(checkpoint_name(r.job.agent, r.job.valve)))?;
    }
    for (a, mean, _) in &lc.aggregate {
        let auc: f64 = mean.iter().take(150).sum();
        println!("{a}: area over first 150 episodes {auc:.1}, final episode {:.1}", mean.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}
