//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.
//!
//! Criteria 8 and 9 train ten desk-profile agents (300 episodes, 2x32
//! networks) and take several minutes per core.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use valve_core::env::run_episode;
use valve_core::pi::pi_control;
use valve_core::guided::{perturbation_range, GuidedMap};
use valve_core::nn::{mlp_gradient, Tape};
use valve_core::rng::{derive_seed, stream, uniform};
use valve_core::sysid::{closed_loop_poles, eval_cubic, fit_arx, generate_prbs, spectral_radius};
use valve_core::td3::{ActionMap, ActorCritic, Normalizer};
use valve_core::valve::{hysteresis_metrics, staircase_experiment, step_linear, StaircaseConfig};
use valve_core::*;
use valve_lab::config::LabConfig;
use valve_lab::metrics::{mean_std, spearman};
use valve_lab::scenarios::{self, PolicySet, TrainJob, TrainedAgent};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_pi_fixed_point() -> Outcome {
    let mut rng = stream(1);
    let mut cases = 0;
    for id in 1..=3u8 {
        let g = PiGains::builtin(id).unwrap();
        for _ in 0..10_000 {
            let a = uniform(&mut rng, 0.0, 90.0);
            let u = uniform(&mut rng, g.u_min, g.u_max);
            let obs = Observation { alpha_ref: a, alpha_prev: a, alpha: a, u_prev: u };
            if pi_control(&obs, &g) != u {
                return Err(format!("valve {id}: fixed point broken at alpha {a}, u {u}"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} fixed points exact"))
}

fn c2_arx_recovery() -> Outcome {
    let mut worst: f64 = 0.0;
    for id in 1..=3u8 {
        let p = ValveParams::builtin(id).unwrap();
        let u = generate_prbs(&PrbsConfig::default()).map_err(|e| e.to_string())?;
        let mut alpha = vec![0.0; u.len()];
        alpha[0] = 2.0;
        for t in 1..u.len() {
            let u2 = if t >= 2 { u[t - 2] } else { 0.0 };
            alpha[t] = step_linear(&p, alpha[t - 1], u[t - 1], u2);
        }
        let fit = fit_arx(&u, &alpha).map_err(|e| e.to_string())?;
        for (got, want) in [(fit.a, p.a), (fit.b1, p.b1), (fit.b2, p.b2)] {
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    check(worst <= 1e-9, format!("max relative error {worst:.2e}"))
}

fn c3_stability() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for id in 1..=3u8 {
        let p = ValveParams::builtin(id).unwrap();
        let fit = ArxFit { a: p.a, b1: p.b1, b2: p.b2, residual_rms: 0.0 };
        let g = PiGains::builtin(id).unwrap();
        let roots = closed_loop_poles(&fit, &g);
        let c = [g.r0 * p.b1 - p.a - 1.0, p.a + p.b1 * g.r1 + p.b2 * g.r0, p.b2 * g.r1];
        // independent polynomial evaluation in z: z^3 + c1 z^2 + c2 z + c3
        let residual = roots.iter().map(|z| (z * z * z + c[0] * z * z + c[1] * z + c[2]).norm()).fold(0.0, f64::max);
        let residual2 = roots.iter().map(|z| eval_cubic(c, *z).norm()).fold(0.0, f64::max);
        let rho = spectral_radius(&roots);
        ok &= rho < 1.0 && residual < 1e-8 && residual2 < 1e-8;
        detail.push(format!("valve {id} rho {rho:.4} residual {residual:.1e}"));
    }
    check(ok, detail.join(", "))
}

fn c4_gradients() -> Outcome {
    let shapes: [(&[usize], Squash); 4] = [
        (&[4, 32, 32, 1], Squash::Tanh),
        (&[5, 32, 32, 1], Squash::Identity),
        (&[4, 64, 64, 1], Squash::Tanh),
        (&[5, 64, 64, 1], Squash::Identity),
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut rng = stream(4);
    for (sizes, squash) in shapes {
        for trial in 0..3 {
            let mut net = Mlp::init(sizes, squash, 1.0, &mut rng).unwrap();
            let x: Vec<f64> = (0..sizes[0]).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let f = |n: &Mlp, x: &[f64]| n.forward(x).unwrap()[0];
            let analytic = mlp_gradient(&net, &x, &[1.0]).unwrap();
            let mut numeric = vec![0.0; net.num_params()];
            for i in 0..net.num_params() {
                let orig = net.params()[i];
                net.params_mut()[i] = orig + h;
                let up = f(&net, &x);
                net.params_mut()[i] = orig - h;
                let down = f(&net, &x);
                net.params_mut()[i] = orig;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let mut tape = Tape::default();
            net.forward_tape(&x, &mut tape).unwrap();
            let gx = net.backward(&tape, &[1.0], None).unwrap();
            let nx: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    (f(&net, &xp) - f(&net, &xm)) / (2.0 * h)
                })
                .collect();
            for (a, n) in [(&analytic, &numeric), (&gx, &nx)] {
                let diff: f64 = a.iter().zip(n.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                let scale = a.iter().map(|p| p * p).sum::<f64>().sqrt().max(n.iter().map(|q| q * q).sum::<f64>().sqrt());
                let rel = if scale == 0.0 { 0.0 } else { diff / scale };
                if rel >= 1e-4 {
                    return Err(format!("shape {sizes:?} trial {trial}: relative error {rel:.2e}"));
                }
                worst = worst.max(rel);
            }
        }
    }
    Ok(format!("worst relative error {worst:.2e} over 4 shapes"))
}

fn c5_hysteresis() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for id in 1..=3u8 {
        let p = ValveParams::builtin(id).unwrap();
        let traces = staircase_experiment(&p, &StaircaseConfig::default(), &mut stream(derive_seed(5, &[id as u64])), 5).map_err(|e| e.to_string())?;
        let metrics: Vec<_> = traces.iter().map(hysteresis_metrics).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let areas: Vec<f64> = metrics.iter().map(|m| m.loop_area).collect();
        let (mean_area, spread) = mean_std(&areas);
        let min_asym = metrics.iter().map(|m| m.asymmetry).fold(f64::INFINITY, f64::min);
        let min_area = areas.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= min_area > 0.0 && min_asym > 0.0 && spread > 0.0;
        detail.push(format!("valve {id} area {mean_area:.0}+-{spread:.1} asym>={min_asym:.2}"));
    }
    check(ok, detail.join(", "))
}

fn c6_envelope() -> Outcome {
    let mut rng = stream(6);
    let mut widths = Vec::new();
    for id in 1..=3u8 {
        let g = PiGains::builtin(id).unwrap();
        let gcfg = GuidedConfig { eta: 0.5, ..Default::default() };
        let (lo, hi) = perturbation_range(g.u_max, gcfg.eta, gcfg.mode);
        widths.push(hi - lo);
        let map = GuidedMap::new(g, &gcfg);
        let bound = gcfg.eta * g.u_max / 2.0;
        let net = Mlp::init(&[4, 32, 32, 1], Squash::Tanh, 3.0, &mut rng).unwrap();
        let policy = GuidedPolicy { gains: g, perturb: net, cfg: gcfg, norm: Normalizer { alpha_max: 90.0, u_max: g.u_max } };
        for _ in 0..10_000 {
            let obs = Observation {
                alpha_ref: uniform(&mut rng, 0.0, 90.0),
                alpha_prev: uniform(&mut rng, 0.0, 90.0),
                alpha: uniform(&mut rng, 0.0, 90.0),
                u_prev: uniform(&mut rng, 0.0, g.u_max),
            };
            let pi = PiController { gains: g }.control(&obs);
            let u = policy.control(&obs);
            if (u - pi).abs() > bound + 1e-9 {
                return Err(format!("valve {id}: |{u} - {pi}| exceeds {bound}"));
            }
            let y = policy.perturb.forward(&policy.norm.obs(&obs)).unwrap()[0];
            let explored = map.control(&obs, map.explore(y, uniform(&mut rng, -5.0, 5.0)));
            if (explored - pi).abs() > bound * (1.0 + gcfg.explore_clip) + 1e-9 {
                return Err(format!("valve {id}: exploring control {explored} leaves the envelope around {pi}"));
            }
        }
    }
    check(widths == [40.0, 40.0, 30.0], format!("S(U) widths {widths:?}, 3x10^4 observations inside"))
}

fn c7_warm_start() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for id in 1..=3u8 {
        let p = ValveParams::builtin(id).unwrap();
        let g = PiGains::builtin(id).unwrap();
        let cfg = Td3Config::desk();
        let agent = ActorCritic::new(&cfg, Normalizer { alpha_max: p.alpha_max, u_max: p.u_max }, &mut stream(70 + id as u64)).unwrap();
        let pirl = GuidedPolicy::from_agent(&agent, g, GuidedConfig::default());
        let pi = PiController { gains: g };
        let (mut c_pi, mut c_rl) = (0.0, 0.0);
        for k in 0..50u64 {
            let env_cfg = EpisodeConfig { seed: derive_seed(7, &[id as u64, k]), ..Default::default() };
            c_pi += run_episode(&mut Env::new(p, env_cfg).unwrap(), &pi, ControllerKind::Pi).unwrap().total_cost() / 50.0;
            c_rl += run_episode(&mut Env::new(p, env_cfg).unwrap(), &pirl, ControllerKind::PiRl).unwrap().total_cost() / 50.0;
        }
        let rel = (c_rl - c_pi).abs() / c_pi;
        ok &= rel <= 0.10;
        detail.push(format!("valve {id} PI {c_pi:.1} PI-RL {c_rl:.1} ({:.2}%)", 100.0 * rel));
    }
    check(ok, detail.join(", "))
}

/// The ten desk-profile training runs shared by criteria 8 and 9.
fn train_all(cfg: &LabConfig) -> Result<Vec<TrainedAgent>, String> {
    let mut jobs = Vec::new();
    for agent in [ControllerKind::Td3, ControllerKind::PiRl] {
        for seed in [0, 1, 2] {
            jobs.push(TrainJob { agent, valve: 1, seed });
        }
        for valve in [2, 3] {
            jobs.push(TrainJob { agent, valve, seed: 0 });
        }
    }
    use rayon::prelude::*;
    jobs.par_iter().map(|&j| scenarios::train_agent(cfg, j, 300, false)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())
}

fn seed_mean(runs: &[TrainedAgent], agent: ControllerKind) -> Vec<f64> {
    let curves: Vec<&[f64]> = runs.iter().filter(|r| r.job.agent == agent && r.job.valve == 1).map(|r| r.curve.as_slice()).collect();
    valve_lab::metrics::mean_curve(&curves)
}

fn c8_sample_efficiency(runs: &[TrainedAgent], window: usize) -> Outcome {
    let td3 = seed_mean(runs, ControllerKind::Td3);
    let pirl = seed_mean(runs, ControllerKind::PiRl);
    let (s_td3, s_pirl) = (valve_lab::metrics::moving_average(&td3, window), valve_lab::metrics::moving_average(&pirl, window));
    let auc_td3: f64 = td3[..=150].iter().sum();
    let auc_pirl: f64 = pirl[..=150].iter().sum();
    check(
        s_pirl[100] <= s_td3[100] && auc_pirl < auc_td3,
        format!(
            "episode 100 ({window}-episode mean) PI-RL {:.1} vs TD3 {:.1}; AUC 0-150 PI-RL {auc_pirl:.0} vs TD3 {auc_td3:.0}",
            s_pirl[100], s_td3[100]
        ),
    )
}

fn c9_rl_beats_pi(cfg: &LabConfig, runs: &[TrainedAgent]) -> Outcome {
    let mut set = PolicySet::with_pi(&[1, 2, 3]).map_err(|e| e.to_string())?;
    for r in runs.iter().filter(|r| r.job.seed == 0) {
        set.insert(r.job.valve, r.policy());
    }
    let (traces, _) = scenarios::run_tracking(cfg, &set, 5.0, 0).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for v in 1..=3u8 {
        let scores = |c: ControllerKind| -> Vec<f64> {
            traces.iter().filter(|t| t.valve_id == v && t.controller == c).map(|t| t.mse().unwrap()).collect()
        };
        let pi = scores(ControllerKind::Pi);
        for c in [ControllerKind::Td3, ControllerKind::PiRl] {
            let rl = scores(c);
            let diffs: Vec<f64> = rl.iter().zip(&pi).map(|(a, b)| a - b).collect();
            let (d, _) = mean_std(&diffs);
            let wins = diffs.iter().filter(|d| **d < 0.0).count();
            ok &= d < 0.0;
            detail.push(format!("v{v} {c} {:.1} vs PI {:.1} ({wins}/{} runs better)", mean_std(&rl).0, mean_std(&pi).0, diffs.len()));
        }
    }
    check(ok, detail.join("; "))
}

fn c10_noise_monotone() -> Outcome {
    let mut cfg = LabConfig::default();
    cfg.scenario.controllers = vec!["PI".into()];
    let set = PolicySet::with_pi(&cfg.scenario.valves).map_err(|e| e.to_string())?;
    let report = scenarios::run_noise_robustness(&cfg, &set, 0).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in ["output", "control"] {
        let stds = &cfg.scenario.noise_stds;
        let means: Vec<f64> =
            stds.iter().map(|s| report.find(None, ControllerKind::Pi, &format!("{kind}:{s}")).unwrap().mean).collect();
        let rho = spearman(stds, &means).unwrap_or(f64::NAN);
        ok &= rho > 0.0;
        let curve: Vec<String> = means.iter().map(|m| format!("{m:.0}")).collect();
        detail.push(format!("{kind} rho {rho:.2} [{}]", curve.join(" ")));
    }
    check(ok, detail.join(", "))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_valve-lab")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn c11_determinism() -> Outcome {
    let config = "[td3]\nwarmup_steps = 100\nbatch_size = 32\nhidden = [16, 16]\n[scenario]\nvalves = [1]\neval_runs = 2\nnoise_stds = [0.0, 5.0]\n";
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        std::fs::write(d.join("lab.toml"), config).map_err(|e| e.to_string())?;
        let common = ["--config", "lab.toml", "--seed", "11", "--workers", "1"];
        let cmds: [&[&str]; 6] = [
            &["staircase", "--valve", "2", "--repeats", "2", "--out", "staircase.csv"],
            &["identify", "--valve", "3", "--out", "ident.csv"],
            &["train", "--agent", "td3", "--valve", "1", "--episodes", "3", "--checkpoint", "td3_valve1.ckpt", "--curve", "td3_curve.csv"],
            &["train", "--agent", "pirl", "--valve", "1", "--episodes", "3", "--checkpoint", "pirl_valve1.ckpt", "--curve", "pirl_curve.csv"],
            &["evaluate", "--scenario", "tracking", "--checkpoints", ".", "--out", "tracking.csv", "--traces", "traces.csv"],
            &["evaluate", "--scenario", "noise", "--checkpoints", ".", "--out", "noise.csv"],
        ];
        for c in cmds {
            let args: Vec<&str> = common.iter().chain(c.iter()).copied().collect();
            run_cli(&args, d)?;
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(d)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let names: Vec<&str> = outputs[0].iter().map(|f| f.0.as_str()).collect();
    check(outputs[0] == outputs[1] && names.len() == 10, format!("{} files byte-identical across reruns", names.len()))
}

fn main() {
    let cfg = LabConfig::default();
    let mut failed = 0;
    let mut report = |n: u32, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    };
    let t = Instant::now();
    report(1, "PI fixed point", t, c1_pi_fixed_point());
    let t = Instant::now();
    report(2, "ARX recovery", t, c2_arx_recovery());
    let t = Instant::now();
    report(3, "stability audit", t, c3_stability());
    let t = Instant::now();
    report(4, "gradient correctness", t, c4_gradients());
    let t = Instant::now();
    report(5, "hysteresis reproduction", t, c5_hysteresis());
    let t = Instant::now();
    report(6, "guided-policy envelope", t, c6_envelope());
    let t = Instant::now();
    report(7, "warm start", t, c7_warm_start());
    let t = Instant::now();
    match train_all(&cfg) {
        Ok(runs) => {
            report(8, "sample efficiency", t, c8_sample_efficiency(&runs, cfg.scenario.smoothing_window));
            let t = Instant::now();
            report(9, "RL beats PI", t, c9_rl_beats_pi(&cfg, &runs));
        }
        Err(e) => {
            report(8, "sample efficiency", t, Err(format!("training failed: {e}")));
            report(9, "RL beats PI", t, Err(format!("training failed: {e}")));
        }
    }
    let t = Instant::now();
    report(10, "noise monotonicity", t, c10_noise_monotone());
    let t = Instant::now();
    report(11, "determinism", t, c11_determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
