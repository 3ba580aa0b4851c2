//! Throttle-valve simulator.
//!
//! The plant core is the second-order ARX difference equation
//! `alpha_t = a*alpha_{t-1} + b1*u_{t-1} + b2*u_{t-2}`, written as a deviation
//! from the spring rest angle. Around it sit an input backlash with
//! direction-dependent dead-bands (the asymmetric hysteresis), Gaussian
//! process noise, and a hard clamp of the plate angle to `[0, alpha_max]`.

use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::rng::gaussian;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValveError {
    #[error("control {u} outside [0, {u_max}]")]
    ControlOutOfRange { u: f64, u_max: f64 },
    #[error("invalid valve parameters: {0}")]
    InvalidParams(&'static str),
    #[error("staircase trace lacks a {0} branch")]
    MissingBranch(&'static str),
    #[error("repeats must be at least 1")]
    NoRepeats,
}

/// Identified model and nonlinearity parameters of one valve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValveParams {
    pub id: u8,
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    /// Input that closes the plate to 0 degrees in the staircase test.
    pub pwm_max: f64,
    pub u_max: f64,
    pub alpha_rest: f64,
    pub alpha_max: f64,
    pub hyst_up: f64,
    pub hyst_down: f64,
    pub noise_std: f64,
}

impl ValveParams {
    const HYST_UP: f64 = 4.0;
    const HYST_DOWN: f64 = 2.0;
    const NOISE_STD: f64 = 0.5;

    pub fn valve1() -> Self {
        Self::builtin_with(1, 0.78, -0.18, -0.23, 65.0, 80.0)
    }

    pub fn valve2() -> Self {
        Self::builtin_with(2, 0.74, -0.25, -0.41, 70.0, 80.0)
    }

    pub fn valve3() -> Self {
        Self::builtin_with(3, 0.83, -0.11, -0.23, 45.0, 60.0)
    }

    fn builtin_with(id: u8, a: f64, b1: f64, b2: f64, pwm_max: f64, u_max: f64) -> Self {
        ValveParams {
            id,
            a,
            b1,
            b2,
            pwm_max,
            u_max,
            alpha_rest: 90.0,
            alpha_max: 90.0,
            hyst_up: Self::HYST_UP,
            hyst_down: Self::HYST_DOWN,
            noise_std: Self::NOISE_STD,
        }
    }

    /// Built-in valve by id (1..=3).
    pub fn builtin(id: u8) -> Option<Self> {
        match id {
            1 => Some(Self::valve1()),
            2 => Some(Self::valve2()),
            3 => Some(Self::valve3()),
            _ => None,
        }
    }

    /// Built-in valve by name, `"valve1"`..`"valve3"`.
    pub fn by_name(name: &str) -> Option<Self> {
        name.strip_prefix("valve")
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(Self::builtin)
    }

    /// Same valve with hysteresis and process noise removed.
    pub fn linearized(mut self) -> Self {
        self.hyst_up = 0.0;
        self.hyst_down = 0.0;
        self.noise_std = 0.0;
        self
    }

    /// Steady-state angle change per percent point of effective input.
    pub fn static_gain(&self) -> f64 {
        (self.b1 + self.b2) / (1.0 - self.a)
    }

    pub fn validate(&self) -> Result<(), ValveError> {
        let all = [
            self.a, self.b1, self.b2, self.pwm_max, self.u_max, self.alpha_rest, self.alpha_max,
            self.hyst_up, self.hyst_down, self.noise_std,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ValveError::InvalidParams("non-finite field"));
        }
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(ValveError::InvalidParams("pole a must lie in (0, 1)"));
        }
        if !(self.b1 < 0.0 && self.b2 < 0.0) {
            return Err(ValveError::InvalidParams("b1 and b2 must be negative"));
        }
        if !(self.pwm_max > 0.0 && self.pwm_max <= 100.0 && self.u_max > 0.0 && self.u_max <= 100.0) {
            return Err(ValveError::InvalidParams("pwm_max and u_max must lie in (0, 100]"));
        }
        if !(0.0 <= self.alpha_rest && self.alpha_rest <= self.alpha_max) {
            return Err(ValveError::InvalidParams("need 0 <= alpha_rest <= alpha_max"));
        }
        if self.hyst_up < 0.0 || self.hyst_down < 0.0 || self.noise_std < 0.0 {
            return Err(ValveError::InvalidParams("dead-bands and noise std must be >= 0"));
        }
        Ok(())
    }
}

/// Plant memory between two sampling instants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValveState {
    pub alpha: f64,
    pub alpha_prev: f64,
    pub u_prev: f64,
    pub u_prev2: f64,
    /// Backlash output at the last step.
    pub u_eff: f64,
    /// Backlash output one step earlier.
    pub u_eff_prev: f64,
    /// +1 after the last upward backlash motion, -1 after a downward one, 0 before any.
    pub direction: i8,
}

impl ValveState {
    /// Valve resting under spring torque with zero input.
    pub fn at_rest(params: &ValveParams) -> Self {
        Self::at_angle(params.alpha_rest)
    }

    /// Plate at `alpha` with all input memory cleared.
    pub fn at_angle(alpha: f64) -> Self {
        ValveState { alpha, alpha_prev: alpha, u_prev: 0.0, u_prev2: 0.0, u_eff: 0.0, u_eff_prev: 0.0, direction: 0 }
    }
}

/// Pure ARX evaluation: `a*alpha + b1*u1 + b2*u2`, no clamp, no rest term, no noise.
pub fn step_linear(params: &ValveParams, alpha: f64, u1: f64, u2: f64) -> f64 {
    params.a * alpha + params.b1 * u1 + params.b2 * u2
}

/// Backlash with separate rising and falling dead-bands. Rate independent.
pub fn backlash(u: f64, u_eff: f64, hyst_up: f64, hyst_down: f64) -> (f64, i8) {
    if u > u_eff + hyst_up {
        (u - hyst_up, 1)
    } else if u < u_eff - hyst_down {
        (u + hyst_down, -1)
    } else {
        (u_eff, 0)
    }
}

/// Advances the valve by one sampling period under input `u`.
pub fn step<R: Rng + ?Sized>(
    params: &ValveParams,
    state: &ValveState,
    u: f64,
    rng: &mut R,
) -> Result<ValveState, ValveError> {
    if !(0.0..=params.u_max).contains(&u) {
        return Err(ValveError::ControlOutOfRange { u, u_max: params.u_max });
    }
    let (u_eff, moved) = backlash(u, state.u_eff, params.hyst_up, params.hyst_down);
    let w = gaussian(rng, params.noise_std);
    let raw = step_linear(params, state.alpha, u_eff, state.u_eff) + (1.0 - params.a) * params.alpha_rest + w;
    Ok(ValveState {
        alpha: raw.clamp(0.0, params.alpha_max),
        alpha_prev: state.alpha,
        u_prev: u,
        u_prev2: state.u_prev,
        u_eff,
        u_eff_prev: state.u_eff,
        direction: if moved != 0 { moved } else { state.direction },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Up,
    Down,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Up => "up",
            Branch::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaircaseConfig {
    pub increment: f64,
    /// Steps each level is held.
    pub settle_steps: usize,
    /// Trailing samples of a hold averaged into the steady angle.
    pub steady_window: usize,
    pub dt: f64,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        StaircaseConfig { increment: 5.0, settle_steps: 40, steady_window: 10, dt: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaircaseSample {
    pub t: f64,
    pub u: f64,
    pub u_eff: f64,
    pub alpha: f64,
    pub branch: Branch,
}

/// One up-then-down sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct StaircaseTrace {
    pub repeat: usize,
    pub samples: Vec<StaircaseSample>,
    pub settle_steps: usize,
    pub steady_window: usize,
}

/// Steady angle recorded at one input level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelReading {
    pub u: f64,
    pub alpha: f64,
}

impl StaircaseTrace {
    fn readings(&self, branch: Branch) -> Vec<LevelReading> {
        let hold = self.settle_steps.max(1);
        let window = self.steady_window.clamp(1, hold);
        self.samples
            .chunks(hold)
            .filter(|c| c.len() == hold && c[0].branch == branch)
            .map(|c| {
                let tail = &c[hold - window..];
                LevelReading { u: c[0].u, alpha: tail.iter().map(|s| s.alpha).sum::<f64>() / window as f64 }
            })
            .collect()
    }

    /// Steady readings of the ascending sweep, in sweep order (peak included).
    pub fn up_branch(&self) -> Vec<LevelReading> {
        self.readings(Branch::Up)
    }

    /// Steady readings of the descending sweep, in sweep order (peak excluded).
    pub fn down_branch(&self) -> Vec<LevelReading> {
        self.readings(Branch::Down)
    }

    /// Input levels visited, in order.
    pub fn levels(&self) -> Vec<f64> {
        let hold = self.settle_steps.max(1);
        self.samples.chunks(hold).map(|c| c[0].u).collect()
    }
}

/// Ascending levels `0, inc, 2 inc, ..` up to `pwm_max` (always included).
pub fn staircase_levels(pwm_max: f64, increment: f64) -> Vec<f64> {
    let mut levels = Vec::new();
    let mut k = 0usize;
    loop {
        let u = k as f64 * increment;
        if u >= pwm_max - 1e-9 {
            break;
        }
        levels.push(u);
        k += 1;
    }
    levels.push(pwm_max);
    levels
}

/// Increasing then decreasing step sequence over `[0, pwm_max]`, repeated.
///
/// Each repeat starts from the rest state. Levels above `u_max` are clipped
/// to `u_max`.
pub fn staircase_experiment<R: Rng + ?Sized>(
    params: &ValveParams,
    cfg: &StaircaseConfig,
    rng: &mut R,
    repeats: usize,
) -> Result<Vec<StaircaseTrace>, ValveError> {
    if repeats == 0 {
        return Err(ValveError::NoRepeats);
    }
    params.validate()?;
    let up = staircase_levels(params.pwm_max.min(params.u_max), cfg.increment);
    let schedule: Vec<(f64, Branch)> = up
        .iter()
        .map(|&u| (u, Branch::Up))
        .chain(up.iter().rev().skip(1).map(|&u| (u, Branch::Down)))
        .collect();

    let mut traces = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let mut state = ValveState::at_rest(params);
        let mut samples = Vec::with_capacity(schedule.len() * cfg.settle_steps);
        let mut k = 0usize;
        for &(u, branch) in &schedule {
            for _ in 0..cfg.settle_steps {
                state = step(params, &state, u, rng)?;
                k += 1;
                samples.push(StaircaseSample { t: k as f64 * cfg.dt, u, u_eff: state.u_eff, alpha: state.alpha, branch });
            }
        }
        traces.push(StaircaseTrace { repeat, samples, settle_steps: cfg.settle_steps, steady_window: cfg.steady_window });
    }
    Ok(traces)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HysteresisMetrics {
    /// Trapezoidal area between the two steady branches, degrees x percent.
    pub loop_area: f64,
    /// Spread of the branch gap over the levels, degrees.
    pub asymmetry: f64,
}

/// Quantifies the hysteresis loop of one staircase sweep.
pub fn hysteresis_metrics(trace: &StaircaseTrace) -> Result<HysteresisMetrics, ValveError> {
    let up = trace.up_branch();
    let mut down = trace.down_branch();
    if up.is_empty() {
        return Err(ValveError::MissingBranch("up"));
    }
    if down.is_empty() {
        return Err(ValveError::MissingBranch("down"));
    }
    // the peak reading closes the loop on both branches
    down.insert(0, *up.last().unwrap());
    down.reverse();

    let mut gaps: Vec<(f64, f64)> = Vec::with_capacity(up.len());
    for r in &up {
        if let Some(d) = down.iter().find(|d| (d.u - r.u).abs() < 1e-9) {
            gaps.push((r.u, (d.alpha - r.alpha).abs()));
        }
    }
    let loop_area = gaps.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    let max = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let min = gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    Ok(HysteresisMetrics { loop_area, asymmetry: max - min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn quiet(mut p: ValveParams) -> ValveParams {
        p.noise_std = 0.0;
        p
    }

    #[test]
    fn linear_step_examples() {
        let v = ValveParams::valve1();
        assert!((step_linear(&v, 10.0, 0.0, 0.0) - 7.8).abs() < 1e-12);
        assert_eq!(step_linear(&v, 0.0, 0.0, 0.0), 0.0);
        assert!((step_linear(&v, 10.0, 20.0, 20.0) - (-0.4)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_step_is_clamped_linear() {
        let mut p = ValveParams::valve1().linearized();
        p.alpha_rest = 0.0;
        let mut rng = stream(1);
        let s0 = ValveState { alpha: 40.0, alpha_prev: 40.0, u_prev: 10.0, u_prev2: 10.0, u_eff: 10.0, u_eff_prev: 10.0, direction: 0 };
        let s1 = step(&p, &s0, 12.0, &mut rng).unwrap();
        let expect = step_linear(&p, 40.0, 12.0, 10.0).clamp(0.0, p.alpha_max);
        assert_eq!(s1.alpha, expect);
        assert_eq!(s1.u_eff, 12.0);
    }

    #[test]
    fn rest_angle_is_fixed_point() {
        let p = quiet(ValveParams::valve1());
        let mut rng = stream(2);
        let mut s = ValveState::at_rest(&p);
        for _ in 0..50 {
            s = step(&p, &s, 0.0, &mut rng).unwrap();
            assert_eq!(s.alpha, p.alpha_rest);
        }
    }

    #[test]
    fn rejects_out_of_range_control() {
        let p = ValveParams::valve3();
        let mut rng = stream(0);
        let s = ValveState::at_rest(&p);
        assert!(matches!(step(&p, &s, 60.5, &mut rng), Err(ValveError::ControlOutOfRange { .. })));
        assert!(step(&p, &s, -0.1, &mut rng).is_err());
    }

    #[test]
    fn staircase_level_grid() {
        let p = ValveParams::valve1();
        let mut rng = stream(4);
        let traces = staircase_experiment(&p, &StaircaseConfig::default(), &mut rng, 5).unwrap();
        assert_eq!(traces.len(), 5);
        let levels = traces[0].levels();
        let expect: Vec<f64> = (0..=13).map(|k| 5.0 * k as f64).chain((0..13).rev().map(|k| 5.0 * k as f64)).collect();
        assert_eq!(levels, expect);
    }

    #[test]
    fn noise_free_branches_are_monotone_and_separated() {
        let p = quiet(ValveParams::valve1());
        let mut rng = stream(5);
        let tr = &staircase_experiment(&p, &StaircaseConfig::default(), &mut rng, 1).unwrap()[0];
        let up = tr.up_branch();
        let down = tr.down_branch();
        assert!(up.windows(2).all(|w| w[1].alpha <= w[0].alpha));
        // down branch is swept with decreasing u, so angles are non-decreasing in sweep order
        assert!(down.windows(2).all(|w| w[1].alpha >= w[0].alpha));
        let gap = up.iter().filter_map(|r| down.iter().find(|d| d.u == r.u).map(|d| (d.alpha - r.alpha).abs())).fold(0.0, f64::max);
        assert!(gap > 0.0);
    }

    #[test]
    fn no_hysteresis_gives_zero_loop() {
        let p = ValveParams::valve1().linearized();
        let mut rng = stream(6);
        let cfg = StaircaseConfig { settle_steps: 200, ..Default::default() };
        let tr = &staircase_experiment(&p, &cfg, &mut rng, 1).unwrap()[0];
        let m = hysteresis_metrics(tr).unwrap();
        assert!(m.loop_area.abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn default_valves_show_asymmetric_loop() {
        for id in 1..=3 {
            let p = ValveParams::builtin(id).unwrap();
            let mut rng = stream(7);
            let tr = &staircase_experiment(&p, &StaircaseConfig::default(), &mut rng, 1).unwrap()[0];
            let m = hysteresis_metrics(tr).unwrap();
            assert!(m.loop_area > 0.0 && m.asymmetry > 0.0, "valve {id}: {m:?}");
        }
    }

    #[test]
    fn repeats_differ_under_noise() {
        let p = ValveParams::valve2();
        let mut rng = stream(8);
        let t = staircase_experiment(&p, &StaircaseConfig::default(), &mut rng, 2).unwrap();
        assert_ne!(t[0].up_branch(), t[1].up_branch());
    }

    #[test]
    fn metrics_need_both_branches() {
        let p = ValveParams::valve1();
        let mut rng = stream(9);
        let mut tr = staircase_experiment(&p, &StaircaseConfig::default(), &mut rng, 1).unwrap().remove(0);
        tr.samples.retain(|s| s.branch == Branch::Up);
        assert_eq!(hysteresis_metrics(&tr), Err(ValveError::MissingBranch("down")));
    }

    #[test]
    fn builtins_validate() {
        for id in 1..=3 {
            ValveParams::builtin(id).unwrap().validate().unwrap();
        }
        assert_eq!(ValveParams::by_name("valve2").unwrap().id, 2);
        assert!(ValveParams::by_name("valve9").is_none());
    }

    proptest! {
        #[test]
        fn angle_stays_in_range(seed in any::<u64>(), us in proptest::collection::vec(0.0f64..=80.0, 1..60)) {
            let p = ValveParams { noise_std: 5.0, ..ValveParams::valve1() };
            let mut rng = stream(seed);
            let mut s = ValveState::at_rest(&p);
            for u in us {
                s = step(&p, &s, u, &mut rng).unwrap();
                prop_assert!((0.0..=p.alpha_max).contains(&s.alpha));
            }
        }

        #[test]
        fn zero_deadband_tracks_input(us in proptest::collection::vec(0.0f64..=80.0, 1..60)) {
            let p = ValveParams::valve1().linearized();
            let mut rng = stream(0);
            let mut s = ValveState::at_rest(&p);
            for u in us {
                s = step(&p, &s, u, &mut rng).unwrap();
                prop_assert_eq!(s.u_eff, u);
            }
        }

        #[test]
        fn backlash_is_rate_independent(u in 0.0f64..80.0, start in 0.0f64..80.0, up in 0.0f64..6.0, down in 0.0f64..6.0) {
            let (once, _) = backlash(u, start, up, down);
            let (twice, _) = backlash(u, once, up, down);
            prop_assert!((once - twice).abs() <= 1e-12 * once.abs().max(1.0));
        }

        #[test]
        fn noise_free_step_is_deterministic(seed1 in any::<u64>(), seed2 in any::<u64>(), u in 0.0f64..80.0, alpha in 0.0f64..90.0) {
            let p = ValveParams { noise_std: 0.0, ..ValveParams::valve1() };
            let s = ValveState::at_angle(alpha);
            let a = step(&p, &s, u, &mut stream(seed1)).unwrap();
            let b = step(&p, &s, u, &mut stream(seed2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
