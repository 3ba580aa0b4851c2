//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file (or no file) gives the desk-scale setup.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use valve_core::guided::RangeMode;
use valve_core::sysid::Placement;
use valve_core::{ControllerKind, EpisodeConfig, GuidedConfig, PiDesignSpec, Td3Config, ValveParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub env: EnvSection,
    pub valve: ValveSection,
    pub td3: Td3Section,
    pub guided: GuidedSection,
    pub design: DesignSection,
    pub scenario: ScenarioSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub horizon: usize,
    pub dt: f64,
    pub ref_low: f64,
    pub ref_high: f64,
    pub gamma: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EpisodeConfig::default();
        EnvSection { horizon: d.horizon, dt: d.dt, ref_low: d.ref_low, ref_high: d.ref_high, gamma: d.gamma }
    }
}

/// Overrides applied on top of the built-in valve constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValveSection {
    pub noise_std: Option<f64>,
    pub hyst_up: Option<f64>,
    pub hyst_down: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Section {
    /// `desk` (2x32 networks) or `full` (2x64).
    pub profile: String,
    pub gamma: Option<f64>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
    pub policy_delay: Option<usize>,
    pub target_noise_std: Option<f64>,
    pub target_noise_clip: Option<f64>,
    pub explore_std: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub actor_lr: Option<f64>,
    pub critic_lr: Option<f64>,
    pub cost_scale: Option<f64>,
    pub terminal_on_horizon: Option<bool>,
}

impl Default for Td3Section {
    fn default() -> Self {
        Td3Section {
            profile: "desk".into(),
            gamma: None,
            batch_size: None,
            tau: None,
            policy_delay: None,
            target_noise_std: None,
            target_noise_clip: None,
            explore_std: None,
            warmup_steps: None,
            buffer_capacity: None,
            hidden: None,
            actor_lr: None,
            critic_lr: None,
            cost_scale: None,
            terminal_on_horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedSection {
    pub eta: f64,
    /// `symmetric` or `one-sided`.
    pub mode: String,
    pub explore_clip: f64,
}

impl Default for GuidedSection {
    fn default() -> Self {
        let d = GuidedConfig::default();
        GuidedSection { eta: d.eta, mode: d.mode.label().into(), explore_clip: d.explore_clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    pub zeta: f64,
    pub t_rise: f64,
    /// `factored` or `two-coefficient`.
    pub placement: String,
    pub prbs_length: usize,
    pub prbs_center: f64,
    pub prbs_amplitude: f64,
}

impl Default for DesignSection {
    fn default() -> Self {
        let d = PiDesignSpec::default();
        let p = valve_core::PrbsConfig::default();
        DesignSection {
            zeta: d.zeta,
            t_rise: d.t_rise,
            placement: "factored".into(),
            prbs_length: p.length,
            prbs_center: p.center,
            prbs_amplitude: p.amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub valves: Vec<u8>,
    pub controllers: Vec<String>,
    /// Seconds between reference changes.
    pub period: f64,
    /// Seconds per tracking run.
    pub duration: f64,
    /// Number of matched evaluation runs per valve and controller.
    pub eval_runs: usize,
    pub train_seeds: Vec<u64>,
    pub episodes: usize,
    pub noise_kinds: Vec<String>,
    pub noise_stds: Vec<f64>,
    pub smoothing_window: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            valves: vec![1, 2, 3],
            controllers: vec!["PI".into(), "TD3".into(), "PI-RL".into()],
            period: 5.0,
            duration: 40.0,
            eval_runs: 10,
            train_seeds: vec![0, 1, 2],
            episodes: 300,
            noise_kinds: vec!["output".into(), "control".into()],
            noise_stds: vec![0.0, 2.0, 5.0, 10.0, 20.0],
            smoothing_window: 25,
        }
    }
}

/// Which signal robustness noise corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NoiseKind {
    Output,
    Control,
}

impl NoiseKind {
    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::Output => "output",
            NoiseKind::Control => "control",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "output" => Some(NoiseKind::Output),
            "control" => Some(NoiseKind::Control),
            _ => None,
        }
    }
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: LabConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for &v in &self.scenario.valves {
            if ValveParams::builtin(v).is_none() {
                return Err(ConfigError::Invalid(format!("unknown valve {v}")));
            }
        }
        if self.scenario.valves.is_empty() || self.scenario.controllers.is_empty() {
            return Err(ConfigError::Invalid("scenario needs at least one valve and one controller".into()));
        }
        self.controllers()?;
        self.noise_kinds()?;
        self.td3_config()?;
        self.guided_config()?;
        self.placement()?;
        if !(self.scenario.period > 0.0 && self.scenario.duration >= self.scenario.period) {
            return Err(ConfigError::Invalid("need 0 < period <= duration".into()));
        }
        if self.scenario.noise_stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(ConfigError::Invalid("noise stds must be >= 0".into()));
        }
        self.episode_config(1).validate(90.0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn valve(&self, id: u8) -> Result<ValveParams, ConfigError> {
        let mut p = ValveParams::builtin(id).ok_or_else(|| ConfigError::Invalid(format!("unknown valve {id}")))?;
        if let Some(v) = self.valve.noise_std {
            p.noise_std = v;
        }
        if let Some(v) = self.valve.hyst_up {
            p.hyst_up = v;
        }
        if let Some(v) = self.valve.hyst_down {
            p.hyst_down = v;
        }
        p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }

    pub fn episode_config(&self, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            horizon: self.env.horizon,
            dt: self.env.dt,
            ref_low: self.env.ref_low,
            ref_high: self.env.ref_high,
            gamma: self.env.gamma,
            seed,
            ..EpisodeConfig::default()
        }
    }

    pub fn td3_config(&self) -> Result<Td3Config, ConfigError> {
        let t = &self.td3;
        let mut c = match t.profile.as_str() {
            "desk" => Td3Config::desk(),
            "full" => Td3Config::default(),
            other => return Err(ConfigError::Invalid(format!("unknown td3 profile {other:?}"))),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = t.$f.clone() { c.$f = v; } )* };
        }
        set!(gamma, batch_size, tau, policy_delay, target_noise_std, target_noise_clip, explore_std, warmup_steps, buffer_capacity, hidden, actor_lr, critic_lr, cost_scale, terminal_on_horizon);
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }

    pub fn guided_config(&self) -> Result<GuidedConfig, ConfigError> {
        let mode = RangeMode::from_label(&self.guided.mode)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown range mode {:?}", self.guided.mode)))?;
        let g = GuidedConfig { eta: self.guided.eta, mode, explore_clip: self.guided.explore_clip };
        g.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(g)
    }

    pub fn design_spec(&self) -> PiDesignSpec {
        PiDesignSpec { zeta: self.design.zeta, t_rise: self.design.t_rise, ts: self.env.dt, ..PiDesignSpec::default() }
    }

    pub fn placement(&self) -> Result<Placement, ConfigError> {
        match self.design.placement.as_str() {
            "factored" => Ok(Placement::Factored),
            "two-coefficient" => Ok(Placement::TwoCoefficient),
            other => Err(ConfigError::Invalid(format!("unknown placement {other:?}"))),
        }
    }

    pub fn controllers(&self) -> Result<Vec<ControllerKind>, ConfigError> {
        self.scenario
            .controllers
            .iter()
            .map(|s| ControllerKind::from_label(s).ok_or_else(|| ConfigError::Invalid(format!("unknown controller {s:?}"))))
            .collect()
    }

    pub fn noise_kinds(&self) -> Result<Vec<NoiseKind>, ConfigError> {
        self.scenario
            .noise_kinds
            .iter()
            .map(|s| NoiseKind::from_label(s).ok_or_else(|| ConfigError::Invalid(format!("unknown noise kind {s:?}"))))
            .collect()
    }
}
