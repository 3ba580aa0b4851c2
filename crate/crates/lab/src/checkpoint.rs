//! Checkpoint container.
//!
//! Layout, in order:
//!
//! 1. the magic line `valve-lab checkpoint`;
//! 2. a plain-text TOML manifest (format version, agent kind, valve, seed,
//!    training config, guide gains for PI-RL, one `[[arrays]]` entry per
//!    network with its layer sizes and offset, and the SHA-256 of the data);
//! 3. the separator line `%%data%%`;
//! 4. every network's flat parameter vector as little-endian `f64`s.
//!
//! Networks store each layer as a row-major `out x in` weight block followed
//! by its bias vector, so a manifest entry with sizes `[4, 32, 32, 1]`
//! covers `4*32 + 32 + 32*32 + 32 + 32*1 + 1` values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use valve_core::guided::RangeMode;
use valve_core::nn::NnError;
use valve_core::td3::{ActorCritic, Normalizer};
use valve_core::{ControllerKind, GuidedConfig, GuidedPolicy, Mlp, PiGains, Squash, Td3Config, Td3Policy};

use crate::policy::Policy;

pub const MAGIC: &str = "valve-lab checkpoint\n";
pub const SEPARATOR: &str = "\n%%data%%\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic line)")]
    BadMagic,
    #[error("checkpoint has no data separator")]
    NoSeparator,
    #[error("manifest is not valid UTF-8")]
    NotUtf8,
    #[error("corrupted manifest: {0}")]
    Manifest(#[from] toml::de::Error),
    #[error("checkpoint format version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("data digest mismatch: manifest says {expected}, data hashes to {actual}")]
    Digest { expected: String, actual: String },
    #[error("array {name:?}: {detail}")]
    Shape { name: String, detail: String },
    #[error("missing array {0:?}")]
    MissingArray(&'static str),
    #[error("unknown agent kind {0:?}")]
    Kind(String),
    #[error("PI-RL checkpoint lacks guide gains")]
    MissingGuide,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Td3Manifest {
    pub gamma: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub explore_std: f64,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub cost_scale: f64,
    pub actor_final_scale: f64,
    pub terminal_on_horizon: bool,
}

impl From<&Td3Config> for Td3Manifest {
    fn from(c: &Td3Config) -> Self {
        Td3Manifest {
            gamma: c.gamma,
            batch_size: c.batch_size,
            tau: c.tau,
            policy_delay: c.policy_delay,
            target_noise_std: c.target_noise_std,
            target_noise_clip: c.target_noise_clip,
            explore_std: c.explore_std,
            warmup_steps: c.warmup_steps,
            buffer_capacity: c.buffer_capacity,
            hidden: c.hidden.clone(),
            actor_lr: c.actor_lr,
            critic_lr: c.critic_lr,
            cost_scale: c.cost_scale,
            actor_final_scale: c.actor_final_scale,
            terminal_on_horizon: c.terminal_on_horizon,
        }
    }
}

impl From<&Td3Manifest> for Td3Config {
    fn from(m: &Td3Manifest) -> Self {
        Td3Config {
            gamma: m.gamma,
            batch_size: m.batch_size,
            tau: m.tau,
            policy_delay: m.policy_delay,
            target_noise_std: m.target_noise_std,
            target_noise_clip: m.target_noise_clip,
            explore_std: m.explore_std,
            warmup_steps: m.warmup_steps,
            buffer_capacity: m.buffer_capacity,
            hidden: m.hidden.clone(),
            actor_lr: m.actor_lr,
            critic_lr: m.critic_lr,
            cost_scale: m.cost_scale,
            actor_final_scale: m.actor_final_scale,
            terminal_on_horizon: m.terminal_on_horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideManifest {
    pub r0: f64,
    pub r1: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub eta: f64,
    pub mode: String,
    pub explore_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub sizes: Vec<usize>,
    pub squash: String,
    /// Offset into the data block, in `f64` values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub valve: u8,
    pub seed: u64,
    pub episodes: usize,
    pub alpha_max: f64,
    pub u_max: f64,
    pub data_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_seed: Option<u64>,
    pub td3: Td3Manifest,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub guide: Option<GuideManifest>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub networks: Vec<(String, Mlp)>,
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

impl Checkpoint {
    fn build(kind: ControllerKind, agent: &ActorCritic, cfg: &Td3Config, valve: u8, seed: u64, episodes: usize, guide: Option<GuideManifest>) -> Self {
        let networks = vec![
            ("actor".to_string(), agent.actor.clone()),
            ("critic1".to_string(), agent.critic1.clone()),
            ("critic2".to_string(), agent.critic2.clone()),
        ];
        let manifest = Manifest {
            version: VERSION,
            kind: kind.label().into(),
            valve,
            seed,
            episodes,
            alpha_max: agent.norm.alpha_max,
            u_max: agent.norm.u_max,
            data_sha256: String::new(),
            eval_mse: None,
            eval_seed: None,
            td3: cfg.into(),
            guide,
            arrays: Vec::new(),
        };
        Checkpoint { manifest, networks }
    }

    pub fn from_td3(agent: &ActorCritic, cfg: &Td3Config, valve: u8, seed: u64, episodes: usize) -> Self {
        Self::build(ControllerKind::Td3, agent, cfg, valve, seed, episodes, None)
    }

    pub fn from_pirl(agent: &ActorCritic, cfg: &Td3Config, gains: PiGains, guided: &GuidedConfig, valve: u8, seed: u64, episodes: usize) -> Self {
        let guide = GuideManifest {
            r0: gains.r0,
            r1: gains.r1,
            u_min: gains.u_min,
            u_max: gains.u_max,
            eta: guided.eta,
            mode: guided.mode.label().into(),
            explore_clip: guided.explore_clip,
        };
        Self::build(ControllerKind::PiRl, agent, cfg, valve, seed, episodes, Some(guide))
    }

    pub fn kind(&self) -> Result<ControllerKind, CheckpointError> {
        match ControllerKind::from_label(&self.manifest.kind) {
            Some(k @ (ControllerKind::Td3 | ControllerKind::PiRl)) => Ok(k),
            _ => Err(CheckpointError::Kind(self.manifest.kind.clone())),
        }
    }

    pub fn network(&self, name: &'static str) -> Result<&Mlp, CheckpointError> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, m)| m).ok_or(CheckpointError::MissingArray(name))
    }

    pub fn td3_config(&self) -> Td3Config {
        (&self.manifest.td3).into()
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer { alpha_max: self.manifest.alpha_max, u_max: self.manifest.u_max }
    }

    /// The deployable controller stored in this checkpoint.
    pub fn policy(&self) -> Result<Policy, CheckpointError> {
        let actor = self.network("actor")?.clone();
        let norm = self.normalizer();
        match self.kind()? {
            ControllerKind::Td3 => Ok(Policy::Td3(Td3Policy { actor, norm })),
            _ => {
                let g = self.manifest.guide.as_ref().ok_or(CheckpointError::MissingGuide)?;
                let mode = RangeMode::from_label(&g.mode).ok_or_else(|| CheckpointError::Kind(g.mode.clone()))?;
                Ok(Policy::PiRl(GuidedPolicy {
                    gains: PiGains::new(g.r0, g.r1, g.u_min, g.u_max),
                    perturb: actor,
                    cfg: GuidedConfig { eta: g.eta, mode, explore_clip: g.explore_clip },
                    norm,
                }))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut manifest = self.manifest.clone();
        manifest.arrays.clear();
        for (name, net) in &self.networks {
            manifest.arrays.push(ArrayEntry {
                name: name.clone(),
                sizes: net.sizes().to_vec(),
                squash: net.squash().label().into(),
                offset: data.len() / 8,
                len: net.num_params(),
            });
            for p in net.params() {
                data.extend_from_slice(&p.to_le_bytes());
            }
        }
        manifest.data_sha256 = sha256_hex(&data);
        let text = toml::to_string(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + text.len() + SEPARATOR.len() + data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(SEPARATOR.as_bytes());
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let rest = bytes.strip_prefix(MAGIC.as_bytes()).ok_or(CheckpointError::BadMagic)?;
        let sep = SEPARATOR.as_bytes();
        let pos = rest.windows(sep.len()).position(|w| w == sep).ok_or(CheckpointError::NoSeparator)?;
        let text = std::str::from_utf8(&rest[..pos]).map_err(|_| CheckpointError::NotUtf8)?;
        let data = &rest[pos + sep.len()..];
        let manifest: Manifest = toml::from_str(text)?;
        if manifest.version != VERSION {
            return Err(CheckpointError::Version { found: manifest.version });
        }
        let actual = sha256_hex(data);
        if actual != manifest.data_sha256 {
            return Err(CheckpointError::Digest { expected: manifest.data_sha256.clone(), actual });
        }
        if data.len() % 8 != 0 {
            return Err(CheckpointError::Shape { name: "<data>".into(), detail: format!("{} bytes is not a whole number of f64", data.len()) });
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut networks = Vec::new();
        for a in &manifest.arrays {
            let shape_err = |detail: String| CheckpointError::Shape { name: a.name.clone(), detail };
            let squash = Squash::from_label(&a.squash).ok_or_else(|| shape_err(format!("unknown squash {:?}", a.squash)))?;
            let expected: usize = a.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            if expected != a.len {
                return Err(shape_err(format!("sizes {:?} need {expected} values, manifest says {}", a.sizes, a.len)));
            }
            let end = a.offset.checked_add(a.len).filter(|&e| e <= values.len());
            let Some(end) = end else {
                return Err(shape_err(format!("range {}..{} exceeds {} stored values", a.offset, a.offset + a.len, values.len())));
            };
            let net = Mlp::from_parts(&a.sizes, squash, values[a.offset..end].to_vec())?;
            networks.push((a.name.clone(), net));
        }
        let ckpt = Checkpoint { manifest, networks };
        let actor = ckpt.network("actor")?;
        if actor.in_dim() != 4 || actor.out_dim() != 1 {
            return Err(CheckpointError::Shape { name: "actor".into(), detail: format!("expected 4 -> 1, found sizes {:?}", actor.sizes()) });
        }
        ckpt.kind()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
