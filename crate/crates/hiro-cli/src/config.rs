//! Experiment configuration: a TOML file with one section per module,
//! overridable by command-line flags. The resolved config is echoed into the
//! run directory and must parse back identical.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hiro_core::correction::CorrectionKind;
use hiro_core::envs::EnvKind;
use hiro_core::orchestrator::{Ablation, HiroConfig};
use hiro_core::td3::Td3Config;
use serde::{Deserialize, Serialize};

/// Run identity: what to train, under which seed, and where results land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub env: String,
    pub master_seed: u64,
    /// Output root; each run creates its own directory underneath. Unset
    /// falls back to `HIRO_OUT_DIR`, then `./runs`.
    pub out_dir: Option<String>,
    /// Minimum environment steps between checkpoints; snapshots are taken on
    /// evaluation boundaries. 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            env: "maze".to_string(),
            master_seed: 0,
            out_dir: None,
            checkpoint_every: 50_000,
        }
    }
}

/// Mirror of the training-loop parameters, minus the nested network section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiroSection {
    pub c: usize,
    pub low_reward_scale: f64,
    pub high_reward_scale: f64,
    pub low_train_every: usize,
    pub high_train_every: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub total_steps: u64,
    pub batch_size: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub ablation: Ablation,
    pub correction: CorrectionKind,
    pub pretrain_steps: u64,
    pub buffer_capacity: usize,
}

impl Default for HiroSection {
    fn default() -> Self {
        HiroSection::split(&HiroConfig::default())
    }
}

impl HiroSection {
    fn split(config: &HiroConfig) -> Self {
        HiroSection {
            c: config.c,
            low_reward_scale: config.low_reward_scale,
            high_reward_scale: config.high_reward_scale,
            low_train_every: config.low_train_every,
            high_train_every: config.high_train_every,
            eval_every: config.eval_every,
            eval_episodes: config.eval_episodes,
            total_steps: config.total_steps,
            batch_size: config.batch_size,
            sigma_low: config.sigma_low,
            sigma_high: config.sigma_high,
            ablation: config.ablation,
            correction: config.correction,
            pretrain_steps: config.pretrain_steps,
            buffer_capacity: config.buffer_capacity,
        }
    }

    fn join(&self, td3: Td3Config) -> HiroConfig {
        HiroConfig {
            c: self.c,
            low_reward_scale: self.low_reward_scale,
            high_reward_scale: self.high_reward_scale,
            low_train_every: self.low_train_every,
            high_train_every: self.high_train_every,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            sigma_low: self.sigma_low,
            sigma_high: self.sigma_high,
            ablation: self.ablation,
            correction: self.correction,
            pretrain_steps: self.pretrain_steps,
            buffer_capacity: self.buffer_capacity,
            td3,
        }
    }
}

/// Mirror of the network and optimizer parameters shared by both levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Section {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_delay: u64,
    pub policy_noise_scale: f64,
    pub noise_clip_scale: f64,
}

impl Default for Td3Section {
    fn default() -> Self {
        let td3 = Td3Config::default();
        Td3Section {
            hidden: td3.hidden,
            gamma: td3.gamma,
            tau: td3.tau,
            actor_lr: td3.actor_lr,
            critic_lr: td3.critic_lr,
            actor_delay: td3.actor_delay,
            policy_noise_scale: td3.policy_noise_scale,
            noise_clip_scale: td3.noise_clip_scale,
        }
    }
}

impl Td3Section {
    fn join(&self) -> Td3Config {
        Td3Config {
            hidden: self.hidden.clone(),
            gamma: self.gamma,
            tau: self.tau,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            actor_delay: self.actor_delay,
            // Per-level sigmas from the hiro section replace this.
            exploration_sigma: Td3Config::default().exploration_sigma,
            policy_noise_scale: self.policy_noise_scale,
            noise_clip_scale: self.noise_clip_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub hiro: HiroSection,
    pub td3: Td3Section,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub env: Option<String>,
    pub ablation: Option<String>,
    pub correction: Option<String>,
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).context("configuration error")
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        ExperimentConfig::from_toml(&text)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<()> {
        if let Some(env) = &overrides.env {
            self.experiment.env = env.clone();
        }
        if let Some(name) = &overrides.ablation {
            self.hiro.ablation =
                Ablation::from_name(name).with_context(|| format!("unknown ablation {name:?}"))?;
        }
        if let Some(name) = &overrides.correction {
            self.hiro.correction = CorrectionKind::from_name(name)
                .with_context(|| format!("unknown correction {name:?}"))?;
        }
        if let Some(seed) = overrides.seed {
            self.experiment.master_seed = seed;
        }
        if let Some(steps) = overrides.total_steps {
            self.hiro.total_steps = steps;
        }
        Ok(())
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        let name = &self.experiment.env;
        match EnvKind::from_name(name) {
            Some(kind) => Ok(kind),
            None => bail!("unknown env {name:?} (expected maze, push, fall, or gather)"),
        }
    }

    pub fn hiro_config(&self) -> HiroConfig {
        self.hiro.join(self.td3.join())
    }

    pub fn validate(&self) -> Result<()> {
        self.env_kind()?;
        self.hiro_config().validate()?;
        Ok(())
    }

    /// Directory name for this run under the output root.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-seed{}",
            self.experiment.env,
            self.hiro.ablation.name(),
            self.experiment.master_seed
        )
    }
}

/// Output root precedence: flag, then config, then HIRO_OUT_DIR, then ./runs.
pub fn resolve_out_root(flag: Option<&str>, config: Option<&str>, env_var: Option<&str>) -> String {
    flag.or(config)
        .or(env_var)
        .filter(|s| !s.is_empty())
        .unwrap_or("runs")
        .to_string()
}
