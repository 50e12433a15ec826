//! Network shapes, training hyperparameters and ablation variants.

use crate::env::{EnvConfig, Preset};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Network widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub agent_embedding_dim: usize,
    pub role_dim: usize,
    pub state_embedding_dim: usize,
    pub attention_heads: usize,
    pub attention_embedding_dim: usize,
    pub attention_output_dim: usize,
    pub hypernet_hidden_dim: usize,
    pub mixing_hidden_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            agent_embedding_dim: 128,
            role_dim: 64,
            state_embedding_dim: 64,
            attention_heads: 4,
            attention_embedding_dim: 128,
            attention_output_dim: 64,
            hypernet_hidden_dim: 32,
            mixing_hidden_dim: 32,
        }
    }
}

impl NetConfig {
    pub fn head_dim(&self) -> usize {
        self.attention_embedding_dim / self.attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("net.agent_embedding_dim", self.agent_embedding_dim),
            ("net.role_dim", self.role_dim),
            ("net.state_embedding_dim", self.state_embedding_dim),
            ("net.attention_heads", self.attention_heads),
            ("net.attention_embedding_dim", self.attention_embedding_dim),
            ("net.attention_output_dim", self.attention_output_dim),
            ("net.hypernet_hidden_dim", self.hypernet_hidden_dim),
            ("net.mixing_hidden_dim", self.mixing_hidden_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.attention_embedding_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::config(
                "net.attention_embedding_dim",
                "must be divisible by net.attention_heads",
            ));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdateMode {
    /// Polyak averaging after every TD update.
    Soft,
    /// Full copy every `target_update_interval` TD updates.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub learning_rate: f64,
    pub contrastive_learning_rate: f64,
    /// Linear decay of both learning rates to zero over `total_env_steps`.
    pub lr_decay: bool,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_decay_steps: u64,
    pub gamma: f64,
    pub target_update_mode: TargetUpdateMode,
    pub target_soft_tau: f64,
    pub target_update_interval: u64,
    pub momentum_beta: f64,
    /// Contrastive update every this many TD updates.
    pub contrastive_interval: u64,
    pub cluster_k: usize,
    pub kmeans_max_iters: usize,
    /// Upper bound on timesteps per trajectory used by one contrastive update.
    pub contrastive_timesteps: usize,
    pub evaluate_interval: u64,
    pub evaluate_episodes: usize,
    pub total_env_steps: u64,
    pub grad_clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub use_contrastive: bool,
    pub use_attention: bool,
    pub use_state_encoding: bool,
    pub save_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            net: NetConfig::default(),
            learning_rate: 6e-4,
            contrastive_learning_rate: 8e-4,
            lr_decay: false,
            batch_size: 32,
            buffer_capacity: 5000,
            epsilon_start: 1.0,
            epsilon_finish: 0.02,
            epsilon_decay_steps: 80_000,
            gamma: 0.99,
            target_update_mode: TargetUpdateMode::Soft,
            target_soft_tau: 0.005,
            target_update_interval: 200,
            momentum_beta: 0.005,
            contrastive_interval: 100,
            cluster_k: 3,
            kmeans_max_iters: 50,
            contrastive_timesteps: 8,
            evaluate_interval: 5000,
            evaluate_episodes: 32,
            total_env_steps: 200_000,
            grad_clip_norm: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
            use_contrastive: true,
            use_attention: true,
            use_state_encoding: true,
            save_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            env: preset.config(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("contrastive_learning_rate", self.contrastive_learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam.eps", self.adam.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("contrastive_interval", self.contrastive_interval),
            ("target_update_interval", self.target_update_interval),
            ("evaluate_interval", self.evaluate_interval),
            ("evaluate_episodes", self.evaluate_episodes as u64),
            ("kmeans_max_iters", self.kmeans_max_iters as u64),
            ("contrastive_timesteps", self.contrastive_timesteps as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::config("batch_size", "exceeds buffer_capacity"));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_finish", self.epsilon_finish),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        if !(self.target_soft_tau > 0.0 && self.target_soft_tau <= 1.0) {
            return Err(Error::config("target_soft_tau", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::config("momentum_beta", "must lie in [0, 1)"));
        }
        let n = self.env.n_agents();
        if self.cluster_k == 0 || self.cluster_k > n {
            return Err(Error::config(
                "cluster_k",
                format!("must lie in 1..={n} (number of agents), got {}", self.cluster_k),
            ));
        }
        if self.use_attention && !self.use_state_encoding {
            return Err(Error::config(
                "use_attention",
                "attention queries the state embedding and needs use_state_encoding",
            ));
        }
        Ok(())
    }

    /// Exploration rate after `env_steps` steps: linear from start to finish.
    pub fn epsilon_at(&self, env_steps: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_finish;
        }
        let frac = (env_steps as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_finish - self.epsilon_start)
    }

    pub fn lr_scale_at(&self, env_steps: u64) -> f64 {
        if !self.lr_decay || self.total_env_steps == 0 {
            return 1.0;
        }
        (1.0 - env_steps as f64 / self.total_env_steps as f64).max(0.0)
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let mut c = self.clone();
            v.apply(&mut c);
            c.use_contrastive == self.use_contrastive
                && c.use_attention == self.use_attention
                && c.use_state_encoding == self.use_state_encoding
        })
    }
}

/// The ablation suite.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ACORM")]
    Acorm,
    #[serde(rename = "ACORM_w/o_CL")]
    WithoutContrastive,
    #[serde(rename = "ACORM_w/o_MHA")]
    WithoutAttention,
    #[serde(rename = "ACORM_w/o_MHA(Vanilla)")]
    Vanilla,
    #[serde(rename = "QMIX")]
    Qmix,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Acorm,
        Variant::WithoutContrastive,
        Variant::WithoutAttention,
        Variant::Vanilla,
        Variant::Qmix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Acorm => "ACORM",
            Variant::WithoutContrastive => "ACORM_w/o_CL",
            Variant::WithoutAttention => "ACORM_w/o_MHA",
            Variant::Vanilla => "ACORM_w/o_MHA(Vanilla)",
            Variant::Qmix => "QMIX",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Acorm => "acorm",
            Variant::WithoutContrastive => "acorm_wo_cl",
            Variant::WithoutAttention => "acorm_wo_mha",
            Variant::Vanilla => "acorm_wo_mha_vanilla",
            Variant::Qmix => "qmix",
        }
    }

    /// `(use_contrastive, use_attention, use_state_encoding)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Variant::Acorm => (true, true, true),
            Variant::WithoutContrastive => (false, true, true),
            Variant::WithoutAttention => (true, false, true),
            Variant::Vanilla => (true, false, false),
            Variant::Qmix => (false, false, false),
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        let (c, a, s) = self.switches();
        config.use_contrastive = c;
        config.use_attention = a;
        config.use_state_encoding = s;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.slug() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!("unknown variant {s:?}; valid names: {}", valid.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::with_preset(Preset::Easy).validate().unwrap();
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(40_000) - 0.51).abs() < 1e-12);
        assert!((c.epsilon_at(80_000) - 0.02).abs() < 1e-12);
        assert!((c.epsilon_at(1_000_000) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn rejects_cluster_count_above_agents() {
        let mut c = TrainConfig::with_preset(Preset::Easy);
        c.cluster_k = 4;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("cluster_k"), "{err}");
    }

    #[test]
    fn variants_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let mut c = TrainConfig::default();
            v.apply(&mut c);
            c.validate().unwrap();
            assert_eq!(c.variant(), Some(v));
        }
        assert!("ACORM_w/o_X".parse::<Variant>().is_err());
    }
}
