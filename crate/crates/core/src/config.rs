//! Run configuration. Defaults follow the co-training hyper-parameter table,
//! with network sizes and step counts scaled down for a single CPU.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envgrid::EnvSpec;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// World-model and agent network sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Deterministic recurrent state width `D`.
    pub deter: usize,
    /// Number of categorical latent groups `G`.
    pub groups: usize,
    /// Classes per group `K`.
    pub classes: usize,
    /// Hidden width of every MLP.
    pub hidden: usize,
    /// Free-bits floor on the posterior/prior KL, in nats.
    pub free_nats: f64,
    /// Weight on the prior side of the balanced KL.
    pub kl_balance: f64,
    /// Lower bound on the actor's pre-squash standard deviation.
    pub min_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deter: 128,
            groups: 8,
            classes: 8,
            hidden: 128,
            free_nats: 1.0,
            kl_balance: 0.8,
            min_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn stoch(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of the `h ⊕ z` feature vector consumed by heads, actor and critic.
    pub fn feat(&self) -> usize {
        self.deter + self.stoch()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.deter", self.deter),
            ("model.groups", self.groups),
            ("model.hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(Error::config("model.kl_balance", "must lie in [0, 1]"));
        }
        if self.free_nats < 0.0 || self.min_std <= 0.0 {
            return Err(Error::config(
                "model.free_nats/min_std",
                "free_nats >= 0 and min_std > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Domain KL off (`β₂ = 0`).
    NoAlign,
    /// Max-min value regularization off (`α = 0`).
    NoValueReg,
    /// Both off: a single-domain offline world-model agent.
    OfflineBaseline,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAlign => "no_align",
            Ablation::NoValueReg => "no_value_reg",
            Ablation::OfflineBaseline => "offline_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_align" => Ok(Ablation::NoAlign),
            "no_value_reg" => Ok(Ablation::NoValueReg),
            "offline_baseline" => Ok(Ablation::OfflineBaseline),
            other => Err(Error::config(
                "ablation",
                format!("unknown ablation `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoWorldConfig {
    pub schema: u32,

    /// KL loss scale `β₁`.
    pub kl_scale: f64,
    /// Domain KL loss scale `β₂`.
    pub domain_kl_scale: f64,
    /// Source reward balancing `k`.
    pub reward_mix: f64,
    /// Target critic value loss scale `α`.
    pub value_reg_scale: f64,
    /// Value scale unifier `ζ`.
    pub value_scale: f64,
    /// Imagination horizon `H`.
    pub horizon: usize,
    /// Posterior states (drawn without replacement from each batch) that
    /// seed imagination; all of them when the batch has fewer.
    pub imagine_starts: usize,
    /// Discount `γ`.
    pub discount: f64,
    /// λ-target.
    pub lambda: f64,
    /// Target-domain updates per outer iteration (`K₁`).
    pub target_steps: usize,
    /// Source-domain updates per outer iteration (`K₂`).
    pub source_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Gradient updates spent pretraining the source agent.
    pub pretrain_steps: usize,
    pub outer_iterations: usize,
    /// Random-policy episodes collected before the first source update.
    pub prefill_episodes: usize,
    /// Source updates per freshly collected source episode.
    pub updates_per_episode: usize,
    /// Replay capacity in environment steps.
    pub buffer_capacity: usize,

    pub model: ModelConfig,
    pub wm_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub entropy_scale: f64,
    /// Updates between slow-critic refreshes.
    pub slow_critic_every: usize,
    /// Blend fraction used by the slow-critic refresh (1 = hard copy).
    pub slow_critic_fraction: f64,

    pub source_env: EnvSpec,
    pub target_env: EnvSpec,
    pub seed: u64,
    /// Evaluate after every `eval_every` outer iterations (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Metrics row cadence in updates.
    pub log_every: usize,
    pub ablation: Ablation,
}

impl Default for CoWorldConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kl_scale: 1.0,
            domain_kl_scale: 1.5,
            reward_mix: 0.2,
            value_reg_scale: 0.2,
            value_scale: 1.0,
            horizon: 15,
            imagine_starts: 64,
            discount: 0.995,
            lambda: 0.95,
            target_steps: 500,
            source_steps: 500,
            batch_size: 16,
            seq_len: 16,
            pretrain_steps: 2000,
            outer_iterations: 5,
            prefill_episodes: 5,
            updates_per_episode: 50,
            buffer_capacity: 200_000,
            model: ModelConfig::default(),
            wm_lr: 2e-4,
            actor_lr: 4e-5,
            critic_lr: 1e-4,
            grad_clip: 100.0,
            entropy_scale: 1e-4,
            slow_critic_every: 100,
            slow_critic_fraction: 1.0,
            source_env: EnvSpec::source(1),
            target_env: EnvSpec::downhill(2),
            seed: 0,
            eval_every: 1,
            eval_episodes: 10,
            log_every: 50,
            ablation: Ablation::None,
        }
    }
}

impl CoWorldConfig {
    /// Collects every validation failure rather than stopping at the first.
    pub fn validation_errors(&self) -> Vec<Error> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, reason: &str| {
            if !ok {
                errs.push(Error::config(field, reason));
            }
        };
        check(
            self.schema == SCHEMA_VERSION,
            "schema",
            "unsupported schema version",
        );
        check(self.kl_scale > 0.0, "kl_scale", "must be positive");
        check(
            self.domain_kl_scale >= 0.0,
            "domain_kl_scale",
            "must be >= 0",
        );
        check(
            (0.0..=1.0).contains(&self.reward_mix),
            "reward_mix",
            "k must lie in [0, 1]",
        );
        check(
            self.value_reg_scale >= 0.0,
            "value_reg_scale",
            "alpha must be >= 0",
        );
        check(
            self.value_scale > 0.0,
            "value_scale",
            "zeta must be positive",
        );
        check(self.horizon >= 1, "horizon", "must be >= 1");
        check(self.imagine_starts >= 1, "imagine_starts", "must be >= 1");
        check(
            self.discount > 0.0 && self.discount <= 1.0,
            "discount",
            "must lie in (0, 1]",
        );
        check(
            (0.0..=1.0).contains(&self.lambda),
            "lambda",
            "must lie in [0, 1]",
        );
        check(self.target_steps >= 1, "target_steps", "K1 must be >= 1");
        check(self.source_steps >= 1, "source_steps", "K2 must be >= 1");
        check(self.batch_size >= 1, "batch_size", "must be >= 1");
        check(self.seq_len >= 2, "seq_len", "must be >= 2");
        check(
            self.updates_per_episode >= 1,
            "updates_per_episode",
            "must be >= 1",
        );
        check(
            self.wm_lr > 0.0 && self.actor_lr > 0.0 && self.critic_lr > 0.0,
            "learning rates",
            "must be positive",
        );
        check(self.grad_clip > 0.0, "grad_clip", "must be positive");
        check(self.entropy_scale >= 0.0, "entropy_scale", "must be >= 0");
        check(
            self.slow_critic_every >= 1,
            "slow_critic_every",
            "must be >= 1",
        );
        check(
            self.slow_critic_fraction > 0.0 && self.slow_critic_fraction <= 1.0,
            "slow_critic_fraction",
            "must lie in (0, 1]",
        );
        check(self.log_every >= 1, "log_every", "must be >= 1");
        check(
            self.buffer_capacity >= self.source_env.episode_limit,
            "buffer_capacity",
            "smaller than one episode",
        );
        if let Err(e) = self.model.validate() {
            errs.push(e);
        }
        for (name, spec) in [
            ("source_env", &self.source_env),
            ("target_env", &self.target_env),
        ] {
            if let Err(Error::Config { field, reason }) = spec.validate() {
                errs.push(Error::config(format!("{name}.{field}"), reason));
            }
        }
        if self.source_env.image_size != self.target_env.image_size {
            errs.push(Error::config(
                "target_env.image_size",
                "source and target frames must share a size",
            ));
        }
        if self.seq_len > self.source_env.episode_limit + 1 {
            errs.push(Error::config(
                "seq_len",
                "longer than a full source episode",
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.validation_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// `β₂` after applying the ablation.
    pub fn effective_domain_kl_scale(&self) -> f64 {
        match self.ablation {
            Ablation::NoAlign | Ablation::OfflineBaseline => 0.0,
            _ => self.domain_kl_scale,
        }
    }

    /// `α` after applying the ablation.
    pub fn effective_value_reg_scale(&self) -> f64 {
        match self.ablation {
            Ablation::NoValueReg | Ablation::OfflineBaseline => 0.0,
            _ => self.value_reg_scale,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}
