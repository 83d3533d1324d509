//! The collaborative training pipeline.
//!
//! 1. Pretrain a source agent online in the source env.
//! 2. Repeat for `outer_iterations`:
//!    * target iteration: `target_steps` offline updates of the target agent,
//!      with its encoder pulled toward the frozen source encoder and its
//!      critic capped by the frozen source critic;
//!    * source iteration: `source_steps` online updates of the source agent,
//!      whose reward head additionally fits target-modulated rewards on
//!      offline target batches.
//!
//! The target env is never stepped here except by explicit evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::behavior::{actor_loss, critic_loss, imagine_trajectories, ActMode, Actor, Critic};
use crate::config::{Ablation, CoWorldConfig};
use crate::container::{ArrayData, Container, CHECKPOINT_MAGIC};
use crate::datastore::{
    load_dataset, write_manifest, DatasetManifest, DatasetWriter, EvalPoint, ReplayBuffer,
    SequenceBatch,
};
use crate::envgrid::{domain_steps_on_thread, make_env, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::evalkit::{
    alignment_divergence, evaluate_agent, evaluate_policy, rollout_episode, value_diagnostic,
    AgentPolicy, RandomPolicy, ScriptedPolicy, ValueDiagnostic,
};
use crate::nn::{Adam, AdamConfig, ParamSet};
use crate::worldmodel::{Draw, RssmState, WmLossReport, WorldModel};
use crate::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// World model, actor, critic (plus slow copy) and their optimisers.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    role: Role,
    pub wm: WorldModel,
    pub actor: Actor,
    pub critic: Critic,
    pub slow_critic: Critic,
    pub wm_opt: Adam,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub behavior_updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BehaviorReport {
    pub actor_loss: f64,
    pub imagined_return: f64,
    pub policy_entropy: f64,
    pub critic_total: f64,
    pub td_loss: f64,
    pub regularizer: f64,
    pub fraction_clamped: f64,
}

fn add_grads(into: &mut [Array2<f64>], other: &[Array2<f64>]) {
    for (a, b) in into.iter_mut().zip(other) {
        *a += b;
    }
}

fn frame_shape(spec: &EnvSpec) -> (usize, usize, usize) {
    (spec.image_size, spec.image_size, spec.channels)
}

impl AgentBundle {
    pub fn new(
        role: Role,
        cfg: &CoWorldConfig,
        frame_shape: (usize, usize, usize),
        action_dim: usize,
        rng: &mut Prng,
    ) -> Self {
        let m = &cfg.model;
        let wm = WorldModel::new(m, frame_shape, action_dim, rng);
        let actor = Actor::new(m.feat(), m.hidden, action_dim, m.min_std, rng);
        let critic = Critic::new(m.feat(), m.hidden, rng);
        let slow_critic = critic.clone();
        let opt = |lr: f64| AdamConfig {
            clip_norm: Some(cfg.grad_clip),
            ..AdamConfig::with_lr(lr)
        };
        Self {
            role,
            wm_opt: Adam::new(opt(cfg.wm_lr), &wm.params),
            actor_opt: Adam::new(opt(cfg.actor_lr), &actor.params),
            critic_opt: Adam::new(opt(cfg.critic_lr), &critic.params),
            wm,
            actor,
            critic,
            slow_critic,
            behavior_updates: 0,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn param_sets(&self) -> [(&'static str, &ParamSet); 4] {
        [
            ("wm", &self.wm.params),
            ("actor", &self.actor.params),
            ("critic", &self.critic.params),
            ("slow_critic", &self.slow_critic.params),
        ]
    }

    /// SHA-256 over every parameter value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, ps) in self.param_sets() {
            for t in ps.tensors() {
                for v in t.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.param_sets().iter().all(|(_, p)| p.all_finite())
    }

    /// One world-model step; `extra` gradients are added before the update.
    pub fn wm_update(
        &mut self,
        batch: &SequenceBatch,
        source: Option<&WorldModel>,
        beta_kl: f64,
        beta_domain: f64,
        extra: Option<&[Array2<f64>]>,
        rng: &mut Prng,
    ) -> Result<(WmLossReport, RssmState)> {
        let mut out = self.wm.wm_loss(batch, source, beta_kl, beta_domain, rng)?;
        if let Some(extra) = extra {
            add_grads(&mut out.grads, extra);
        }
        self.wm_opt.update(&mut self.wm.params, &out.grads);
        if !self.wm.params.all_finite() {
            return Err(Error::numeric("world-model parameters"));
        }
        Ok((out.report, out.posterior))
    }

    /// Imagines from `start`, then updates actor and critic; the slow critic
    /// is refreshed every `slow_critic_every` calls.
    pub fn behavior_update(
        &mut self,
        cfg: &CoWorldConfig,
        start: &RssmState,
        source_critic: Option<&Critic>,
        alpha: f64,
        rng: &mut Prng,
    ) -> Result<BehaviorReport> {
        let subset;
        let start = if start.rows() > cfg.imagine_starts {
            let mut rows =
                rand::seq::index::sample(rng, start.rows(), cfg.imagine_starts).into_vec();
            rows.sort_unstable();
            subset = start.select(&rows);
            &subset
        } else {
            start
        };
        let mut img = imagine_trajectories(
            &self.wm,
            &self.actor,
            &self.slow_critic,
            start,
            cfg.horizon,
            cfg.discount,
            rng,
        )?;
        let (actor_rep, actor_grads, _) = actor_loss(&mut img, cfg.lambda, cfg.entropy_scale)?;
        let rollout = img.rollout();
        drop(img);
        let crit = critic_loss(
            &self.critic,
            source_critic,
            &rollout,
            alpha,
            cfg.value_scale,
            cfg.lambda,
        )?;
        self.actor_opt.update(&mut self.actor.params, &actor_grads);
        self.critic_opt.update(&mut self.critic.params, &crit.grads);
        if !self.actor.params.all_finite() || !self.critic.params.all_finite() {
            return Err(Error::numeric("actor/critic parameters"));
        }
        self.behavior_updates += 1;
        if self.behavior_updates % cfg.slow_critic_every as u64 == 0 {
            self.slow_critic
                .params
                .blend_from(&self.critic.params, cfg.slow_critic_fraction);
        }
        Ok(BehaviorReport {
            actor_loss: actor_rep.loss,
            imagined_return: actor_rep.mean_return,
            policy_entropy: actor_rep.mean_entropy,
            critic_total: crit.report.total,
            td_loss: crit.report.td_loss,
            regularizer: crit.report.regularizer,
            fraction_clamped: crit.report.fraction_clamped,
        })
    }

    pub fn to_container(&self, cfg: &CoWorldConfig) -> Container {
        let mut c = Container {
            meta: serde_json::json!({
                "role": self.role,
                "config_hash": cfg.hash(),
                "config": cfg,
                "frame_shape": [self.wm.frame_shape.0, self.wm.frame_shape.1, self.wm.frame_shape.2],
                "action_dim": self.wm.action_dim,
                "behavior_updates": self.behavior_updates,
                "opt_steps": [self.wm_opt.step, self.actor_opt.step, self.critic_opt.step],
            }),
            arrays: vec![],
        };
        for (prefix, ps) in self.param_sets() {
            for (name, t) in ps.names().iter().zip(ps.tensors()) {
                c.push(
                    format!("{prefix}.{name}"),
                    t.shape().to_vec(),
                    ArrayData::F64(t.iter().copied().collect()),
                );
            }
        }
        for (prefix, opt) in [
            ("wm", &self.wm_opt),
            ("actor", &self.actor_opt),
            ("critic", &self.critic_opt),
        ] {
            let (m, v) = opt.moments();
            for (kind, list) in [("m", m), ("v", v)] {
                for (i, t) in list.iter().enumerate() {
                    c.push(
                        format!("opt.{prefix}.{kind}.{i}"),
                        t.shape().to_vec(),
                        ArrayData::F64(t.iter().copied().collect()),
                    );
                }
            }
        }
        c
    }

    pub fn save(&self, cfg: &CoWorldConfig, path: &Path) -> Result<()> {
        self.to_container(cfg).save(path, CHECKPOINT_MAGIC)
    }

    /// Rebuilds a bundle and the config it was trained with.
    pub fn from_container(c: &Container) -> Result<(Self, CoWorldConfig)> {
        let meta = &c.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::format(format!("meta.{k}"), "missing"))
        };
        let cfg: CoWorldConfig = serde_json::from_value(field("config")?)
            .map_err(|e| Error::format("meta.config", e.to_string()))?;
        let role: Role = serde_json::from_value(field("role")?)
            .map_err(|e| Error::format("meta.role", e.to_string()))?;
        let fs: [usize; 3] = serde_json::from_value(field("frame_shape")?)
            .map_err(|e| Error::format("meta.frame_shape", e.to_string()))?;
        let action_dim: usize = serde_json::from_value(field("action_dim")?)
            .map_err(|e| Error::format("meta.action_dim", e.to_string()))?;
        let updates: u64 = serde_json::from_value(field("behavior_updates")?)
            .map_err(|e| Error::format("meta.behavior_updates", e.to_string()))?;
        let steps: [u64; 3] = serde_json::from_value(field("opt_steps")?)
            .map_err(|e| Error::format("meta.opt_steps", e.to_string()))?;
        let stored_hash = field("config_hash")?;
        if stored_hash.as_str() != Some(cfg.hash().as_str()) {
            return Err(Error::format(
                "meta.config_hash",
                "does not match stored config",
            ));
        }
        let mut b = AgentBundle::new(
            role,
            &cfg,
            (fs[0], fs[1], fs[2]),
            action_dim,
            &mut Prng::seed_from_u64(0),
        );
        fn fill(c: &Container, prefix: &str, ps: &mut ParamSet) -> Result<()> {
            let names = ps.names().to_vec();
            for (name, t) in names.iter().zip(ps.tensors_mut()) {
                let key = format!("{prefix}.{name}");
                let (shape, data) = c.f64s(&key)?;
                if shape != t.shape() {
                    return Err(Error::format(
                        format!("arrays.{key}"),
                        format!("shape {shape:?}, expected {:?}", t.shape()),
                    ));
                }
                t.as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(data);
            }
            Ok(())
        }
        fill(c, "wm", &mut b.wm.params)?;
        fill(c, "actor", &mut b.actor.params)?;
        fill(c, "critic", &mut b.critic.params)?;
        fill(c, "slow_critic", &mut b.slow_critic.params)?;
        let moments = |prefix: &str, ps: &ParamSet, kind: &str| -> Result<Vec<Array2<f64>>> {
            (0..ps.len())
                .map(|i| {
                    let key = format!("opt.{prefix}.{kind}.{i}");
                    let (shape, data) = c.f64s(&key)?;
                    let dim = ps.tensors()[i].dim();
                    if shape != [dim.0, dim.1] {
                        return Err(Error::format(format!("arrays.{key}"), "shape mismatch"));
                    }
                    Ok(Array2::from_shape_vec(dim, data.to_vec()).expect("shape checked"))
                })
                .collect()
        };
        b.wm_opt = Adam::from_parts(
            b.wm_opt.config,
            steps[0],
            moments("wm", &b.wm.params, "m")?,
            moments("wm", &b.wm.params, "v")?,
        );
        b.actor_opt = Adam::from_parts(
            b.actor_opt.config,
            steps[1],
            moments("actor", &b.actor.params, "m")?,
            moments("actor", &b.actor.params, "v")?,
        );
        b.critic_opt = Adam::from_parts(
            b.critic_opt.config,
            steps[2],
            moments("critic", &b.critic.params, "m")?,
            moments("critic", &b.critic.params, "v")?,
        );
        b.behavior_updates = updates;
        Ok((b, cfg))
    }

    pub fn load(path: &Path) -> Result<(Self, CoWorldConfig)> {
        Self::from_container(&Container::load(path, CHECKPOINT_MAGIC)?)
    }
}

// ---- target-modulated rewards ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Source,
    Target,
}

/// `k·predicted + (1 − k)·actual`.
pub fn relabel(k: f64, predicted: f64, actual: f64) -> f64 {
    k * predicted + (1.0 - k) * actual
}

fn check_mix(k: f64) -> Result<()> {
    if (0.0..=1.0).contains(&k) {
        Ok(())
    } else {
        Err(Error::config("reward_mix", format!("{k} outside [0, 1]")))
    }
}

/// Rewards for a batch, time-major `[L·B, 1]`. Target batches are filtered
/// by the source model and blended with its reward prediction.
pub fn relabel_source_rewards(
    batch: &SequenceBatch,
    origin: Origin,
    source_wm: &WorldModel,
    k: f64,
    rng: &mut Prng,
) -> Result<Array2<f64>> {
    check_mix(k)?;
    let actual = batch.time_major_column(&batch.rewards);
    if origin == Origin::Source {
        return Ok(actual);
    }
    let mut g = Graph::new();
    let p = source_wm.params.bind(&mut g);
    let seq = source_wm.observe_sequence(&mut g, &p, batch, &mut Draw::Sample(rng))?;
    let mean = source_wm.reward(&mut g, &p, seq.feat);
    let pred = g.value(mean);
    Ok(ndarray::Zip::from(pred)
        .and(&actual)
        .map_collect(|&r, &a| relabel(k, r, a)))
}

#[derive(Debug, Clone)]
pub struct RewardMleOutput {
    /// Reward NLL on source states against source rewards.
    pub source_nll: f64,
    /// Reward NLL on target states against relabelled rewards; 0 without a batch.
    pub target_nll: f64,
    pub total: f64,
    pub grads: Vec<Array2<f64>>,
}

fn target_reward_nll(
    g: &mut Graph,
    p: &crate::nn::Bound,
    wm: &WorldModel,
    batch: &SequenceBatch,
    k: f64,
    rng: &mut Prng,
) -> Result<crate::autograd::Var> {
    let seq = wm.observe_sequence(g, p, batch, &mut Draw::Sample(rng))?;
    let mean = wm.reward(g, p, seq.feat);
    let pred = g.detach(mean);
    let actual = g.constant(batch.time_major_column(&batch.rewards));
    let a = g.scale(pred, k);
    let b = g.scale(actual, 1.0 - k);
    let target = g.add(a, b);
    Ok(WorldModel::reward_nll(g, mean, target))
}

/// Reward-head likelihood over source states (true rewards) plus target
/// states (relabelled rewards). Gradients cover every world-model parameter.
pub fn reward_mle_loss(
    source_wm: &WorldModel,
    source_batch: &SequenceBatch,
    target_batch: Option<&SequenceBatch>,
    k: f64,
    rng: &mut Prng,
) -> Result<RewardMleOutput> {
    check_mix(k)?;
    let mut g = Graph::new();
    let p = source_wm.params.bind(&mut g);
    let seq = source_wm.observe_sequence(&mut g, &p, source_batch, &mut Draw::Sample(rng))?;
    let mean = source_wm.reward(&mut g, &p, seq.feat);
    let actual = g.constant(source_batch.time_major_column(&source_batch.rewards));
    let source_nll = WorldModel::reward_nll(&mut g, mean, actual);
    let total = match target_batch {
        Some(tb) if tb.batch > 0 => {
            let t = target_reward_nll(&mut g, &p, source_wm, tb, k, rng)?;
            g.add(source_nll, t)
        }
        _ => source_nll,
    };
    let (s, tot) = (g.scalar(source_nll), g.scalar(total));
    if !tot.is_finite() {
        return Err(Error::numeric("reward likelihood"));
    }
    let mut grads = g.backward(total);
    Ok(RewardMleOutput {
        source_nll: s,
        target_nll: tot - s,
        total: tot,
        grads: p.grads(&mut grads),
    })
}

/// Target-state term of [`reward_mle_loss`] alone, with gradients.
pub fn target_reward_loss(
    wm: &WorldModel,
    batch: &SequenceBatch,
    k: f64,
    rng: &mut Prng,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_mix(k)?;
    let mut g = Graph::new();
    let p = wm.params.bind(&mut g);
    let nll = target_reward_nll(&mut g, &p, wm, batch, k, rng)?;
    let value = g.scalar(nll);
    if !value.is_finite() {
        return Err(Error::numeric("target reward likelihood"));
    }
    let mut grads = g.backward(nll);
    Ok((value, p.grads(&mut grads)))
}

// ---- metrics ----

/// Columns of `metrics.csv`, in order.
pub const METRIC_COLUMNS: &[&str] = &[
    "step",
    "phase",
    "iteration",
    "updates",
    "source_env_steps",
    "wm_total",
    "image_loss",
    "reward_loss",
    "discount_loss",
    "kl_loss",
    "kl_raw",
    "domain_kl_loss",
    "target_reward_loss",
    "actor_loss",
    "imagined_return",
    "policy_entropy",
    "critic_total",
    "td_loss",
    "regularizer",
    "fraction_clamped",
    "eval_return",
    "eval_std",
    "alignment_kl",
    "value_estimated",
    "value_true",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Target,
    Source,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Target => "target",
            Phase::Source => "source",
            Phase::Eval => "eval",
        }
    }
}

/// Named scalars of one update or one window.
pub type Scalars = BTreeMap<&'static str, f64>;

fn update_scalars(wm: &WmLossReport, b: &BehaviorReport) -> Scalars {
    Scalars::from([
        ("wm_total", wm.total),
        ("image_loss", wm.image_loss),
        ("reward_loss", wm.reward_loss),
        ("discount_loss", wm.discount_loss),
        ("kl_loss", wm.kl_loss),
        ("kl_raw", wm.kl_raw),
        ("domain_kl_loss", wm.domain_kl_loss),
        ("actor_loss", b.actor_loss),
        ("imagined_return", b.imagined_return),
        ("policy_entropy", b.policy_entropy),
        ("critic_total", b.critic_total),
        ("td_loss", b.td_loss),
        ("regularizer", b.regularizer),
        ("fraction_clamped", b.fraction_clamped),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub iteration: usize,
    pub values: Scalars,
}

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        METRIC_COLUMNS
            .iter()
            .map(|&c| match c {
                "step" => self.step.to_string(),
                "phase" => self.phase.name().to_string(),
                "iteration" => self.iteration.to_string(),
                _ => self
                    .values
                    .get(c)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct Averager {
    sums: Scalars,
    count: usize,
}

impl Averager {
    fn add(&mut self, s: &Scalars) {
        for (k, v) in s {
            *self.sums.entry(k).or_insert(0.0) += v;
        }
        self.count += 1;
    }

    fn take(&mut self) -> Option<Scalars> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mut out: Scalars = self.sums.iter().map(|(k, v)| (*k, v / n)).collect();
        out.insert("updates", n);
        *self = Self::default();
        Some(out)
    }
}

/// Update-level metrics averaged over windows of `log_every` updates.
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    writer: Option<csv::Writer<fs::File>>,
    log_every: usize,
    window: Averager,
    window_key: Option<(Phase, usize)>,
    step: u64,
}

impl MetricsLog {
    pub fn in_memory(log_every: usize) -> Self {
        Self {
            rows: vec![],
            writer: None,
            log_every: log_every.max(1),
            window: Averager::default(),
            window_key: None,
            step: 0,
        }
    }

    pub fn create(path: &Path, log_every: usize) -> Result<Self> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(METRIC_COLUMNS)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: Some(w),
            ..Self::in_memory(log_every)
        })
    }

    /// Global update counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn record_update(
        &mut self,
        phase: Phase,
        iteration: usize,
        values: &Scalars,
    ) -> Result<()> {
        if self.window_key != Some((phase, iteration)) {
            self.flush()?;
            self.window_key = Some((phase, iteration));
        }
        self.step += 1;
        self.window.add(values);
        if self.window.count >= self.log_every {
            self.flush()?;
        }
        Ok(())
    }

    /// Writes any partial window.
    pub fn flush(&mut self) -> Result<()> {
        if let (Some((phase, iteration)), Some(values)) = (self.window_key, self.window.take()) {
            self.push(MetricsRow {
                step: self.step,
                phase,
                iteration,
                values,
            })?;
        }
        Ok(())
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.write_record(row.record())?;
            w.flush().map_err(|e| Error::io("metrics.csv", e))?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn mean_scalars(all: &[Scalars]) -> Scalars {
    let mut avg = Averager::default();
    all.iter().for_each(|s| avg.add(s));
    avg.take().unwrap_or_default()
}

// ---- source domain ----

/// Source agent with its online env and replay buffer.
pub struct SourceDomain {
    pub bundle: AgentBundle,
    pub env: Env,
    pub buffer: ReplayBuffer,
    rng: Prng,
    updates: u64,
}

impl SourceDomain {
    pub fn new(cfg: &CoWorldConfig, rng: &mut Prng) -> Result<Self> {
        let env = make_env(cfg.source_env.clone())?;
        let bundle = AgentBundle::new(
            Role::Source,
            cfg,
            frame_shape(&cfg.source_env),
            cfg.source_env.action_dim,
            rng,
        );
        Ok(Self {
            bundle,
            env,
            buffer: ReplayBuffer::online(cfg.buffer_capacity),
            rng: Prng::seed_from_u64(rng.gen()),
            updates: 0,
        })
    }

    /// Appends one episode acted by the current agent (explore mode) or at random.
    pub fn collect_episode(&mut self, random: bool) -> Result<()> {
        let seed = self.rng.gen();
        let ep = if random {
            rollout_episode(&mut self.env, &mut RandomPolicy::new(seed))?
        } else {
            let mut policy =
                AgentPolicy::new(&self.bundle.wm, &self.bundle.actor, ActMode::Explore, seed);
            rollout_episode(&mut self.env, &mut policy)?
        };
        self.buffer.append_episode(ep)
    }

    fn prefill(&mut self, episodes: usize) -> Result<()> {
        while self.buffer.num_episodes() < episodes {
            self.collect_episode(true)?;
        }
        Ok(())
    }

    /// Collects an episode every `updates_per_episode` updates.
    fn tick(&mut self, cfg: &CoWorldConfig) -> Result<()> {
        self.updates += 1;
        if self.updates % cfg.updates_per_episode as u64 == 0 {
            self.collect_episode(false)?;
        }
        Ok(())
    }
}

fn online_update(
    cfg: &CoWorldConfig,
    bundle: &mut AgentBundle,
    buffer: &ReplayBuffer,
    rng: &mut Prng,
) -> Result<Scalars> {
    let batch = buffer.sample_sequences(cfg.batch_size, cfg.seq_len, rng)?;
    let (wm, post) = bundle.wm_update(&batch, None, cfg.kl_scale, 0.0, None, rng)?;
    let b = bundle.behavior_update(cfg, &post, None, 0.0, rng)?;
    Ok(update_scalars(&wm, &b))
}

fn with_context(e: Error, context: &str) -> Error {
    match e {
        Error::Numeric { context: c } => Error::numeric(format!("{context}: {c}")),
        other => other,
    }
}

/// Online single-domain training in the source env: random prefill, then
/// `pretrain_steps` updates with an agent episode every `updates_per_episode`.
/// No domain KL and no value regulariser.
pub fn pretrain_source(
    cfg: &CoWorldConfig,
    source: &mut SourceDomain,
    log: &mut MetricsLog,
    rng: &mut Prng,
) -> Result<()> {
    source.prefill(cfg.prefill_episodes.max(1))?;
    for step in 0..cfg.pretrain_steps {
        let mut s = online_update(cfg, &mut source.bundle, &source.buffer, rng)
            .map_err(|e| with_context(e, &format!("pretrain update {step}")))?;
        source.tick(cfg)?;
        s.insert("source_env_steps", source.env.total_steps() as f64);
        log.record_update(Phase::Pretrain, 0, &s)?;
    }
    log.flush()
}

/// `target_steps` offline updates of the target agent. `source` (frozen)
/// supplies the alignment encoder and the critic cap; it is required
/// whenever the effective `β₂` or `α` is positive.
pub fn train_target_iteration(
    cfg: &CoWorldConfig,
    target: &mut AgentBundle,
    source: Option<&AgentBundle>,
    offline: &ReplayBuffer,
    iteration: usize,
    log: &mut MetricsLog,
    rng: &mut Prng,
) -> Result<Scalars> {
    let beta_domain = cfg.effective_domain_kl_scale();
    let alpha = cfg.effective_value_reg_scale();
    if source.is_none() && (beta_domain > 0.0 || alpha > 0.0) {
        return Err(Error::config(
            "ablation",
            "domain alignment and value regularisation need a source agent",
        ));
    }
    let before = source.map(AgentBundle::fingerprint);
    let mut all = Vec::with_capacity(cfg.target_steps);
    for step in 0..cfg.target_steps {
        let run = |target: &mut AgentBundle, rng: &mut Prng| -> Result<Scalars> {
            let batch = offline.sample_sequences(cfg.batch_size, cfg.seq_len, rng)?;
            let (wm, post) = target.wm_update(
                &batch,
                source.map(|s| &s.wm),
                cfg.kl_scale,
                beta_domain,
                None,
                rng,
            )?;
            let b = target.behavior_update(cfg, &post, source.map(|s| &s.critic), alpha, rng)?;
            Ok(update_scalars(&wm, &b))
        };
        let s = run(target, rng)
            .map_err(|e| with_context(e, &format!("target iteration {iteration} update {step}")))?;
        log.record_update(Phase::Target, iteration, &s)?;
        all.push(s);
    }
    log.flush()?;
    if before != source.map(AgentBundle::fingerprint) {
        return Err(Error::Usage(
            "target iteration modified source parameters".into(),
        ));
    }
    Ok(mean_scalars(&all))
}

/// `source_steps` online updates of the source agent. Each update fits the
/// source dynamics on a source batch and the reward head additionally on an
/// offline target batch with relabelled rewards.
pub fn train_source_iteration(
    cfg: &CoWorldConfig,
    source: &mut SourceDomain,
    target: Option<&AgentBundle>,
    offline: &ReplayBuffer,
    iteration: usize,
    log: &mut MetricsLog,
    rng: &mut Prng,
) -> Result<Scalars> {
    let before = target.map(AgentBundle::fingerprint);
    let mut all = Vec::with_capacity(cfg.source_steps);
    for step in 0..cfg.source_steps {
        let run = |source: &mut SourceDomain, rng: &mut Prng| -> Result<Scalars> {
            let sb = source
                .buffer
                .sample_sequences(cfg.batch_size, cfg.seq_len, rng)?;
            let tb = offline.sample_sequences(cfg.batch_size, cfg.seq_len, rng)?;
            let (t_nll, t_grads) = target_reward_loss(&source.bundle.wm, &tb, cfg.reward_mix, rng)?;
            let (wm, post) =
                source
                    .bundle
                    .wm_update(&sb, None, cfg.kl_scale, 0.0, Some(&t_grads), rng)?;
            let b = source.bundle.behavior_update(cfg, &post, None, 0.0, rng)?;
            let mut s = update_scalars(&wm, &b);
            s.insert("target_reward_loss", t_nll);
            Ok(s)
        };
        let mut s = run(source, rng)
            .map_err(|e| with_context(e, &format!("source iteration {iteration} update {step}")))?;
        source.tick(cfg)?;
        s.insert("source_env_steps", source.env.total_steps() as f64);
        log.record_update(Phase::Source, iteration, &s)?;
        all.push(s);
    }
    log.flush()?;
    if before != target.map(AgentBundle::fingerprint) {
        return Err(Error::Usage(
            "source iteration modified target parameters".into(),
        ));
    }
    Ok(mean_scalars(&all))
}

// ---- full pipeline ----

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Offset added to the run seed for evaluation episodes.
pub const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

/// Rollout length of the value-estimation diagnostic run at each evaluation.
pub const VALUE_DIAGNOSTIC_STEPS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub alignment_kl: Option<f64>,
    pub value: ValueDiagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub config_hash: String,
    pub ablation: Ablation,
    pub effective_domain_kl_scale: f64,
    pub effective_value_reg_scale: f64,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub dataset_fingerprint: String,
    pub metric_columns: Vec<String>,
    pub total_updates: u64,
    pub source_env_steps: u64,
    /// Target-env steps taken outside evaluation; the offline contract keeps it 0.
    pub target_env_steps_in_training: u64,
    /// Stage-isolation fingerprint comparisons that passed.
    pub isolation_checks: usize,
    pub evaluations: Vec<EvalRecord>,
    pub checkpoints: Vec<String>,
}

/// Output of [`coworld_train`]; the bundles are returned for inspection.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub target: AgentBundle,
    pub source: Option<AgentBundle>,
}

/// Counts target-domain env steps taken by training code.
struct OfflineProbe<'a> {
    target: &'a EnvSpec,
    same_domain: bool,
    leaked: u64,
}

impl<'a> OfflineProbe<'a> {
    fn new(cfg: &'a CoWorldConfig) -> Self {
        let strip = |s: &EnvSpec| EnvSpec {
            seed: 0,
            ..s.clone()
        };
        Self {
            target: &cfg.target_env,
            same_domain: strip(&cfg.source_env) == strip(&cfg.target_env),
            leaked: 0,
        }
    }

    fn mark(&self) -> u64 {
        domain_steps_on_thread(self.target)
    }

    /// `source_steps` are discounted when both envs share a domain.
    fn settle(&mut self, mark: u64, source_steps: u64) {
        let mut delta = domain_steps_on_thread(self.target) - mark;
        if self.same_domain {
            delta -= source_steps.min(delta);
        }
        self.leaked += delta;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn rng_stream(seed: u64, stream: u64) -> Prng {
    let mut r = Prng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs the whole pipeline against the offline dataset in `dataset_dir`,
/// writing `config.json`, `metrics.csv`, `checkpoints/` and `manifest.json`
/// into `run_dir`. `offline_baseline` skips the source agent entirely.
pub fn coworld_train(cfg: &CoWorldConfig, dataset_dir: &Path, run_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    if !dataset_dir.is_dir() {
        return Err(Error::config(
            "dataset_dir",
            format!("{} is not a directory", dataset_dir.display()),
        ));
    }
    let (_, offline) = load_dataset(dataset_dir)?;
    let fs_target = frame_shape(&cfg.target_env);
    if let Some(ep) = offline.episodes().next() {
        if ep.frame_shape() != fs_target || ep.action_dim() != cfg.target_env.action_dim {
            return Err(Error::config(
                "target_env",
                format!(
                    "dataset frames {:?} / actions {} do not match the target env",
                    ep.frame_shape(),
                    ep.action_dim()
                ),
            ));
        }
    }
    if cfg.outer_iterations > 0
        && offline
            .sample_sequences(1, cfg.seq_len, &mut Prng::seed_from_u64(0))
            .is_err()
    {
        return Err(Error::EmptyData(format!(
            "dataset has no episode with {} steps",
            cfg.seq_len
        )));
    }
    if cfg.ablation != Ablation::OfflineBaseline && frame_shape(&cfg.source_env) != fs_target {
        return Err(Error::config(
            "source_env",
            "source and target frames differ in shape",
        ));
    }
    let dataset_fingerprint = offline.fingerprint();

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_json_pretty())
        .map_err(|e| Error::io(run_dir.join(CONFIG_FILE), e))?;
    let mut log = MetricsLog::create(&run_dir.join(METRICS_FILE), cfg.log_every)?;

    let mut init_rng = rng_stream(cfg.seed, 1);
    let mut source_rng = rng_stream(cfg.seed, 2);
    let mut target_rng = rng_stream(cfg.seed, 3);
    let mut probe = OfflineProbe::new(cfg);
    let mut checkpoints = vec![];
    let mut isolation_checks = 0;
    let mut last_good = String::from("none");
    let save =
        |b: &AgentBundle, name: String, list: &mut Vec<String>, last: &mut String| -> Result<()> {
            b.save(cfg, &ckpt_dir.join(&name))?;
            *last = format!("{CHECKPOINT_DIR}/{name}");
            list.push(last.clone());
            Ok(())
        };
    let abort = |e: Error, last: &str| match e {
        Error::Numeric { context } => {
            Error::numeric(format!("{context} (last good checkpoint: {last})"))
        }
        other => other,
    };

    let mut source = if cfg.ablation == Ablation::OfflineBaseline {
        None
    } else {
        let mut src = SourceDomain::new(cfg, &mut init_rng)?;
        let mark = probe.mark();
        pretrain_source(cfg, &mut src, &mut log, &mut source_rng)
            .map_err(|e| abort(e, &last_good))?;
        probe.settle(mark, src.env.total_steps());
        save(
            &src.bundle,
            "source_pretrained.cwck".into(),
            &mut checkpoints,
            &mut last_good,
        )?;
        Some(src)
    };
    let mut target = AgentBundle::new(
        Role::Target,
        cfg,
        fs_target,
        cfg.target_env.action_dim,
        &mut init_rng,
    );
    let mut evaluations = vec![];

    for it in 0..cfg.outer_iterations {
        let mark = probe.mark();
        let frozen = source.as_ref().map(|s| &s.bundle);
        train_target_iteration(
            cfg,
            &mut target,
            frozen,
            &offline,
            it,
            &mut log,
            &mut target_rng,
        )
        .map_err(|e| abort(e, &last_good))?;
        probe.settle(mark, 0);
        if source.is_some() {
            isolation_checks += 1;
        }
        save(
            &target,
            format!("target_iter{it:03}.cwck"),
            &mut checkpoints,
            &mut last_good,
        )?;
        if let Some(src) = source.as_mut() {
            let (mark, s0) = (probe.mark(), src.env.total_steps());
            train_source_iteration(
                cfg,
                src,
                Some(&target),
                &offline,
                it,
                &mut log,
                &mut source_rng,
            )
            .map_err(|e| abort(e, &last_good))?;
            probe.settle(mark, src.env.total_steps() - s0);
            isolation_checks += 1;
            save(
                &src.bundle,
                format!("source_iter{it:03}.cwck"),
                &mut checkpoints,
                &mut last_good,
            )?;
        }
        if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            let report = evaluate_agent(
                &cfg.target_env,
                &target.wm,
                &target.actor,
                cfg.eval_episodes,
                cfg.seed ^ EVAL_SEED_OFFSET,
            )?;
            let alignment_kl = match &source {
                Some(src) => {
                    let batch = offline.sample_sequences(
                        cfg.batch_size,
                        cfg.seq_len,
                        &mut rng_stream(cfg.seed, 4),
                    )?;
                    Some(alignment_divergence(
                        &src.bundle.wm,
                        &target.wm,
                        &batch.time_major_obs(),
                    )?)
                }
                None => None,
            };
            let value = value_diagnostic(
                &cfg.target_env,
                &target.wm,
                &target.actor,
                &target.critic,
                VALUE_DIAGNOSTIC_STEPS,
                cfg.discount,
                cfg.seed ^ EVAL_SEED_OFFSET,
            )?;
            let mut values = Scalars::from([
                ("eval_return", report.mean_return),
                ("eval_std", report.std_return),
                ("value_estimated", value.estimated_value),
                ("value_true", value.true_value),
            ]);
            if let Some(a) = alignment_kl {
                values.insert("alignment_kl", a);
            }
            log.push(MetricsRow {
                step: log.step(),
                phase: Phase::Eval,
                iteration: it,
                values,
            })?;
            evaluations.push(EvalRecord {
                iteration: it,
                mean_return: report.mean_return,
                std_return: report.std_return,
                alignment_kl,
                value,
            });
        }
    }
    if probe.leaked > 0 {
        return Err(Error::Usage(format!(
            "target env stepped {} times during training",
            probe.leaked
        )));
    }
    if offline.fingerprint() != dataset_fingerprint {
        return Err(Error::Usage(
            "offline buffer changed during training".into(),
        ));
    }
    let manifest = RunManifest {
        schema: crate::config::SCHEMA_VERSION,
        config_hash: cfg.hash(),
        ablation: cfg.ablation,
        effective_domain_kl_scale: cfg.effective_domain_kl_scale(),
        effective_value_reg_scale: cfg.effective_value_reg_scale(),
        seed: cfg.seed,
        dataset_dir: dataset_dir.to_path_buf(),
        dataset_fingerprint,
        metric_columns: METRIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
        total_updates: log.step(),
        source_env_steps: source.as_ref().map(|s| s.env.total_steps()).unwrap_or(0),
        target_env_steps_in_training: probe.leaked,
        isolation_checks,
        evaluations,
        checkpoints,
    };
    write_json(&run_dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(RunOutput {
        manifest,
        target,
        source: source.map(|s| s.bundle),
    })
}

// ---- medium-replay dataset ----

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayGenOptions {
    /// Hard cap on environment steps; no episode is started past it.
    pub budget_steps: usize,
    /// Evaluate after every this many collected env steps.
    pub eval_every_steps: usize,
    pub eval_episodes: usize,
    /// Episodes of the scripted controller used to estimate the max score.
    pub oracle_episodes: usize,
    pub seed: u64,
}

impl Default for ReplayGenOptions {
    fn default() -> Self {
        Self {
            budget_steps: 100_000,
            eval_every_steps: 2000,
            eval_episodes: 10,
            oracle_episodes: 10,
            seed: 0,
        }
    }
}

/// Trains a single-domain agent online in `env_spec` and writes every episode
/// it collects to `out_dir`, stopping once an evaluation mean reaches a third
/// of the scripted controller's score, or when the step budget is spent.
/// Agent hyper-parameters come from `agent`.
pub fn generate_medium_replay(
    agent: &CoWorldConfig,
    env_spec: &EnvSpec,
    out_dir: &Path,
    opts: &ReplayGenOptions,
) -> Result<DatasetManifest> {
    env_spec.validate()?;
    agent.model.validate()?;
    let eval_seed = opts.seed ^ EVAL_SEED_OFFSET;
    let oracle = evaluate_policy(
        env_spec,
        &mut ScriptedPolicy,
        opts.oracle_episodes.max(1),
        eval_seed,
    )?;
    let max_score = oracle.mean_return;
    let threshold = max_score / 3.0;

    let mut writer = DatasetWriter::create(out_dir)?;
    let mut rng = rng_stream(opts.seed, 1);
    let mut env = make_env(EnvSpec {
        seed: rng.gen(),
        ..env_spec.clone()
    })?;
    let mut bundle = AgentBundle::new(
        Role::Source,
        agent,
        frame_shape(env_spec),
        env_spec.action_dim,
        &mut rng,
    );
    let mut buffer = ReplayBuffer::online(agent.buffer_capacity);
    let mut eval_history = vec![];
    let mut achieved = None;
    let mut total_steps = 0usize;
    let mut next_eval = opts.eval_every_steps.max(1);
    let mut episodes = 0usize;
    while total_steps + env_spec.episode_limit <= opts.budget_steps {
        let seed = rng.gen();
        let ep = if episodes < agent.prefill_episodes {
            rollout_episode(&mut env, &mut RandomPolicy::new(seed))?
        } else {
            let mut policy = AgentPolicy::new(&bundle.wm, &bundle.actor, ActMode::Explore, seed);
            rollout_episode(&mut env, &mut policy)?
        };
        episodes += 1;
        total_steps += ep.len();
        writer.write(&ep)?;
        buffer.append_episode(ep)?;
        if episodes >= agent.prefill_episodes {
            for k in 0..agent.updates_per_episode {
                online_update(agent, &mut bundle, &buffer, &mut rng).map_err(|e| {
                    with_context(
                        e,
                        &format!("replay generation episode {episodes} update {k}"),
                    )
                })?;
            }
        }
        if total_steps >= next_eval {
            next_eval = total_steps + opts.eval_every_steps.max(1);
            let report = evaluate_agent(
                env_spec,
                &bundle.wm,
                &bundle.actor,
                opts.eval_episodes,
                eval_seed,
            )?;
            eval_history.push(EvalPoint {
                env_steps: total_steps,
                mean_return: report.mean_return,
            });
            log::info!("replay generation: {total_steps} steps, eval mean {:.2} / threshold {threshold:.2}", report.mean_return);
            if report.mean_return >= threshold {
                achieved = Some(report.mean_return);
                break;
            }
        }
    }
    let manifest = DatasetManifest {
        schema: crate::config::SCHEMA_VERSION,
        env_spec: env_spec.clone(),
        seed: opts.seed,
        budget_steps: opts.budget_steps,
        max_score,
        max_score_returns: oracle.per_episode_returns,
        threshold,
        achieved_score: achieved,
        budget_capped: achieved.is_none(),
        eval_history,
        total_steps,
        episodes: writer.into_records(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
