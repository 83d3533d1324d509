//! Policy evaluation and model diagnostics.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::behavior::{act, ActMode, Actor, AgentCarry, Critic};
use crate::datastore::{normalize_pixel, Episode, EpisodeBuilder};
use crate::envgrid::{make_env, Env, EnvSpec, Observation};
use crate::error::{Error, Result};
use crate::worldmodel::{categorical_kl_rows, Draw, WorldModel};
use crate::Prng;

/// Anything that picks actions in a runner env.
pub trait Policy {
    /// Called at the start of every episode.
    fn reset(&mut self);
    /// `env` is exposed for privileged (scripted) controllers.
    fn act(&mut self, env: &Env, obs: &Observation) -> Result<Vec<f64>>;
}

/// Straight-to-goal controller with access to the hidden state.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn reset(&mut self) {}

    fn act(&mut self, env: &Env, _obs: &Observation) -> Result<Vec<f64>> {
        Ok(env.scripted_action())
    }
}

/// Uniform actions in `[-1, 1]^A`.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub rng: Prng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Prng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self) {}

    fn act(&mut self, env: &Env, _obs: &Observation) -> Result<Vec<f64>> {
        Ok((0..env.spec().action_dim)
            .map(|_| self.rng.gen_range(-1.0..=1.0))
            .collect())
    }
}

/// Learned agent acting from pixels through its world model.
pub struct AgentPolicy<'a> {
    pub wm: &'a WorldModel,
    pub actor: &'a Actor,
    pub mode: ActMode,
    pub rng: Prng,
    carry: AgentCarry,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(wm: &'a WorldModel, actor: &'a Actor, mode: ActMode, seed: u64) -> Self {
        Self {
            wm,
            actor,
            mode,
            rng: Prng::seed_from_u64(seed),
            carry: AgentCarry::new(wm),
        }
    }

    pub fn carry(&self) -> &AgentCarry {
        &self.carry
    }
}

impl Policy for AgentPolicy<'_> {
    fn reset(&mut self) {
        self.carry = AgentCarry::new(self.wm);
    }

    fn act(&mut self, _env: &Env, obs: &Observation) -> Result<Vec<f64>> {
        let (a, carry) = act(
            self.actor,
            self.wm,
            &self.carry,
            obs,
            self.mode,
            &mut self.rng,
        )?;
        self.carry = carry;
        Ok(a)
    }
}

/// Runs one full episode from `env.reset()` and records it.
pub fn rollout_episode(env: &mut Env, policy: &mut dyn Policy) -> Result<Episode> {
    let obs = env.reset();
    run_from(env, policy, obs)
}

fn run_from(env: &mut Env, policy: &mut dyn Policy, mut obs: Observation) -> Result<Episode> {
    policy.reset();
    let mut builder =
        EpisodeBuilder::new(&obs.pixels, env.spec().action_dim, Some(env.episode_seed()));
    loop {
        let action = policy.act(env, &obs)?;
        let step = env.step(&action)?;
        builder.push(
            &action,
            step.reward,
            step.discount_flag,
            &step.observation.pixels,
        );
        let last = step.is_last();
        obs = step.observation;
        if last {
            return Ok(builder.finish());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub per_episode_returns: Vec<f64>,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len();
        if n == 0 {
            return Self {
                episodes: 0,
                mean_return: 0.0,
                std_return: 0.0,
                per_episode_returns: returns,
            };
        }
        // shifted by the first return so identical returns give exactly zero spread
        let shift = returns[0];
        let mean_d = returns.iter().map(|r| r - shift).sum::<f64>() / n as f64;
        let var = returns
            .iter()
            .map(|r| (r - shift - mean_d).powi(2))
            .sum::<f64>()
            / n as f64;
        Self {
            episodes: n,
            mean_return: shift + mean_d,
            std_return: var.sqrt(),
            per_episode_returns: returns,
        }
    }
}

/// Episode seeds used by [`evaluate_policy`].
pub fn eval_episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = Prng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Returns over episodes started from the given seeds.
pub fn evaluate_policy_on_seeds(
    spec: &EnvSpec,
    policy: &mut dyn Policy,
    seeds: &[u64],
) -> Result<EvalReport> {
    let mut env = make_env(spec.clone())?;
    let mut returns = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let obs = env.reset_with_seed(s);
        returns.push(run_from(&mut env, policy, obs)?.total_reward());
    }
    Ok(EvalReport::from_returns(returns))
}

/// Summed rewards per episode over `episodes` seeded episodes.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &mut dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_policy_on_seeds(spec, policy, &eval_episode_seeds(seed, episodes))
}

/// Eval-mode returns of a learned agent.
pub fn evaluate_agent(
    spec: &EnvSpec,
    wm: &WorldModel,
    actor: &Actor,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut policy = AgentPolicy::new(wm, actor, ActMode::Eval, seed);
    evaluate_policy(spec, &mut policy, episodes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDiagnostic {
    pub horizon: usize,
    pub discount: f64,
    /// `Σ γ^t r_t` of the executed rewards.
    pub true_value: f64,
    /// `Σ v(z_t)` over the visited latent states.
    pub estimated_value: f64,
    pub gap: f64,
}

impl ValueDiagnostic {
    pub fn new(horizon: usize, discount: f64, true_value: f64, estimated_value: f64) -> Self {
        Self {
            horizon,
            discount,
            true_value,
            estimated_value,
            gap: estimated_value - true_value,
        }
    }
}

/// `Σ_t γ^t r_t`.
pub fn discounted_sum(rewards: &[f64], discount: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + discount * acc)
}

/// Rolls the eval-mode agent for `horizon` steps (the episode limit is raised
/// to at least `horizon`) and compares the critic's cumulative estimate with
/// the discounted return actually obtained.
pub fn value_diagnostic(
    spec: &EnvSpec,
    wm: &WorldModel,
    actor: &Actor,
    critic: &Critic,
    horizon: usize,
    discount: f64,
    seed: u64,
) -> Result<ValueDiagnostic> {
    let spec = EnvSpec {
        episode_limit: spec.episode_limit.max(horizon).max(1),
        ..spec.clone()
    };
    let mut env = make_env(spec)?;
    let mut obs = env.reset_with_seed(eval_episode_seeds(seed, 1)[0]);
    let mut policy = AgentPolicy::new(wm, actor, ActMode::Eval, seed);
    let mut rewards = Vec::with_capacity(horizon);
    let mut feats = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let action = policy.act(&env, &obs)?;
        feats.push(policy.carry().state.feat());
        let step = env.step(&action)?;
        rewards.push(step.reward);
        obs = step.observation;
    }
    let estimated = if feats.is_empty() {
        0.0
    } else {
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        critic
            .values(&ndarray::concatenate(Axis(0), &views).expect("feature widths agree"))
            .sum()
    };
    Ok(ValueDiagnostic::new(
        horizon,
        discount,
        discounted_sum(&rewards, discount),
        estimated,
    ))
}

/// Max-normalised `(estimated, true)` pairs across models compared together.
pub fn rescale_diagnostics(diags: &[ValueDiagnostic]) -> Vec<(f64, f64)> {
    let scale = diags
        .iter()
        .flat_map(|d| [d.estimated_value.abs(), d.true_value.abs()])
        .fold(0.0, f64::max);
    let s = if scale > 0.0 { scale } else { 1.0 };
    diags
        .iter()
        .map(|d| (d.estimated_value / s, d.true_value / s))
        .collect()
}

/// Mean over rows and groups of `KL[softmax(e_src(o)) ‖ softmax(e_tgt(o))]`.
pub fn alignment_divergence(
    source: &WorldModel,
    target: &WorldModel,
    obs: &Array2<f64>,
) -> Result<f64> {
    if obs.nrows() == 0 {
        return Err(Error::EmptyData("alignment batch".into()));
    }
    let p = source.encode_values(obs)?;
    let q = target.encode_values(obs)?;
    let k = source.classes();
    let groups = p.ncols() / k;
    let kl = categorical_kl_rows(&p, &q, k);
    Ok(kl.iter().sum::<f64>() / (kl.len() * groups) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPrediction {
    /// Decoded frames in normalised pixel units, one `[H, W, C]` per step.
    pub frames: Vec<ndarray::Array3<f64>>,
    /// Per-step mean squared error against the recorded frames.
    pub mse: Vec<f64>,
}

impl OpenLoopPrediction {
    pub fn mean_mse(&self) -> f64 {
        if self.mse.is_empty() {
            0.0
        } else {
            self.mse.iter().sum::<f64>() / self.mse.len() as f64
        }
    }
}

/// Filters the first `context` steps of `episode`, then imagines `horizon`
/// steps with the recorded actions and decodes every predicted frame.
/// Latents take the mode so the prediction is deterministic.
pub fn open_loop_prediction(
    wm: &WorldModel,
    episode: &Episode,
    context: usize,
    horizon: usize,
) -> Result<OpenLoopPrediction> {
    if context < 1 {
        return Err(Error::config("context", "must be >= 1"));
    }
    if episode.num_steps() < context + horizon {
        return Err(Error::Shape(format!(
            "episode has {} steps, need context {context} + horizon {horizon}",
            episode.num_steps()
        )));
    }
    let frame = |i: usize| -> Array2<f64> {
        let f = episode
            .observations
            .index_axis(Axis(0), i)
            .mapv(normalize_pixel);
        let n = f.len();
        f.into_shape_with_order((1, n)).expect("contiguous frame")
    };
    let action = |i: usize| -> Array2<f64> {
        if i == 0 {
            Array2::zeros((1, episode.action_dim()))
        } else {
            episode.actions.slice(ndarray::s![i - 1..i, ..]).to_owned()
        }
    };
    let mut state = wm.initial_state(1);
    for i in 0..context {
        state = wm
            .observe_values(&state, &action(i), &frame(i), &[i == 0], &mut Draw::Mode)?
            .0;
    }
    let (h, w, c) = wm.frame_shape;
    let mut out = OpenLoopPrediction {
        frames: Vec::with_capacity(horizon),
        mse: Vec::with_capacity(horizon),
    };
    for i in context..context + horizon {
        state = wm.imagine_values(&state, &action(i), &mut Draw::Mode)?;
        let (img, _, _) = wm.heads_values(&state);
        let truth = frame(i);
        out.mse
            .push((&img - &truth).mapv(|d| d * d).mean().unwrap_or(0.0));
        out.frames.push(
            img.into_shape_with_order((h, w, c))
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small(seed: u64) -> EnvSpec {
        EnvSpec {
            image_size: 8,
            episode_limit: 30,
            ..EnvSpec::downhill(seed)
        }
    }

    #[test]
    fn single_episode_report() {
        let r = evaluate_policy(&small(0), &mut ScriptedPolicy, 1, 3).unwrap();
        assert_eq!(r.episodes, 1);
        assert_eq!(r.std_return, 0.0);
        assert_eq!(r.mean_return, r.per_episode_returns[0]);
    }

    #[test]
    fn identical_seeds_give_zero_spread() {
        let r = evaluate_policy_on_seeds(&small(0), &mut ScriptedPolicy, &[5, 5, 5]).unwrap();
        assert_eq!(r.std_return, 0.0);
    }

    #[test]
    fn discounted_sum_matches_loop() {
        let r = [1.0, 0.5, -2.0, 0.25];
        let g: f64 = 0.9;
        let direct: f64 = r
            .iter()
            .enumerate()
            .map(|(t, x)| g.powi(t as i32) * x)
            .sum();
        assert!((discounted_sum(&r, g) - direct).abs() < 1e-15);
    }

    #[test]
    fn constant_critic_sums_to_c_times_horizon() {
        let mc = ModelConfig {
            deter: 5,
            groups: 2,
            classes: 3,
            hidden: 6,
            ..ModelConfig::default()
        };
        let mut rng = Prng::seed_from_u64(0);
        let wm = WorldModel::new(&mc, (8, 8, 3), 2, &mut rng);
        let actor = Actor::new(mc.feat(), 6, 2, 0.1, &mut rng);
        let mut critic = Critic::new(mc.feat(), 6, &mut rng);
        critic.set_constant(0.75);
        let d = value_diagnostic(&small(1), &wm, &actor, &critic, 40, 0.995, 2).unwrap();
        assert!((d.estimated_value - 30.0).abs() < 1e-9);
        assert_eq!(d.horizon, 40);
        let scaled = rescale_diagnostics(&[d]);
        assert!(scaled[0].0.abs() <= 1.0 && scaled[0].1.abs() <= 1.0);
    }

    #[test]
    fn open_loop_shapes_and_errors() {
        let mc = ModelConfig {
            deter: 5,
            groups: 2,
            classes: 3,
            hidden: 6,
            ..ModelConfig::default()
        };
        let mut rng = Prng::seed_from_u64(0);
        let wm = WorldModel::new(&mc, (8, 8, 3), 2, &mut rng);
        let mut env = make_env(small(2)).unwrap();
        let ep = rollout_episode(&mut env, &mut RandomPolicy::new(1)).unwrap();
        assert_eq!(ep.num_steps(), 31);
        let p = open_loop_prediction(&wm, &ep, 5, 10).unwrap();
        assert_eq!(p.mse.len(), 10);
        assert_eq!(p.frames[0].dim(), (8, 8, 3));
        assert!(open_loop_prediction(&wm, &ep, 5, 0).unwrap().mse.is_empty());
        assert!(open_loop_prediction(&wm, &ep, 31, 0).is_ok());
        assert!(open_loop_prediction(&wm, &ep, 5, 27).is_err());
    }

    #[test]
    fn self_alignment_is_zero() {
        let mc = ModelConfig {
            deter: 5,
            groups: 2,
            classes: 3,
            hidden: 6,
            ..ModelConfig::default()
        };
        let mut rng = Prng::seed_from_u64(0);
        let a = WorldModel::new(&mc, (2, 2, 3), 2, &mut rng);
        let b = WorldModel::new(&mc, (2, 2, 3), 2, &mut rng);
        let obs = Array2::from_shape_fn((4, 12), |(i, j)| ((i * 12 + j) as f64 * 0.37).sin() * 0.5);
        assert_eq!(alignment_divergence(&a, &a, &obs).unwrap(), 0.0);
        assert!(alignment_divergence(&a, &b, &obs).unwrap() > 0.0);
    }
}
