//! Procedurally rendered point-mass "runner" environments.
//!
//! A runner is a 2-D point mass in the arena `[-1, 1]²` that must reach a goal.
//! The agent only sees rendered RGB frames. Source/target pairs differ by
//! terrain slope (a constant drift along −x), masked actuators and background
//! tint.
//!
//! Dynamics per step, with `a` clipped to `[-1, 1]` and masked:
//!
//! ```text
//! v ← clip(v + ACCEL·a − (slope, 0)·GRAVITY − FRICTION·v, ±MAX_SPEED)
//! p ← clip(p + v, ±1)
//! r = clamp(1 − ‖p − goal‖ / REWARD_RADIUS, 0, 1)
//! ```
//!
//! The time limit ends the episode with a zero discount flag.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARENA: f64 = 1.0;
pub const ACCEL: f64 = 0.04;
pub const GRAVITY: f64 = 0.1;
pub const FRICTION: f64 = 0.2;
pub const MAX_SPEED: f64 = 0.15;
/// Distance at which the dense reward reaches zero.
pub const REWARD_RADIUS: f64 = 1.0;
/// Goals are drawn from `[-GOAL_SPAN, GOAL_SPAN]²`.
pub const GOAL_SPAN: f64 = 0.6;
/// Start positions are drawn from `[-START_SPAN, START_SPAN]²`.
pub const START_SPAN: f64 = 0.9;

const BACKGROUND: [i16; 3] = [40, 40, 40];
const GOAL_COLOR: [u8; 3] = [40, 200, 60];
const AGENT_COLOR: [u8; 3] = [235, 70, 60];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    #[default]
    Runner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub family: EnvFamily,
    pub image_size: usize,
    pub channels: usize,
    /// Constant drift along −x; positive values play the role of a downhill.
    pub slope: f64,
    /// Action components forced to zero.
    pub masked_action_dims: BTreeSet<usize>,
    /// RGB offset added to the background colour.
    pub tint: [i16; 3],
    pub episode_limit: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            family: EnvFamily::Runner,
            image_size: 32,
            channels: 3,
            slope: 0.0,
            masked_action_dims: BTreeSet::new(),
            tint: [0, 0, 0],
            episode_limit: 200,
            action_dim: 2,
            seed: 0,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(
                "image_size",
                format!("{} < 8", self.image_size),
            ));
        }
        if self.channels != 3 {
            return Err(Error::config("channels", "runner renders RGB (3 channels)"));
        }
        if self.action_dim != 2 {
            return Err(Error::config("action_dim", "runner actions are 2-D"));
        }
        if !self.slope.is_finite() || self.slope.abs() > 0.5 {
            return Err(Error::config("slope", format!("|{}| > 0.5", self.slope)));
        }
        if let Some(d) = self
            .masked_action_dims
            .iter()
            .find(|&&d| d >= self.action_dim)
        {
            return Err(Error::config(
                "masked_action_dims",
                format!("index {d} >= action_dim"),
            ));
        }
        if self.episode_limit < 1 {
            return Err(Error::config("episode_limit", "must be >= 1"));
        }
        Ok(())
    }

    /// Flat, untinted source runner.
    pub fn source(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Runner with terrain drift and a background tint.
    pub fn downhill(seed: u64) -> Self {
        Self {
            seed,
            slope: 0.1,
            tint: [0, 10, 60],
            ..Self::default()
        }
    }

    /// Runner whose second actuator is disconnected.
    pub fn masked(seed: u64) -> Self {
        Self {
            seed,
            masked_action_dims: BTreeSet::from([1]),
            tint: [50, 0, 0],
            ..Self::default()
        }
    }

    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Applies the actuator mask and the `[-1, 1]` clip.
    pub fn mask_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                if self.masked_action_dims.contains(&i) {
                    0.0
                } else {
                    a.clamp(-1.0, 1.0)
                }
            })
            .collect()
    }
}

/// Rendered frame, `[H, W, C]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub pixels: Array3<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub distance: f64,
    pub state: HiddenState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// 1 while the episode continues, 0 at its end.
    pub discount_flag: f64,
    pub info: StepInfo,
}

impl StepResult {
    pub fn is_last(&self) -> bool {
        self.discount_flag == 0.0
    }
}

pub fn reward_at(pos: [f64; 2], goal: [f64; 2]) -> f64 {
    let d = ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt();
    (1.0 - d / REWARD_RADIUS).clamp(0.0, 1.0)
}

/// One application of the runner dynamics to an already-masked action.
pub fn advance(state: &HiddenState, action: &[f64], slope: f64) -> HiddenState {
    let mut next = *state;
    for i in 0..2 {
        let drift = if i == 0 { slope * GRAVITY } else { 0.0 };
        let v = state.vel[i] + ACCEL * action[i] - drift - FRICTION * state.vel[i];
        next.vel[i] = v.clamp(-MAX_SPEED, MAX_SPEED);
        next.pos[i] = (state.pos[i] + next.vel[i]).clamp(-ARENA, ARENA);
    }
    next
}

/// Pure rendering of a hidden state.
pub fn render(spec: &EnvSpec, state: &HiddenState) -> Observation {
    let n = spec.image_size;
    let mut pixels = Array3::<u8>::zeros((n, n, 3));
    for c in 0..3 {
        let v = (BACKGROUND[c] + spec.tint[c]).clamp(0, 255) as u8;
        pixels.slice_mut(ndarray::s![.., .., c]).fill(v);
    }
    let radius = (n / 4).max(1) as i64;
    let to_px = |p: [f64; 2]| {
        let col = ((p[0] + ARENA) / (2.0 * ARENA) * (n - 1) as f64).round() as i64;
        let row = ((ARENA - p[1]) / (2.0 * ARENA) * (n - 1) as f64).round() as i64;
        (row, col)
    };
    let mut blit = |centre: (i64, i64), colour: [u8; 3], round: bool| {
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if round && dr * dr + dc * dc > radius * radius {
                    continue;
                }
                let (r, c) = (centre.0 + dr, centre.1 + dc);
                if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
                    for ch in 0..3 {
                        pixels[[r as usize, c as usize, ch]] = colour[ch];
                    }
                }
            }
        }
    };
    blit(to_px(state.goal), GOAL_COLOR, false);
    blit(to_px(state.pos), AGENT_COLOR, true);
    Observation { pixels }
}

/// A runner instance. Single-threaded; independent handles share nothing.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    seeds: ChaCha8Rng,
    state: Option<HiddenState>,
    steps: usize,
    done: bool,
    episode_seed: u64,
    total_steps: u64,
    domain_key: String,
}

thread_local! {
    static STEPS_BY_DOMAIN: RefCell<HashMap<String, u64>> = RefCell::new(HashMap::new());
}

fn domain_key(spec: &EnvSpec) -> String {
    let mut s = spec.clone();
    s.seed = 0;
    serde_json::to_string(&s).expect("spec serialises")
}

/// Steps taken on the current thread by any env of `spec`'s domain (seed ignored).
pub fn domain_steps_on_thread(spec: &EnvSpec) -> u64 {
    let key = domain_key(spec);
    STEPS_BY_DOMAIN.with(|m| m.borrow().get(&key).copied().unwrap_or(0))
}

pub fn make_env(spec: EnvSpec) -> Result<Env> {
    spec.validate()?;
    let seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let domain_key = domain_key(&spec);
    Ok(Env {
        spec,
        seeds,
        state: None,
        steps: 0,
        done: false,
        episode_seed: 0,
        total_steps: 0,
        domain_key,
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Starts a new episode with the next seed from this env's generator.
    pub fn reset(&mut self) -> Observation {
        let seed = self.seeds.gen();
        self.reset_with_seed(seed)
    }

    /// Starts a new episode whose start and goal derive from `episode_seed` only.
    pub fn reset_with_seed(&mut self, episode_seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let mut draw = |span: f64| [rng.gen_range(-span..=span), rng.gen_range(-span..=span)];
        let goal = draw(GOAL_SPAN);
        let pos = draw(START_SPAN);
        let state = HiddenState {
            pos,
            vel: [0.0, 0.0],
            goal,
        };
        self.state = Some(state);
        self.steps = 0;
        self.done = false;
        self.episode_seed = episode_seed;
        render(&self.spec, &state)
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Lifetime count of `step` calls on this handle.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Privileged access used by scripted policies and tests.
    pub fn hidden_state(&self) -> Option<HiddenState> {
        self.state
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let Some(state) = self.state else {
            return Err(Error::Usage("step before reset".into()));
        };
        if self.done {
            return Err(Error::Usage("step after episode end without reset".into()));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::Shape(format!(
                "action has {} components, expected {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        let masked = self.spec.mask_action(action);
        let next = advance(&state, &masked, self.spec.slope);
        self.state = Some(next);
        self.steps += 1;
        self.total_steps += 1;
        STEPS_BY_DOMAIN.with(|m| {
            let mut m = m.borrow_mut();
            match m.get_mut(&self.domain_key) {
                Some(n) => *n += 1,
                None => {
                    m.insert(self.domain_key.clone(), 1);
                }
            }
        });
        self.done = self.steps >= self.spec.episode_limit;
        let reward = reward_at(next.pos, next.goal);
        let distance =
            ((next.pos[0] - next.goal[0]).powi(2) + (next.pos[1] - next.goal[1]).powi(2)).sqrt();
        Ok(StepResult {
            observation: render(&self.spec, &next),
            reward,
            discount_flag: if self.done { 0.0 } else { 1.0 },
            info: StepInfo {
                step: self.steps,
                distance,
                state: next,
            },
        })
    }

    /// Deadbeat controller that heads straight for the goal, compensating drift.
    pub fn scripted_action(&self) -> Vec<f64> {
        match self.state {
            Some(s) => scripted_action(&s, self.spec.slope),
            None => vec![0.0; self.spec.action_dim],
        }
    }
}

/// Straight-to-goal controller on privileged state.
pub fn scripted_action(s: &HiddenState, slope: f64) -> Vec<f64> {
    (0..2)
        .map(|i| {
            let desired = (s.goal[i] - s.pos[i]).clamp(-MAX_SPEED, MAX_SPEED);
            let drift = if i == 0 { slope * GRAVITY } else { 0.0 };
            ((desired - s.vel[i] + FRICTION * s.vel[i] + drift) / ACCEL).clamp(-1.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(spec: EnvSpec) -> Env {
        make_env(spec).unwrap()
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases: Vec<(EnvSpec, &str)> = vec![
            (
                EnvSpec {
                    image_size: 4,
                    ..Default::default()
                },
                "image_size",
            ),
            (
                EnvSpec {
                    slope: 0.6,
                    ..Default::default()
                },
                "slope",
            ),
            (
                EnvSpec {
                    masked_action_dims: BTreeSet::from([2]),
                    ..Default::default()
                },
                "masked_action_dims",
            ),
            (
                EnvSpec {
                    episode_limit: 0,
                    ..Default::default()
                },
                "episode_limit",
            ),
        ];
        for (spec, field) in cases {
            match make_env(spec) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn same_seed_resets_are_identical_and_seeds_differ_in_goal() {
        let mut a = env(EnvSpec::source(3));
        let mut b = env(EnvSpec::source(3));
        assert_eq!(a.reset(), b.reset());
        let mut c = env(EnvSpec::source(4));
        c.reset();
        assert_ne!(
            a.hidden_state().unwrap().goal,
            c.hidden_state().unwrap().goal
        );
        assert_ne!(b.reset(), c.reset());
    }

    #[test]
    fn flat_env_at_rest_with_zero_action_stays_put() {
        let mut e = env(EnvSpec::source(0));
        e.reset();
        let before = e.hidden_state().unwrap();
        let r = e.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.info.state.pos, before.pos);
        let d = ((before.pos[0] - before.goal[0]).powi(2)
            + (before.pos[1] - before.goal[1]).powi(2))
        .sqrt();
        assert_eq!(r.reward, (1.0 - d / REWARD_RADIUS).clamp(0.0, 1.0));
    }

    #[test]
    fn slope_drifts_the_agent() {
        let mut e = env(EnvSpec {
            slope: 0.1,
            ..EnvSpec::source(0)
        });
        e.reset();
        let r = e.step(&[0.0, 0.0]).unwrap();
        // v' = (-0.1 * GRAVITY, 0) from rest
        assert!((r.info.state.vel[0] - (-0.1 * GRAVITY)).abs() < 1e-15);
        assert_eq!(r.info.state.vel[1], 0.0);
    }

    #[test]
    fn masked_action_matches_zeroed_action() {
        let spec = EnvSpec {
            masked_action_dims: BTreeSet::from([1]),
            ..EnvSpec::source(9)
        };
        let mut a = env(spec.clone());
        let mut b = env(spec);
        a.reset();
        b.reset();
        for t in 0..20 {
            let x = (t as f64 * 0.37).sin();
            assert_eq!(a.step(&[x, 0.8]).unwrap(), b.step(&[x, 0.0]).unwrap());
        }
    }

    #[test]
    fn domain_probe_counts_steps_per_domain() {
        let flat = EnvSpec {
            image_size: 8,
            ..EnvSpec::source(3)
        };
        let hill = EnvSpec {
            image_size: 8,
            ..EnvSpec::downhill(3)
        };
        let (f0, h0) = (domain_steps_on_thread(&flat), domain_steps_on_thread(&hill));
        let mut a = make_env(flat.clone()).unwrap();
        let mut b = make_env(EnvSpec {
            seed: 9,
            ..flat.clone()
        })
        .unwrap();
        a.reset();
        b.reset();
        a.step(&[0.0, 0.0]).unwrap();
        b.step(&[0.0, 0.0]).unwrap();
        assert_eq!(domain_steps_on_thread(&flat), f0 + 2);
        assert_eq!(domain_steps_on_thread(&hill), h0);
    }

    #[test]
    fn lifecycle_enforces_reset() {
        let mut e = env(EnvSpec {
            episode_limit: 2,
            ..EnvSpec::source(1)
        });
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Usage(_))));
        e.reset();
        assert_eq!(e.step(&[0.0, 0.0]).unwrap().discount_flag, 1.0);
        assert!(e.step(&[0.0, 0.0]).unwrap().is_last());
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Usage(_))));
        e.reset();
        assert_eq!(e.steps(), 0);
        assert!(e.step(&[0.0, 0.0]).is_ok());
    }

    #[test]
    fn render_is_pure_and_tint_only_moves_background() {
        let s = HiddenState {
            pos: [0.2, -0.3],
            vel: [0.0, 0.0],
            goal: [0.0, 0.0],
        };
        let plain = EnvSpec::source(0);
        let tinted = EnvSpec {
            tint: [10, 0, -20],
            ..plain.clone()
        };
        let a = render(&plain, &s);
        assert_eq!(a, render(&plain, &s));
        let b = render(&tinted, &s);
        assert_eq!(a.pixels.dim(), (32, 32, 3));
        assert_eq!(a.pixels[[0, 0, 0]], 40);
        assert_eq!(b.pixels[[0, 0, 0]], 50);
        assert_eq!(b.pixels[[0, 0, 2]], 20);
    }

    #[test]
    fn scripted_policy_reaches_the_goal() {
        let mut e = env(EnvSpec::downhill(5));
        e.reset();
        let mut last = 0.0;
        for _ in 0..60 {
            let a = e.scripted_action();
            last = e.step(&a).unwrap().reward;
        }
        assert!(last > 0.95, "reward near goal {last}");
    }
}
