#![allow(dead_code)]

use coworld::config::{CoWorldConfig, ModelConfig};
use coworld::datastore::{Episode, EpisodeBuilder, ReplayBuffer, SequenceBatch};
use coworld::envgrid::EnvSpec;
use coworld::Prng;
use ndarray::Array3;
use rand::{Rng, SeedableRng};

/// Episode of `t` steps with random frames of `shape`, 2-D actions and rewards.
pub fn random_episode(t: usize, shape: (usize, usize, usize), seed: u64) -> Episode {
    let mut rng = Prng::seed_from_u64(seed);
    let mut frame = || Array3::from_shape_fn(shape, |_| rng.gen::<u8>());
    let first = frame();
    let frames: Vec<_> = (0..t).map(|_| frame()).collect();
    let mut rng = Prng::seed_from_u64(seed ^ 0xabc);
    let mut b = EpisodeBuilder::new(&first, 2, Some(seed));
    for (i, f) in frames.iter().enumerate() {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        b.push(&a, rng.gen_range(0.0..1.0), if i + 1 == t { 0.0 } else { 1.0 }, f);
    }
    b.finish()
}

pub fn toy_batch(batch: usize, length: usize, seed: u64) -> SequenceBatch {
    let eps = (0..3).map(|i| random_episode(10 + i, (2, 2, 3), seed * 10 + i as u64)).collect();
    ReplayBuffer::offline(eps)
        .unwrap()
        .sample_sequences(batch, length, &mut Prng::seed_from_u64(seed))
        .unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        deter: 8,
        groups: 2,
        classes: 3,
        hidden: 6,
        ..ModelConfig::default()
    }
}

/// Small sizes that still learn the 16-pixel runner on one CPU core.
pub fn desk_config() -> CoWorldConfig {
    let mut cfg = CoWorldConfig::default();
    cfg.model.deter = 64;
    cfg.model.hidden = 64;
    cfg.source_env = EnvSpec {
        image_size: 16,
        ..EnvSpec::source(1)
    };
    cfg.target_env = EnvSpec {
        image_size: 16,
        ..EnvSpec::downhill(2)
    };
    cfg.wm_lr = 1e-3;
    cfg.actor_lr = 1e-4;
    cfg.critic_lr = 3e-4;
    cfg
}

/// Seconds-scale pipeline config: tiny nets, short episodes, few updates.
pub fn smoke_config() -> CoWorldConfig {
    let mut cfg = CoWorldConfig::default();
    cfg.model = ModelConfig {
        deter: 8,
        groups: 2,
        classes: 3,
        hidden: 8,
        ..ModelConfig::default()
    };
    for env in [&mut cfg.source_env, &mut cfg.target_env] {
        env.image_size = 8;
        env.episode_limit = 12;
    }
    cfg.batch_size = 3;
    cfg.seq_len = 5;
    cfg.horizon = 3;
    cfg.imagine_starts = 6;
    cfg.pretrain_steps = 4;
    cfg.target_steps = 3;
    cfg.source_steps = 3;
    cfg.outer_iterations = 2;
    cfg.prefill_episodes = 2;
    cfg.updates_per_episode = 2;
    cfg.buffer_capacity = 1000;
    cfg.eval_episodes = 2;
    cfg.log_every = 2;
    cfg.slow_critic_every = 2;
    cfg
}
