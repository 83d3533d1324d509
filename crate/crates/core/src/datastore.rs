//! Episodes, replay buffers, sequence sampling and dataset directories.
//!
//! An [`Episode`] with `T` transitions stores `T + 1` frames. Training works
//! on *steps*: step `i` pairs frame `i` with the action and reward that led
//! to it (zeros for `i = 0`) and the continuation flag observed there, so an
//! episode has `T + 1` steps. Sequence slices of length `L` are drawn over
//! those steps.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container, EPISODE_MAGIC};
use crate::envgrid::EnvSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `[T + 1, H, W, C]`
    pub observations: Array4<u8>,
    /// `[T, A]`
    pub actions: Array2<f64>,
    /// `[T]`
    pub rewards: Array1<f64>,
    /// `[T]`, raw 0/1 continuation flags (never multiplied by γ).
    pub discounts: Array1<f64>,
    /// Episode seed that reproduces this trajectory via `Env::reset_with_seed`.
    pub seed: Option<u64>,
}

impl Episode {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of training steps, `T + 1`.
    pub fn num_steps(&self) -> usize {
        self.len() + 1
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let (_, h, w, c) = self.observations.dim();
        (h, w, c)
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t < 1 {
            return Err(Error::format(
                "actions",
                "episode needs at least one transition",
            ));
        }
        if self.observations.dim().0 != t + 1 {
            return Err(Error::format(
                "observations",
                format!("expected {} frames", t + 1),
            ));
        }
        if self.rewards.len() != t {
            return Err(Error::format("rewards", format!("expected {t} entries")));
        }
        if self.discounts.len() != t {
            return Err(Error::format("discounts", format!("expected {t} entries")));
        }
        if self.discounts.iter().any(|&d| d != 0.0 && d != 1.0) {
            return Err(Error::format("discounts", "flags must be 0 or 1"));
        }
        if self.discounts.slice(s![..t - 1]).iter().any(|&d| d == 0.0) {
            return Err(Error::format(
                "discounts",
                "zero flag before the final step",
            ));
        }
        if self
            .rewards
            .iter()
            .chain(self.actions.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::format("rewards", "non-finite values"));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let (t1, h, w, c) = self.observations.dim();
        let mut out = Container {
            meta: serde_json::json!({ "seed": self.seed }),
            ..Default::default()
        };
        out.push(
            "observations",
            vec![t1, h, w, c],
            ArrayData::U8(self.observations.iter().copied().collect()),
        );
        out.push(
            "actions",
            vec![self.len(), self.action_dim()],
            ArrayData::F64(self.actions.iter().copied().collect()),
        );
        out.push(
            "rewards",
            vec![self.len()],
            ArrayData::F64(self.rewards.to_vec()),
        );
        out.push(
            "discounts",
            vec![self.len()],
            ArrayData::F64(self.discounts.to_vec()),
        );
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, obs) = c.u8s("observations")?;
        let [t1, h, w, ch]: [usize; 4] = shape
            .try_into()
            .map_err(|_| Error::format("observations", "expected rank 4"))?;
        let observations = Array4::from_shape_vec((t1, h, w, ch), obs.to_vec())
            .map_err(|e| Error::format("observations", e.to_string()))?;
        let (shape, act) = c.f64s("actions")?;
        let [t, a]: [usize; 2] = shape
            .try_into()
            .map_err(|_| Error::format("actions", "expected rank 2"))?;
        let actions = Array2::from_shape_vec((t, a), act.to_vec())
            .map_err(|e| Error::format("actions", e.to_string()))?;
        let rewards = Array1::from(c.f64s("rewards")?.1.to_vec());
        let discounts = Array1::from(c.f64s("discounts")?.1.to_vec());
        let seed = c.meta.get("seed").and_then(|v| v.as_u64());
        let ep = Episode {
            observations,
            actions,
            rewards,
            discounts,
            seed,
        };
        ep.validate()?;
        Ok(ep)
    }
}

pub fn save_episode(episode: &Episode, path: &Path) -> Result<()> {
    episode.to_container().save(path, EPISODE_MAGIC)
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    Episode::from_container(&Container::load(path, EPISODE_MAGIC)?)
}

/// Accumulates steps while an episode is being collected.
#[derive(Debug, Clone)]
pub struct EpisodeBuilder {
    frames: Vec<u8>,
    frame_shape: (usize, usize, usize),
    actions: Vec<f64>,
    action_dim: usize,
    rewards: Vec<f64>,
    discounts: Vec<f64>,
    seed: Option<u64>,
}

impl EpisodeBuilder {
    pub fn new(first: &ndarray::Array3<u8>, action_dim: usize, seed: Option<u64>) -> Self {
        Self {
            frames: first.iter().copied().collect(),
            frame_shape: first.dim(),
            actions: Vec::new(),
            action_dim,
            rewards: Vec::new(),
            discounts: Vec::new(),
            seed,
        }
    }

    pub fn push(
        &mut self,
        action: &[f64],
        reward: f64,
        discount_flag: f64,
        next: &ndarray::Array3<u8>,
    ) {
        assert_eq!(action.len(), self.action_dim);
        assert_eq!(next.dim(), self.frame_shape);
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.discounts.push(discount_flag);
        self.frames.extend(next.iter().copied());
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn finish(self) -> Episode {
        let t = self.rewards.len();
        let (h, w, c) = self.frame_shape;
        Episode {
            observations: Array4::from_shape_vec((t + 1, h, w, c), self.frames)
                .expect("frame count"),
            actions: Array2::from_shape_vec((t, self.action_dim), self.actions)
                .expect("action count"),
            rewards: Array1::from(self.rewards),
            discounts: Array1::from(self.discounts),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    Online,
    Offline,
}

/// Episode store. Online buffers evict whole episodes oldest-first; offline
/// buffers are frozen once built.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Arc<Episode>>,
    capacity: usize,
    mode: BufferMode,
    steps: usize,
    appended: u64,
}

impl ReplayBuffer {
    pub fn online(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
            mode: BufferMode::Online,
            steps: 0,
            appended: 0,
        }
    }

    /// Freezes `episodes` into an immutable buffer.
    pub fn offline(episodes: Vec<Episode>) -> Result<Self> {
        let mut steps = 0;
        for e in &episodes {
            e.validate()?;
            steps += e.len();
        }
        Ok(Self {
            appended: episodes.len() as u64,
            episodes: episodes.into_iter().map(Arc::new).collect(),
            capacity: steps,
            mode: BufferMode::Offline,
            steps,
        })
    }

    pub fn mode(&self) -> BufferMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Episodes ever appended, including evicted ones.
    pub fn total_appended(&self) -> u64 {
        self.appended
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|e| e.as_ref())
    }

    /// Immutable view of the current episode index.
    pub fn snapshot(&self) -> Vec<Arc<Episode>> {
        self.episodes.iter().cloned().collect()
    }

    pub fn append_episode(&mut self, episode: Episode) -> Result<()> {
        if self.mode == BufferMode::Offline {
            return Err(Error::Immutable);
        }
        episode.validate()?;
        if episode.len() > self.capacity {
            return Err(Error::config(
                "buffer_capacity",
                "episode longer than the whole buffer",
            ));
        }
        self.steps += episode.len();
        self.appended += 1;
        self.episodes.push_back(Arc::new(episode));
        while self.steps > self.capacity {
            let old = self
                .episodes
                .pop_front()
                .expect("non-empty while over capacity");
            self.steps -= old.len();
        }
        Ok(())
    }

    /// Draws `batch` slices of `length` steps, uniformly over (episode, start) pairs.
    pub fn sample_sequences(
        &self,
        batch: usize,
        length: usize,
        rng: &mut impl Rng,
    ) -> Result<SequenceBatch> {
        sample_sequences(&self.snapshot(), batch, length, rng)
    }

    /// Content fingerprint used to assert immutability.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update(e.observations.as_slice().expect("standard layout"));
            for v in e
                .actions
                .iter()
                .chain(e.rewards.iter())
                .chain(e.discounts.iter())
            {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A batch of contiguous in-episode slices, batch-major (`row = b·L + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    pub frame_shape: (usize, usize, usize),
    /// `[B, L, H, W, C]` flattened.
    pub observations: Vec<u8>,
    /// `[B·L, A]`; the action that led to each step (zeros at episode start).
    pub actions: Array2<f64>,
    /// `[B·L]`; the reward received on arriving at each step.
    pub rewards: Array1<f64>,
    /// `[B·L]`; continuation flag at each step.
    pub discounts: Array1<f64>,
    /// `[B·L]`
    pub is_first: Vec<bool>,
    /// `(episode index in the sampled snapshot, start step)` per sequence.
    pub origins: Vec<(usize, usize)>,
}

impl SequenceBatch {
    pub fn frame_len(&self) -> usize {
        let (h, w, c) = self.frame_shape;
        h * w * c
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    fn row(&self, b: usize, t: usize) -> usize {
        b * self.length + t
    }

    /// Frames normalised to `[-0.5, 0.5]`, time-major rows (`t·B + b`).
    pub fn time_major_obs(&self) -> Array2<f64> {
        let n = self.frame_len();
        let mut out = Array2::zeros((self.batch * self.length, n));
        for t in 0..self.length {
            for b in 0..self.batch {
                let src = self.row(b, t) * n;
                let mut dst = out.row_mut(t * self.batch + b);
                for (d, &p) in dst.iter_mut().zip(&self.observations[src..src + n]) {
                    *d = normalize_pixel(p);
                }
            }
        }
        out
    }

    /// Actions at step `t` for every row, `[B, A]`.
    pub fn actions_at(&self, t: usize) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.batch).map(|b| self.row(b, t)).collect();
        self.actions.select(ndarray::Axis(0), &rows)
    }

    pub fn is_first_at(&self, t: usize) -> Vec<bool> {
        (0..self.batch)
            .map(|b| self.is_first[self.row(b, t)])
            .collect()
    }

    /// Per-step column in time-major order, `[L·B, 1]`.
    pub fn time_major_column(&self, values: &Array1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.batch * self.length, 1));
        for t in 0..self.length {
            for b in 0..self.batch {
                out[[t * self.batch + b, 0]] = values[self.row(b, t)];
            }
        }
        out
    }

    /// Concatenates two batches of equal slice length along the batch axis.
    pub fn concat(&self, other: &SequenceBatch) -> SequenceBatch {
        assert_eq!(self.length, other.length);
        assert_eq!(self.frame_shape, other.frame_shape);
        let mut observations = self.observations.clone();
        observations.extend_from_slice(&other.observations);
        let cat1 =
            |a: &Array1<f64>, b: &Array1<f64>| ndarray::concatenate![ndarray::Axis(0), *a, *b];
        SequenceBatch {
            batch: self.batch + other.batch,
            length: self.length,
            frame_shape: self.frame_shape,
            observations,
            actions: ndarray::concatenate![ndarray::Axis(0), self.actions, other.actions],
            rewards: cat1(&self.rewards, &other.rewards),
            discounts: cat1(&self.discounts, &other.discounts),
            is_first: self
                .is_first
                .iter()
                .chain(&other.is_first)
                .copied()
                .collect(),
            origins: self.origins.iter().chain(&other.origins).copied().collect(),
        }
    }
}

pub fn normalize_pixel(p: u8) -> f64 {
    p as f64 / 255.0 - 0.5
}

/// Uniform slice sampling over `episodes`; episodes with fewer than `length`
/// steps are skipped.
pub fn sample_sequences(
    episodes: &[Arc<Episode>],
    batch: usize,
    length: usize,
    rng: &mut impl Rng,
) -> Result<SequenceBatch> {
    if length == 0 {
        return Err(Error::config("seq_len", "must be positive"));
    }
    // cumulative count of valid starts per eligible episode
    let mut eligible = Vec::new();
    let mut total = 0usize;
    for (i, e) in episodes.iter().enumerate() {
        if e.num_steps() >= length {
            total += e.num_steps() - length + 1;
            eligible.push((i, total));
        }
    }
    if total == 0 {
        return Err(Error::EmptyData(format!("no episode has {length} steps")));
    }
    let first = &episodes[eligible[0].0];
    let frame_shape = first.frame_shape();
    let frame_len = frame_shape.0 * frame_shape.1 * frame_shape.2;
    let adim = first.action_dim();

    let rows = batch * length;
    let mut observations = Vec::with_capacity(rows * frame_len);
    let mut actions = Array2::zeros((rows, adim));
    let mut rewards = Array1::zeros(rows);
    let mut discounts = Array1::zeros(rows);
    let mut is_first = vec![false; rows];
    let mut origins = Vec::with_capacity(batch);

    for b in 0..batch {
        let draw = rng.gen_range(0..total);
        let slot = eligible.partition_point(|&(_, cum)| cum <= draw);
        let (ep_idx, cum) = eligible[slot];
        let ep = &episodes[ep_idx];
        let starts = ep.num_steps() - length + 1;
        let start = draw - (cum - starts);
        origins.push((ep_idx, start));
        let frames = ep.observations.as_slice().expect("standard layout");
        for t in 0..length {
            let step = start + t;
            let row = b * length + t;
            observations.extend_from_slice(&frames[step * frame_len..(step + 1) * frame_len]);
            if step == 0 {
                discounts[row] = 1.0;
                is_first[row] = true;
            } else {
                actions.row_mut(row).assign(&ep.actions.row(step - 1));
                rewards[row] = ep.rewards[step - 1];
                discounts[row] = ep.discounts[step - 1];
            }
        }
    }
    Ok(SequenceBatch {
        batch,
        length,
        frame_shape,
        observations,
        actions,
        rewards,
        discounts,
        is_first,
        origins,
    })
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub file: String,
    pub seed: Option<u64>,
    pub length: usize,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: usize,
    pub mean_return: f64,
}

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: u32,
    pub env_spec: EnvSpec,
    pub seed: u64,
    pub budget_steps: usize,
    /// Mean scripted-oracle return used as the maximum score.
    pub max_score: f64,
    pub max_score_returns: Vec<f64>,
    pub threshold: f64,
    /// Evaluation mean at the stopping point, if any evaluation ran.
    pub achieved_score: Option<f64>,
    pub budget_capped: bool,
    pub eval_history: Vec<EvalPoint>,
    pub total_steps: usize,
    pub episodes: Vec<EpisodeRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:06}.cwep")
}

/// Writes episodes into `dir` as they are produced.
pub struct DatasetWriter {
    dir: PathBuf,
    records: Vec<EpisodeRecord>,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn write(&mut self, episode: &Episode) -> Result<()> {
        let file = episode_file_name(self.records.len());
        save_episode(episode, &self.dir.join(&file))?;
        self.records.push(EpisodeRecord {
            file,
            seed: episode.seed,
            length: episode.len(),
            total_reward: episode.total_reward(),
        });
        Ok(())
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EpisodeRecord> {
        self.records
    }
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset directory as an immutable offline buffer.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, ReplayBuffer)> {
    let manifest = read_manifest(dir)?;
    let episodes = manifest
        .episodes
        .iter()
        .map(|r| load_episode(&dir.join(&r.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, ReplayBuffer::offline(episodes)?))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Synthetic episode whose every value encodes its position.
    pub(crate) fn toy_episode(t: usize, tag: u8) -> Episode {
        let mut obs = Array4::zeros((t + 1, 2, 2, 3));
        for i in 0..=t {
            obs.slice_mut(s![i, .., .., ..])
                .fill(tag.wrapping_mul(16).wrapping_add(i as u8));
        }
        let mut discounts = Array1::ones(t);
        discounts[t - 1] = 0.0;
        Episode {
            observations: obs,
            actions: Array2::from_shape_fn((t, 2), |(i, j)| i as f64 + 0.5 * j as f64),
            rewards: Array1::from_shape_fn(t, |i| tag as f64 * 100.0 + i as f64),
            discounts,
            seed: Some(tag as u64),
        }
    }

    #[test]
    fn append_counts_steps_and_evicts_oldest() {
        let mut buf = ReplayBuffer::online(25);
        buf.append_episode(toy_episode(10, 1)).unwrap();
        assert_eq!(buf.num_steps(), 10);
        buf.append_episode(toy_episode(10, 2)).unwrap();
        buf.append_episode(toy_episode(10, 3)).unwrap();
        assert_eq!(buf.num_episodes(), 2);
        assert!(buf.num_steps() <= 25);
        assert_eq!(buf.episodes().next().unwrap().seed, Some(2));
        assert_eq!(buf.total_appended(), 3);
    }

    #[test]
    fn offline_buffer_rejects_appends() {
        let mut buf = ReplayBuffer::offline(vec![toy_episode(5, 1)]).unwrap();
        let before = buf.fingerprint();
        assert!(matches!(
            buf.append_episode(toy_episode(5, 2)),
            Err(Error::Immutable)
        ));
        assert_eq!(buf.fingerprint(), before);
    }

    #[test]
    fn single_fitting_slice_is_the_whole_episode() {
        // 7 transitions -> 8 steps; L = 8 leaves exactly one start
        let ep = toy_episode(7, 4);
        let buf = ReplayBuffer::offline(vec![ep.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample_sequences(5, 8, &mut rng).unwrap();
        let frame_len = batch.frame_len();
        let steps = ep.observations.as_slice().unwrap();
        for b in 0..5 {
            assert_eq!(batch.origins[b], (0, 0));
            assert_eq!(
                &batch.observations[b * 8 * frame_len..(b + 1) * 8 * frame_len],
                steps
            );
            assert!(batch.is_first[b * 8]);
            assert!(!batch.is_first[b * 8 + 1..(b + 1) * 8].iter().any(|&f| f));
            assert_eq!(batch.rewards[b * 8 + 3], ep.rewards[2]);
        }
    }

    #[test]
    fn too_long_slices_error() {
        let buf = ReplayBuffer::offline(vec![toy_episode(4, 1), toy_episode(6, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample_sequences(2, 9, &mut rng),
            Err(Error::EmptyData(_))
        ));
        // only the longer episode qualifies
        let b = buf.sample_sequences(20, 7, &mut rng).unwrap();
        assert!(b.origins.iter().all(|&(e, s)| e == 1 && s == 0));
    }

    #[test]
    fn episode_sampling_is_uniform() {
        let buf = ReplayBuffer::offline(vec![toy_episode(30, 1), toy_episode(30, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = buf.sample_sequences(10_000, 10, &mut rng).unwrap();
        let first = batch.origins.iter().filter(|o| o.0 == 0).count() as f64 / 10_000.0;
        assert!((first - 0.5).abs() < 0.05 * 0.5, "frequency {first}");
        // chi-square over the 2 × 22 (episode, start) cells, 43 dof; 99.9% quantile ≈ 77.4
        let mut counts = vec![0f64; 44];
        for &(e, s) in &batch.origins {
            counts[e * 22 + s] += 1.0;
        }
        let expected = 10_000.0 / 44.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 77.4, "chi-square {chi2}");
    }

    #[test]
    fn episode_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cwep");
        let ep = toy_episode(9, 3);
        save_episode(&ep, &path).unwrap();
        assert_eq!(load_episode(&path).unwrap(), ep);

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(
            matches!(load_episode(&path), Err(Error::Format { field, .. }) if field == "magic")
        );

        save_episode(&ep, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(
            matches!(load_episode(&path), Err(Error::Format { field, .. }) if field == "payload_len")
        );
    }

    #[test]
    fn time_major_layout() {
        let buf = ReplayBuffer::offline(vec![toy_episode(3, 0), toy_episode(3, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = buf.sample_sequences(2, 4, &mut rng).unwrap();
        let obs = b.time_major_obs();
        for t in 0..4 {
            for r in 0..2 {
                let expected = normalize_pixel(b.observations[(r * 4 + t) * 12]);
                assert_eq!(obs[[t * 2 + r, 0]], expected);
            }
            assert_eq!(b.actions_at(t).row(1), b.actions.row(4 + t));
        }
    }
}
