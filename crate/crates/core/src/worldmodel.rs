//! Recurrent state-space world model with grouped categorical latents.
//!
//! Components, all small MLPs over the `h ⊕ z` feature unless noted:
//!
//! * recurrent `h_t = g(h_{t−1}, z_{t−1}, a_{t−1})` (GRU)
//! * encoder `e(o_t)` → `[G, K]` logits, from pixels alone
//! * representation `q(z_t | h_t, e(o_t))`
//! * transition `p(ẑ_t | h_t)`
//! * observation, reward (unit-variance Gaussians) and discount (Bernoulli) heads
//!
//! Latents are sampled as one-hot vectors; gradients pass straight through to
//! the class probabilities.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autograd::{group_log_softmax, Graph, Var};
use crate::config::ModelConfig;
use crate::datastore::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Linear, Mlp, ParamId, ParamSet};
use crate::Prng;

/// `½·ln(2π)`, the per-dimension constant of a unit-variance Gaussian NLL.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Latent state of a batch of rows, as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RssmState {
    /// `[N, D]`
    pub h: Array2<f64>,
    /// `[N, G·K]`, one-hot per group.
    pub z: Array2<f64>,
    /// `[N, G·K]`, logits of the distribution `z` was drawn from.
    pub logits: Array2<f64>,
}

impl RssmState {
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// `h ⊕ z`
    pub fn feat(&self) -> Array2<f64> {
        ndarray::concatenate![Axis(1), self.h, self.z]
    }

    pub fn select(&self, rows: &[usize]) -> RssmState {
        RssmState {
            h: self.h.select(Axis(0), rows),
            z: self.z.select(Axis(0), rows),
            logits: self.logits.select(Axis(0), rows),
        }
    }
}

/// Latent state of a batch of rows, on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub h: Var,
    pub z: Var,
    pub logits: Var,
}

/// How categorical latents are drawn.
pub enum Draw<'a> {
    Sample(&'a mut Prng),
    /// Arg-max class per group.
    Mode,
}

impl Draw<'_> {
    fn reborrow(&mut self) -> Draw<'_> {
        match self {
            Draw::Sample(r) => Draw::Sample(r),
            Draw::Mode => Draw::Mode,
        }
    }
}

/// One-hot draw per group of width `k` from `logits`.
pub fn draw_one_hot(logits: &Array2<f64>, k: usize, draw: &mut Draw<'_>) -> Array2<f64> {
    let logp = group_log_softmax(logits.view(), k);
    let (n, c) = logp.dim();
    let mut out = Array2::zeros((n, c));
    for r in 0..n {
        for g in 0..c / k {
            let base = g * k;
            let pick = match draw {
                Draw::Sample(rng) => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = k - 1;
                    for j in 0..k {
                        acc += logp[[r, base + j]].exp();
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
                Draw::Mode => (0..k)
                    .max_by(|&a, &b| {
                        logp[[r, base + a]]
                            .total_cmp(&logp[[r, base + b]])
                            .then(b.cmp(&a))
                    })
                    .unwrap(),
            };
            out[[r, base + pick]] = 1.0;
        }
    }
    out
}

/// `Σ_groups KL[p ‖ q]` per row for logits laid out in groups of width `k`.
pub fn categorical_kl_rows(p_logits: &Array2<f64>, q_logits: &Array2<f64>, k: usize) -> Vec<f64> {
    let lp = group_log_softmax(p_logits.view(), k);
    let lq = group_log_softmax(q_logits.view(), k);
    lp.outer_iter()
        .zip(lq.outer_iter())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x.exp() * (x - y)).sum())
        .collect()
}

/// Graph version: per-row `Σ_groups KL[p ‖ q]`, `[N, 1]`.
pub fn categorical_kl(g: &mut Graph, p_logits: Var, q_logits: Var, k: usize) -> Var {
    let lp = g.group_log_softmax(p_logits, k);
    let lq = g.group_log_softmax(q_logits, k);
    let p = g.exp(lp);
    let diff = g.sub(lp, lq);
    let prod = g.mul(p, diff);
    g.sum_cols(prod)
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Mlp,
    posterior: Mlp,
    prior: Mlp,
    recurrent_in: Linear,
    gru: GruCell,
    decoder: Mlp,
    reward: Mlp,
    discount: Mlp,
    init_h: ParamId,
}

/// One domain's world-model parameters (`φ` for the target, `φ′` for the source).
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub model: ModelConfig,
    pub frame_shape: (usize, usize, usize),
    pub action_dim: usize,
    pub params: ParamSet,
    layout: Layout,
}

/// Loss terms of one world-model update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WmLossReport {
    pub image_loss: f64,
    pub reward_loss: f64,
    pub discount_loss: f64,
    /// Balanced posterior/prior KL after the free-bits floor.
    pub kl_loss: f64,
    pub domain_kl_loss: f64,
    pub total: f64,
    /// Posterior/prior KL before balancing and the floor.
    pub kl_raw: f64,
}

pub struct WmLossOutput {
    pub report: WmLossReport,
    /// Gradients for `self.params`, in order.
    pub grads: Vec<Array2<f64>>,
    /// Gradients reaching the source model's parameters (always zero).
    pub source_grads: Option<Vec<Array2<f64>>>,
    /// Posterior states, time-major rows (`t·B + b`).
    pub posterior: RssmState,
}

/// Graph nodes of a posterior pass over a sequence batch.
pub struct SequenceVars {
    pub states: Vec<LatentVars>,
    pub prior_logits: Vec<Var>,
    /// Encoder logits, time-major `[L·B, G·K]`.
    pub embed: Var,
    /// Normalised frames, time-major `[L·B, frame]`.
    pub obs: Var,
    /// `h ⊕ z`, time-major `[L·B, F]`.
    pub feat: Var,
}

impl WorldModel {
    pub fn new(
        model: &ModelConfig,
        frame_shape: (usize, usize, usize),
        action_dim: usize,
        rng: &mut Prng,
    ) -> Self {
        let frame = frame_shape.0 * frame_shape.1 * frame_shape.2;
        let (d, s, hid, f) = (model.deter, model.stoch(), model.hidden, model.feat());
        let mut ps = ParamSet::new();
        let layout = Layout {
            encoder: Mlp::new(&mut ps, "encoder", &[frame, hid, hid, s], rng),
            posterior: Mlp::new(&mut ps, "posterior", &[d + s, hid, s], rng),
            prior: Mlp::new(&mut ps, "prior", &[d, hid, s], rng),
            recurrent_in: Linear::new(&mut ps, "recurrent_in", s + action_dim, hid, rng),
            gru: GruCell::new(&mut ps, "gru", hid, d, rng),
            decoder: Mlp::new(&mut ps, "decoder", &[f, hid, hid, frame], rng),
            reward: Mlp::new(&mut ps, "reward", &[f, hid, 1], rng),
            discount: Mlp::new(&mut ps, "discount", &[f, hid, 1], rng),
            init_h: ps.push("init_h", Array2::zeros((1, d))),
        };
        Self {
            model: model.clone(),
            frame_shape,
            action_dim,
            params: ps,
            layout,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.0 * self.frame_shape.1 * self.frame_shape.2
    }

    pub fn classes(&self) -> usize {
        self.model.classes
    }

    /// Parameter ids of the encoder `e(·)`.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .encoder
            .layers
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    /// Parameter ids of the reward head.
    pub fn reward_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .reward
            .layers
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    pub fn copy_encoder_from(&mut self, other: &WorldModel) {
        for id in self.encoder_param_ids() {
            let src = other.params.get(id).clone();
            self.params.get_mut(id).assign(&src);
        }
    }

    // ---- graph-level components ----

    pub fn encode(&self, g: &mut Graph, p: &Bound, obs: Var) -> Var {
        self.layout.encoder.forward(g, p, obs)
    }

    pub fn initial(&self, g: &mut Graph, p: &Bound, n: usize) -> LatentVars {
        let h0 = g.tanh(p.var(self.layout.init_h));
        let h = g.broadcast_rows(h0, n);
        let z = g.constant(Array2::zeros((n, self.model.stoch())));
        let logits = g.constant(Array2::zeros((n, self.model.stoch())));
        LatentVars { h, z, logits }
    }

    fn recurrent(&self, g: &mut Graph, p: &Bound, h: Var, z: Var, action: Var) -> Var {
        let za = g.concat_cols(&[z, action]);
        let x = self.layout.recurrent_in.forward(g, p, za);
        let x = g.elu(x);
        self.layout.gru.forward(g, p, x, h)
    }

    /// Straight-through one-hot draw: forward value is the one-hot sample,
    /// gradient is that of the class probabilities.
    pub fn straight_through(&self, g: &mut Graph, logits: Var, draw: &mut Draw<'_>) -> Var {
        let k = self.model.classes;
        let logp = g.group_log_softmax(logits, k);
        let probs = g.exp(logp);
        let one_hot = draw_one_hot(g.value(logits), k, draw);
        let offset = g.constant(one_hot - g.value(probs));
        g.add(probs, offset)
    }

    /// Posterior update. Rows flagged `is_first` restart from the initial
    /// state with a zero action.
    pub fn observe_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: LatentVars,
        action: Var,
        embed: Var,
        is_first: &[bool],
        draw: &mut Draw<'_>,
    ) -> (LatentVars, Var) {
        let n = g.shape(embed).0;
        assert_eq!(is_first.len(), n);
        let (mut h_prev, mut z_prev, mut act) = (prev.h, prev.z, action);
        if is_first.iter().any(|&f| f) {
            let first = Array2::from_shape_fn((n, 1), |(r, _)| if is_first[r] { 1.0 } else { 0.0 });
            let keep = g.constant(first.mapv(|f| 1.0 - f));
            let first = g.constant(first);
            let init = self.initial(g, p, n);
            let kept = g.mul_col(h_prev, keep);
            let fresh = g.mul_col(init.h, first);
            h_prev = g.add(kept, fresh);
            z_prev = g.mul_col(z_prev, keep);
            act = g.mul_col(act, keep);
        }
        let h = self.recurrent(g, p, h_prev, z_prev, act);
        let prior_logits = self.layout.prior.forward(g, p, h);
        let post_in = g.concat_cols(&[h, embed]);
        let logits = self.layout.posterior.forward(g, p, post_in);
        let z = self.straight_through(g, logits, draw);
        (LatentVars { h, z, logits }, prior_logits)
    }

    /// Prior-only update.
    pub fn imagine_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: LatentVars,
        action: Var,
        draw: &mut Draw<'_>,
    ) -> LatentVars {
        let h = self.recurrent(g, p, state.h, state.z, action);
        let logits = self.layout.prior.forward(g, p, h);
        let z = self.straight_through(g, logits, draw);
        LatentVars { h, z, logits }
    }

    pub fn feat(&self, g: &mut Graph, s: LatentVars) -> Var {
        g.concat_cols(&[s.h, s.z])
    }

    /// Per-pixel Gaussian mean in normalised pixel units.
    pub fn decode(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        self.layout.decoder.forward(g, p, feat)
    }

    /// Reward mean, `[N, 1]`.
    pub fn reward(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        self.layout.reward.forward(g, p, feat)
    }

    /// Continuation logit, `[N, 1]`.
    pub fn discount_logit(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        self.layout.discount.forward(g, p, feat)
    }

    /// Posterior pass over a sequence batch. Every slice starts from the
    /// initial state.
    pub fn observe_sequence(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SequenceBatch,
        draw: &mut Draw<'_>,
    ) -> Result<SequenceVars> {
        if batch.frame_shape != self.frame_shape || batch.action_dim() != self.action_dim {
            return Err(Error::Shape(format!(
                "batch frames {:?} / actions {} vs model {:?} / {}",
                batch.frame_shape,
                batch.action_dim(),
                self.frame_shape,
                self.action_dim
            )));
        }
        let bsz = batch.batch;
        let obs = g.constant(batch.time_major_obs());
        let embed = self.encode(g, p, obs);
        let mut state = self.initial(g, p, bsz);
        let mut states = Vec::with_capacity(batch.length);
        let mut priors = Vec::with_capacity(batch.length);
        for t in 0..batch.length {
            let e = g.slice_rows(embed, t * bsz, (t + 1) * bsz);
            let a = g.constant(batch.actions_at(t));
            let (post, prior) = self.observe_step(
                g,
                p,
                state,
                a,
                e,
                &batch.is_first_at(t),
                &mut draw.reborrow(),
            );
            if !g.value(post.h).iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("observe step {t}")));
            }
            states.push(post);
            priors.push(prior);
            state = post;
        }
        let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
        let zs: Vec<Var> = states.iter().map(|s| s.z).collect();
        let h_all = g.concat_rows(&hs);
        let z_all = g.concat_rows(&zs);
        let feat = g.concat_cols(&[h_all, z_all]);
        Ok(SequenceVars {
            states,
            prior_logits: priors,
            embed,
            obs,
            feat,
        })
    }

    /// Collects posterior values of a sequence pass, time-major.
    pub fn sequence_states(&self, g: &Graph, seq: &SequenceVars) -> RssmState {
        let cat = |vars: Vec<Var>| {
            let views: Vec<_> = vars.iter().map(|v| g.value(*v).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("rows")
        };
        RssmState {
            h: cat(seq.states.iter().map(|s| s.h).collect()),
            z: cat(seq.states.iter().map(|s| s.z).collect()).mapv(f64::round),
            logits: cat(seq.states.iter().map(|s| s.logits).collect()),
        }
    }

    /// Gaussian image NLL per frame (mean over rows) on the graph.
    fn image_nll(&self, g: &mut Graph, mean: Var, target: Var) -> Var {
        let rows = g.shape(target).0 as f64;
        let diff = g.sub(target, mean);
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        let nll = g.scale(total, 0.5 / rows);
        g.add_scalar(nll, HALF_LN_2PI * self.frame_len() as f64)
    }

    /// Reward-head NLL under a unit-variance Gaussian, mean over rows.
    pub fn reward_nll(g: &mut Graph, mean: Var, target: Var) -> Var {
        let diff = g.sub(target, mean);
        let sq = g.square(diff);
        let m = g.mean_all(sq);
        let half = g.scale(m, 0.5);
        g.add_scalar(half, HALF_LN_2PI)
    }

    fn discount_nll(g: &mut Graph, logit: Var, target: Var) -> Var {
        // −[y·ln σ(l) + (1−y)·ln(1−σ(l))] = softplus(l) − y·l
        let sp = g.softplus(logit);
        let yl = g.mul(target, logit);
        let d = g.sub(sp, yl);
        g.mean_all(d)
    }

    /// Balanced KL with a free-bits floor: `w·max(KL[sg(q)‖p], f) + (1−w)·max(KL[q‖sg(p)], f)`.
    fn balanced_kl(&self, g: &mut Graph, post: Var, prior: Var) -> (Var, Var) {
        let k = self.model.classes;
        let w = self.model.kl_balance;
        let post_sg = g.detach(post);
        let prior_sg = g.detach(prior);
        let lhs_rows = categorical_kl(g, post_sg, prior, k);
        let rhs_rows = categorical_kl(g, post, prior_sg, k);
        let lhs = g.mean_all(lhs_rows);
        let rhs = g.mean_all(rhs_rows);
        let free = g.scalar_constant(self.model.free_nats);
        let lhs_c = g.maximum(lhs, free);
        let rhs_c = g.maximum(rhs, free);
        let a = g.scale(lhs_c, w);
        let b = g.scale(rhs_c, 1.0 - w);
        (g.add(a, b), rhs)
    }

    /// World-model loss on one batch. With `source`, adds
    /// `β₂·KL[sg(softmax(e_src(o))) ‖ softmax(e(o))]` (summed over groups,
    /// averaged over batch and time). The source model is read-only.
    pub fn wm_loss(
        &self,
        batch: &SequenceBatch,
        source: Option<&WorldModel>,
        beta_kl: f64,
        beta_domain: f64,
        rng: &mut Prng,
    ) -> Result<WmLossOutput> {
        if beta_domain > 0.0 && source.is_none() {
            return Err(Error::config(
                "domain_kl_scale",
                "β₂ > 0 requires a source encoder",
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let seq = self.observe_sequence(&mut g, &p, batch, &mut Draw::Sample(rng))?;
        let (image, reward, discount) = self.reconstruction_terms(&mut g, &p, batch, &seq);

        let post_all = {
            let v: Vec<Var> = seq.states.iter().map(|s| s.logits).collect();
            g.concat_rows(&v)
        };
        let prior_all = g.concat_rows(&seq.prior_logits);
        let (kl, kl_raw) = self.balanced_kl(&mut g, post_all, prior_all);

        let mut total = g.add(image, reward);
        total = g.add(total, discount);
        let kl_scaled = g.scale(kl, beta_kl);
        total = g.add(total, kl_scaled);

        let mut source_bound = None;
        let mut domain_kl_value = 0.0;
        if let Some(src) = source {
            if src.frame_shape != self.frame_shape || src.model != self.model {
                return Err(Error::Shape(
                    "source and target models differ in shape".into(),
                ));
            }
            let sp = src.params.bind(&mut g);
            let src_logits = src.encode(&mut g, &sp, seq.obs);
            let src_sg = g.detach(src_logits);
            let rows = categorical_kl(&mut g, src_sg, seq.embed, self.model.classes);
            let dkl = g.mean_all(rows);
            domain_kl_value = g.scalar(dkl);
            let scaled = g.scale(dkl, beta_domain);
            total = g.add(total, scaled);
            source_bound = Some(sp);
        }

        let report = WmLossReport {
            image_loss: g.scalar(image),
            reward_loss: g.scalar(reward),
            discount_loss: g.scalar(discount),
            kl_loss: g.scalar(kl),
            domain_kl_loss: domain_kl_value,
            total: g.scalar(total),
            kl_raw: g.scalar(kl_raw),
        };
        if !report.total.is_finite() {
            return Err(Error::numeric("world-model loss"));
        }
        let mut grads = g.backward(total);
        let posterior = self.sequence_states(&g, &seq);
        Ok(WmLossOutput {
            report,
            grads: p.grads(&mut grads),
            source_grads: source_bound.map(|sp| sp.grads(&mut grads)),
            posterior,
        })
    }

    /// Image, reward and discount NLL terms of a posterior pass.
    pub fn reconstruction_terms(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SequenceBatch,
        seq: &SequenceVars,
    ) -> (Var, Var, Var) {
        let mean = self.decode(g, p, seq.feat);
        let image = self.image_nll(g, mean, seq.obs);
        let r_mean = self.reward(g, p, seq.feat);
        let r_target = g.constant(batch.time_major_column(&batch.rewards));
        let reward = Self::reward_nll(g, r_mean, r_target);
        let d_logit = self.discount_logit(g, p, seq.feat);
        let d_target = g.constant(batch.time_major_column(&batch.discounts));
        let discount = Self::discount_nll(g, d_logit, d_target);
        (image, reward, discount)
    }

    // ---- value-level conveniences ----

    /// Encoder logits `[N, G·K]` for normalised frames `[N, frame]`.
    pub fn encode_values(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        if obs.ncols() != self.frame_len() {
            return Err(Error::Shape(format!(
                "frame width {} vs {}",
                obs.ncols(),
                self.frame_len()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let o = g.constant(obs.clone());
        let e = self.encode(&mut g, &p, o);
        Ok(g.value(e).clone())
    }

    pub fn initial_state(&self, n: usize) -> RssmState {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let s = self.initial(&mut g, &p, n);
        RssmState {
            h: g.value(s.h).clone(),
            z: g.value(s.z).clone(),
            logits: g.value(s.logits).clone(),
        }
    }

    /// Posterior update on plain arrays; returns `(posterior, prior_logits)`.
    pub fn observe_values(
        &self,
        prev: &RssmState,
        action: &Array2<f64>,
        obs: &Array2<f64>,
        is_first: &[bool],
        draw: &mut Draw<'_>,
    ) -> Result<(RssmState, Array2<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let prev_v = self.bind_state(&mut g, prev);
        let a = g.constant(action.clone());
        let o = g.constant(obs.clone());
        let e = self.encode(&mut g, &p, o);
        let (post, prior) = self.observe_step(&mut g, &p, prev_v, a, e, is_first, draw);
        let out = self.state_values(&g, post);
        if !out.h.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("observe step"));
        }
        Ok((out, g.value(prior).clone()))
    }

    pub fn imagine_values(
        &self,
        state: &RssmState,
        action: &Array2<f64>,
        draw: &mut Draw<'_>,
    ) -> Result<RssmState> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let s = self.bind_state(&mut g, state);
        let a = g.constant(action.clone());
        let next = self.imagine_step(&mut g, &p, s, a, draw);
        let out = self.state_values(&g, next);
        if !out.h.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("imagine step"));
        }
        Ok(out)
    }

    /// `(image mean, reward mean, continue probability)` per row.
    pub fn heads_values(&self, state: &RssmState) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = g.constant(state.feat());
        let img = self.decode(&mut g, &p, f);
        let r = self.reward(&mut g, &p, f);
        let d = self.discount_logit(&mut g, &p, f);
        let d = g.sigmoid(d);
        (g.value(img).clone(), g.value(r).clone(), g.value(d).clone())
    }

    pub fn bind_state(&self, g: &mut Graph, s: &RssmState) -> LatentVars {
        LatentVars {
            h: g.constant(s.h.clone()),
            z: g.constant(s.z.clone()),
            logits: g.constant(s.logits.clone()),
        }
    }

    pub fn state_values(&self, g: &Graph, s: LatentVars) -> RssmState {
        RssmState {
            h: g.value(s.h).clone(),
            z: g.value(s.z).mapv(f64::round),
            logits: g.value(s.logits).clone(),
        }
    }
}
