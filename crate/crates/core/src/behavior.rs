//! Actor-critic learning on latent imaginations.
//!
//! The actor maps the latent feature `h ⊕ z` to a tanh-squashed Gaussian and
//! is trained by backpropagating imagined λ-returns through the world model.
//! The critic regresses λ-returns; for the offline target agent it also pays
//! `α·max(ζ·v(ẑ), sg(v_src(ẑ)))`, which only bites where the target critic
//! exceeds the (frozen) source critic.

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::envgrid::Observation;
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParamSet};
use crate::worldmodel::{Draw, LatentVars, RssmState, WorldModel};
use crate::Prng;

/// `½·ln(2πe)`
const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

/// Policy `π(a | h ⊕ z)`: tanh-squashed diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub params: ParamSet,
    net: Mlp,
    pub action_dim: usize,
    pub min_std: f64,
}

/// Graph nodes of one policy evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    pub mean: Var,
    pub std: Var,
    /// Entropy of the pre-squash Gaussian, `[N, 1]`.
    pub entropy: Var,
}

impl Actor {
    pub fn new(
        feat_dim: usize,
        hidden: usize,
        action_dim: usize,
        min_std: f64,
        rng: &mut Prng,
    ) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(
            &mut params,
            "actor",
            &[feat_dim, hidden, hidden, 2 * action_dim],
            rng,
        );
        Self {
            params,
            net,
            action_dim,
            min_std,
        }
    }

    pub fn policy(&self, g: &mut Graph, p: &Bound, feat: Var) -> PolicyVars {
        let a = self.action_dim;
        let out = self.net.forward(g, p, feat);
        let mean = g.slice_cols(out, 0, a);
        let raw = g.slice_cols(out, a, 2 * a);
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, self.min_std);
        let log_std = g.ln(std);
        let total = g.sum_cols(log_std);
        let entropy = g.add_scalar(total, a as f64 * HALF_LN_2PI_E);
        PolicyVars { mean, std, entropy }
    }

    /// Reparameterised draw `tanh(μ + σ·ε)`; `None` returns the mode `tanh(μ)`.
    pub fn sample(&self, g: &mut Graph, pv: PolicyVars, rng: Option<&mut Prng>) -> Var {
        let pre = match rng {
            Some(rng) => {
                let (n, a) = g.shape(pv.mean);
                let eps = Array2::from_shape_fn((n, a), |_| StandardNormal.sample(rng));
                let eps = g.constant(eps);
                let noise = g.mul(pv.std, eps);
                g.add(pv.mean, noise)
            }
            None => pv.mean,
        };
        g.tanh(pre)
    }
}

/// State-value network `v(h ⊕ z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub params: ParamSet,
    net: Mlp,
}

impl Critic {
    pub fn new(feat_dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(&mut params, "critic", &[feat_dim, hidden, hidden, 1], rng);
        Self { params, net }
    }

    pub fn value(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        self.net.forward(g, p, feat)
    }

    /// Values `[N, 1]` for plain features.
    pub fn values(&self, feat: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = g.constant(feat.clone());
        let v = self.value(&mut g, &p, f);
        g.value(v).clone()
    }

    /// Zeroes the output layer so the network predicts `c` everywhere.
    pub fn set_constant(&mut self, c: f64) {
        let last = *self.net.layers.last().expect("critic has layers");
        self.params.get_mut(last.w).fill(0.0);
        self.params.get_mut(last.b).fill(c);
    }
}

/// Detached imagination results.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedRollout {
    pub horizon: usize,
    /// `H + 1` entries of `[N, F]`; index 0 is the start state.
    pub feats: Vec<Array2<f64>>,
    /// `H` entries of `[N, A]`; action `t` moves state `t` to `t + 1`.
    pub actions: Vec<Array2<f64>>,
    /// `[N, H]`; reward predicted on arriving at state `t + 1`.
    pub rewards: Array2<f64>,
    /// `[N, H]`; `γ·P(continue)` at state `t + 1`.
    pub discounts: Array2<f64>,
    /// `[N, H + 1]`; value estimates used for bootstrapping.
    pub values: Array2<f64>,
}

impl ImaginedRollout {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    /// λ-returns `[N, H]`.
    pub fn lambda_returns(&self, lambda: f64) -> Result<Array2<f64>> {
        let (n, h) = self.rewards.dim();
        let mut out = Array2::zeros((n, h));
        for r in 0..n {
            let row = lambda_returns(
                &self.rewards.row(r).to_vec(),
                &self.discounts.row(r).to_vec(),
                &self.values.row(r).to_vec(),
                lambda,
            )?;
            out.row_mut(r).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }

    /// Features of states `0..H`, time-major `[H·N, F]`.
    pub fn critic_inputs(&self) -> Array2<f64> {
        let views: Vec<_> = self.feats[..self.horizon]
            .iter()
            .map(|f| f.view())
            .collect();
        ndarray::concatenate(Axis(0), &views).expect("feature widths agree")
    }
}

/// Imagination rollout kept on its graph so the actor loss can backpropagate.
pub struct ImaginationGraph {
    pub graph: Graph,
    pub actor: Bound,
    pub feats: Vec<Var>,
    pub actions: Vec<Var>,
    pub entropies: Vec<Var>,
    pub rewards: Vec<Var>,
    pub discounts: Vec<Var>,
    pub values: Vec<Var>,
    pub horizon: usize,
}

/// Rolls `horizon` prior steps from `start` with actions drawn from `actor`.
/// Rewards and continuation come from the world-model heads, values from
/// `critic` (normally the slow copy). No environment is touched.
pub fn imagine_trajectories(
    wm: &WorldModel,
    actor: &Actor,
    critic: &Critic,
    start: &RssmState,
    horizon: usize,
    discount: f64,
    rng: &mut Prng,
) -> Result<ImaginationGraph> {
    if horizon < 1 {
        return Err(Error::config("horizon", "must be >= 1"));
    }
    let mut g = Graph::new();
    let wp = wm.params.bind(&mut g);
    let ap = actor.params.bind(&mut g);
    let cp = critic.params.bind(&mut g);
    let mut state: LatentVars = wm.bind_state(&mut g, start);
    let mut feats = vec![wm.feat(&mut g, state)];
    let (mut actions, mut entropies, mut rewards, mut discounts) = (vec![], vec![], vec![], vec![]);
    for _ in 0..horizon {
        let feat = *feats.last().unwrap();
        let pv = actor.policy(&mut g, &ap, feat);
        let action = actor.sample(&mut g, pv, Some(rng));
        state = wm.imagine_step(&mut g, &wp, state, action, &mut Draw::Sample(rng));
        let next = wm.feat(&mut g, state);
        let r = wm.reward(&mut g, &wp, next);
        let dl = wm.discount_logit(&mut g, &wp, next);
        let cont = g.sigmoid(dl);
        let d = g.scale(cont, discount);
        actions.push(action);
        entropies.push(pv.entropy);
        rewards.push(r);
        discounts.push(d);
        feats.push(next);
    }
    let values = feats
        .iter()
        .map(|&f| critic.value(&mut g, &cp, f))
        .collect::<Vec<_>>();
    if !g
        .value(*values.last().unwrap())
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::numeric("imagination"));
    }
    Ok(ImaginationGraph {
        graph: g,
        actor: ap,
        feats,
        actions,
        entropies,
        rewards,
        discounts,
        values,
        horizon,
    })
}

impl ImaginationGraph {
    pub fn rollout(&self) -> ImaginedRollout {
        let g = &self.graph;
        let cols = |vars: &[Var]| {
            let views: Vec<_> = vars.iter().map(|v| g.value(*v).view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("rows agree")
        };
        ImaginedRollout {
            horizon: self.horizon,
            feats: self.feats.iter().map(|v| g.value(*v).clone()).collect(),
            actions: self.actions.iter().map(|v| g.value(*v).clone()).collect(),
            rewards: cols(&self.rewards),
            discounts: cols(&self.discounts),
            values: cols(&self.values),
        }
    }
}

/// `V_t = r_t + d_t·[(1 − λ)·v_{t+1} + λ·V_{t+1}]`, with `V_H = v_H`.
/// `discounts` already include γ.
pub fn lambda_returns(
    rewards: &[f64],
    discounts: &[f64],
    values: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} outside [0, 1]")));
    }
    let h = rewards.len();
    if discounts.len() != h || values.len() != h + 1 {
        return Err(Error::Shape(format!(
            "rewards {h}, discounts {}, values {} (need H, H, H+1)",
            discounts.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + discounts[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph version of [`lambda_returns`] over `[N, 1]` columns.
pub fn lambda_returns_graph(
    g: &mut Graph,
    rewards: &[Var],
    discounts: &[Var],
    values: &[Var],
    lambda: f64,
) -> Vec<Var> {
    let h = rewards.len();
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let a = g.scale(values[t + 1], 1.0 - lambda);
        let b = g.scale(next, lambda);
        let mix = g.add(a, b);
        let disc = g.mul(discounts[t], mix);
        next = g.add(rewards[t], disc);
        out[t] = next;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorLossReport {
    pub loss: f64,
    pub mean_return: f64,
    pub mean_entropy: f64,
}

/// `−mean(w_t·V_t) − η·mean(w_t·H_t)`, `w_t = Π_{i<t} d_i` (stop-gradient).
/// Returns the report, the actor gradients and the λ-returns `[N, H]`.
pub fn actor_loss(
    img: &mut ImaginationGraph,
    lambda: f64,
    entropy_scale: f64,
) -> Result<(ActorLossReport, Vec<Array2<f64>>, Array2<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} outside [0, 1]")));
    }
    let h = img.horizon;
    let g = &mut img.graph;
    let returns = lambda_returns_graph(g, &img.rewards, &img.discounts, &img.values, lambda);
    let n = g.shape(returns[0]).0;
    let mut weight = Array2::<f64>::ones((n, 1));
    let mut terms = Vec::with_capacity(h);
    let (mut ret_sum, mut ent_sum) = (0.0, 0.0);
    for t in 0..h {
        let w = g.constant(weight.clone());
        let ent = g.scale(img.entropies[t], entropy_scale);
        let obj = g.add(returns[t], ent);
        terms.push(g.mul(w, obj));
        ret_sum += g.value(returns[t]).sum();
        ent_sum += g.value(img.entropies[t]).sum();
        weight = &weight * g.value(img.discounts[t]);
    }
    let all = g.concat_rows(&terms);
    let mean = g.mean_all(all);
    let loss = g.scale(mean, -1.0);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::numeric("actor loss"));
    }
    let mut grads = g.backward(loss);
    let views: Vec<_> = returns.iter().map(|v| g.value(*v).view()).collect();
    let ret = ndarray::concatenate(Axis(1), &views).expect("rows agree");
    let denom = (n * h) as f64;
    let report = ActorLossReport {
        loss: value,
        mean_return: ret_sum / denom,
        mean_entropy: ent_sum / denom,
    };
    Ok((report, img.actor.grads(&mut grads), ret))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CriticLossReport {
    /// `mean ½(v − sg(V))²`
    pub td_loss: f64,
    /// `mean max(ζ·v, sg(v_src))`, before scaling by `α`.
    pub regularizer: f64,
    pub total: f64,
    /// Fraction of states with `ζ·v ≥ sg(v_src)`.
    pub fraction_clamped: f64,
}

pub struct CriticLossOutput {
    pub report: CriticLossReport,
    pub grads: Vec<Array2<f64>>,
    /// Gradients reaching the source critic (always zero).
    pub source_grads: Option<Vec<Array2<f64>>>,
}

/// Critic loss over explicit states and targets.
///
/// `total = mean ½(v − sg(V))² + α·mean max(ζ·v, sg(v_src))`. At a tie the
/// gradient follows the `ζ·v` branch.
pub fn critic_loss_on(
    critic: &Critic,
    source: Option<&Critic>,
    feats: &Array2<f64>,
    targets: &Array2<f64>,
    alpha: f64,
    zeta: f64,
) -> Result<CriticLossOutput> {
    if alpha > 0.0 && source.is_none() {
        return Err(Error::config(
            "value_reg_scale",
            "α > 0 requires a source critic",
        ));
    }
    if targets.dim() != (feats.nrows(), 1) {
        return Err(Error::Shape(format!(
            "targets {:?} for {} states",
            targets.dim(),
            feats.nrows()
        )));
    }
    let mut g = Graph::new();
    let p = critic.params.bind(&mut g);
    let f = g.constant(feats.clone());
    let v = critic.value(&mut g, &p, f);
    let target = g.constant(targets.clone());
    let diff = g.sub(v, target);
    let sq = g.square(diff);
    let mse = g.mean_all(sq);
    let td = g.scale(mse, 0.5);
    let mut total = td;
    let (mut regularizer, mut fraction_clamped, mut source_bound) = (0.0, 0.0, None);
    if let Some(src) = source {
        let sp = src.params.bind(&mut g);
        let sv = src.value(&mut g, &sp, f);
        let sv = g.detach(sv);
        let scaled = g.scale(v, zeta);
        let clamped = scaled_ge(g.value(scaled), g.value(sv));
        fraction_clamped = clamped as f64 / feats.nrows().max(1) as f64;
        let mx = g.maximum(scaled, sv);
        let reg = g.mean_all(mx);
        regularizer = g.scalar(reg);
        let weighted = g.scale(reg, alpha);
        total = g.add(total, weighted);
        source_bound = Some(sp);
    }
    let report = CriticLossReport {
        td_loss: g.scalar(td),
        regularizer,
        total: g.scalar(total),
        fraction_clamped,
    };
    if !report.total.is_finite() {
        return Err(Error::numeric("critic loss"));
    }
    let mut grads = g.backward(total);
    Ok(CriticLossOutput {
        report,
        grads: p.grads(&mut grads),
        source_grads: source_bound.map(|sp| sp.grads(&mut grads)),
    })
}

fn scaled_ge(a: &Array2<f64>, b: &Array2<f64>) -> usize {
    a.iter().zip(b.iter()).filter(|(x, y)| x >= y).count()
}

/// Critic loss on an imagined rollout: targets are its λ-returns, states `0..H`.
pub fn critic_loss(
    critic: &Critic,
    source: Option<&Critic>,
    rollout: &ImaginedRollout,
    alpha: f64,
    zeta: f64,
    lambda: f64,
) -> Result<CriticLossOutput> {
    let returns = rollout.lambda_returns(lambda)?;
    // time-major to match critic_inputs
    let (n, h) = returns.dim();
    let targets = Array2::from_shape_fn((n * h, 1), |(i, _)| returns[[i % n, i / n]]);
    critic_loss_on(
        critic,
        source,
        &rollout.critic_inputs(),
        &targets,
        alpha,
        zeta,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Recurrent policy state carried between environment steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCarry {
    pub state: RssmState,
    pub prev_action: Array2<f64>,
    pub first: bool,
}

impl AgentCarry {
    pub fn new(wm: &WorldModel) -> Self {
        Self {
            state: wm.initial_state(1),
            prev_action: Array2::zeros((1, wm.action_dim)),
            first: true,
        }
    }
}

/// Observes `obs`, then samples (explore) or takes the mode (eval).
pub fn act(
    actor: &Actor,
    wm: &WorldModel,
    carry: &AgentCarry,
    obs: &Observation,
    mode: ActMode,
    rng: &mut Prng,
) -> Result<(Vec<f64>, AgentCarry)> {
    let frame = obs.pixels.mapv(crate::datastore::normalize_pixel);
    let frame = frame
        .into_shape_with_order((1, wm.frame_len()))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut draw = match mode {
        ActMode::Explore => Draw::Sample(rng),
        ActMode::Eval => Draw::Mode,
    };
    let (post, _) = wm.observe_values(
        &carry.state,
        &carry.prev_action,
        &frame,
        &[carry.first],
        &mut draw,
    )?;
    let mut g = Graph::new();
    let p = actor.params.bind(&mut g);
    let f = g.constant(post.feat());
    let pv = actor.policy(&mut g, &p, f);
    let a = match mode {
        ActMode::Explore => actor.sample(&mut g, pv, Some(rng)),
        ActMode::Eval => actor.sample(&mut g, pv, None),
    };
    let action = g.value(a).clone();
    let out = action.row(0).to_vec();
    Ok((
        out,
        AgentCarry {
            state: post,
            prev_action: action,
            first: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::envgrid::{make_env, EnvSpec};
    use rand::{Rng, SeedableRng};

    #[test]
    fn lambda_collapses() {
        let r = [1.0, 1.0];
        let g = 0.99;
        let d = [g, g];
        let v = [0.3, -0.2, 5.0];
        let zero = lambda_returns(&r, &d, &v, 0.0).unwrap();
        assert_eq!(zero, vec![r[0] + d[0] * v[1], r[1] + d[1] * v[2]]);
        let one = lambda_returns(&r, &d, &v, 1.0).unwrap();
        assert_eq!(one[0], 1.0 + g * (1.0 + g * 5.0));
        assert!(lambda_returns(&r, &d, &v, 1.5).is_err());
        assert!(lambda_returns(&r, &d, &v[..2], 0.5).is_err());
    }

    #[test]
    fn graph_returns_match_array_returns() {
        let mut rng = Prng::seed_from_u64(0);
        let h = 6;
        let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let expected = lambda_returns(&r, &d, &v, 0.95).unwrap();
        let mut g = Graph::new();
        let col = |g: &mut Graph, x: f64| g.constant(Array2::from_elem((1, 1), x));
        let rv: Vec<Var> = r.iter().map(|&x| col(&mut g, x)).collect();
        let dv: Vec<Var> = d.iter().map(|&x| col(&mut g, x)).collect();
        let vv: Vec<Var> = v.iter().map(|&x| col(&mut g, x)).collect();
        let out = lambda_returns_graph(&mut g, &rv, &dv, &vv, 0.95);
        for (o, e) in out.iter().zip(&expected) {
            assert!((g.scalar(*o) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_without_source_is_plain_regression() {
        let mut rng = Prng::seed_from_u64(1);
        let c = Critic::new(3, 4, &mut rng);
        let feats = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.1);
        let targets = Array2::from_elem((5, 1), 0.5);
        let out = critic_loss_on(&c, None, &feats, &targets, 0.0, 1.0).unwrap();
        let v = c.values(&feats);
        let td = v.iter().map(|x| 0.5 * (x - 0.5).powi(2)).sum::<f64>() / 5.0;
        assert!((out.report.total - td).abs() < 1e-12);
        assert!(critic_loss_on(&c, None, &feats, &targets, 0.2, 1.0).is_err());
    }

    #[test]
    fn source_branch_wins_the_max() {
        let mut rng = Prng::seed_from_u64(2);
        let mut tgt = Critic::new(3, 4, &mut rng);
        let mut src = Critic::new(3, 4, &mut rng);
        tgt.set_constant(2.0);
        src.set_constant(3.0);
        let feats = Array2::from_elem((1, 3), 0.2);
        let targets = Array2::from_elem((1, 1), 2.0);
        let alpha = 0.2;
        let with = critic_loss_on(&tgt, Some(&src), &feats, &targets, alpha, 1.0).unwrap();
        let without = critic_loss_on(&tgt, None, &feats, &targets, 0.0, 1.0).unwrap();
        assert_eq!(with.report.regularizer, 3.0);
        assert!((with.report.total - (with.report.td_loss + 3.0 * alpha)).abs() < 1e-15);
        assert_eq!(with.report.fraction_clamped, 0.0);
        assert_eq!(with.grads, without.grads);
        assert!(with
            .source_grads
            .unwrap()
            .iter()
            .all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn target_branch_gradient_is_alpha_zeta() {
        let mut rng = Prng::seed_from_u64(3);
        let mut tgt = Critic::new(3, 4, &mut rng);
        let mut src = Critic::new(3, 4, &mut rng);
        tgt.set_constant(3.0);
        src.set_constant(2.0);
        let feats = Array2::from_elem((1, 3), 0.2);
        // target equal to v so the regression term has zero gradient
        let targets = Array2::from_elem((1, 1), 3.0);
        let (alpha, zeta) = (0.2, 1.0);
        let out = critic_loss_on(&tgt, Some(&src), &feats, &targets, alpha, zeta).unwrap();
        assert_eq!(out.report.fraction_clamped, 1.0);
        // output bias gradient equals ∂loss/∂v
        let bias = out.grads.len() - 1;
        assert!((out.grads[bias][[0, 0]] - alpha * zeta).abs() < 1e-15);
    }

    fn tiny_world(action_dim: usize, seed: u64) -> (WorldModel, Actor, Critic) {
        let mc = ModelConfig {
            deter: 5,
            groups: 2,
            classes: 3,
            hidden: 6,
            ..ModelConfig::default()
        };
        let mut rng = Prng::seed_from_u64(seed);
        let wm = WorldModel::new(&mc, (2, 2, 3), action_dim, &mut rng);
        let actor = Actor::new(mc.feat(), 6, action_dim, 0.1, &mut rng);
        let critic = Critic::new(mc.feat(), 6, &mut rng);
        (wm, actor, critic)
    }

    #[test]
    fn rollout_shapes_and_reproducibility() {
        let (wm, actor, critic) = tiny_world(2, 4);
        let start = wm.initial_state(3);
        let run = |seed| {
            let img = imagine_trajectories(
                &wm,
                &actor,
                &critic,
                &start,
                4,
                0.99,
                &mut Prng::seed_from_u64(seed),
            )
            .unwrap();
            img.rollout()
        };
        let r = run(1);
        assert_eq!(r.feats.len(), 5);
        assert_eq!(r.actions.len(), 4);
        assert_eq!(r.rewards.dim(), (3, 4));
        assert_eq!(r.values.dim(), (3, 5));
        assert!(r.actions.iter().all(|a| a.iter().all(|x| x.abs() < 1.0)));
        assert_eq!(r, run(1));
        let ret = r.lambda_returns(0.95).unwrap();
        let expected = lambda_returns(
            &r.rewards.row(1).to_vec(),
            &r.discounts.row(1).to_vec(),
            &r.values.row(1).to_vec(),
            0.95,
        )
        .unwrap();
        assert_eq!(ret.row(1).to_vec(), expected);
        let one = run(2);
        assert_eq!(
            imagine_trajectories(
                &wm,
                &actor,
                &critic,
                &start,
                1,
                0.99,
                &mut Prng::seed_from_u64(2)
            )
            .unwrap()
            .rollout()
            .actions
            .len(),
            1
        );
        assert!(imagine_trajectories(
            &wm,
            &actor,
            &critic,
            &start,
            0,
            0.99,
            &mut Prng::seed_from_u64(2)
        )
        .is_err());
        assert_eq!(one.horizon, 4);
    }

    #[test]
    fn act_modes() {
        let (wm, actor, _) = {
            let mc = ModelConfig {
                deter: 5,
                groups: 2,
                classes: 3,
                hidden: 6,
                ..ModelConfig::default()
            };
            let mut rng = Prng::seed_from_u64(5);
            let wm = WorldModel::new(&mc, (8, 8, 3), 2, &mut rng);
            let actor = Actor::new(mc.feat(), 6, 2, 0.1, &mut rng);
            (wm, actor, ())
        };
        let mut env = make_env(EnvSpec {
            image_size: 8,
            ..EnvSpec::source(0)
        })
        .unwrap();
        let obs = env.reset();
        let carry = AgentCarry::new(&wm);
        let (a1, c1) = act(
            &actor,
            &wm,
            &carry,
            &obs,
            ActMode::Eval,
            &mut Prng::seed_from_u64(0),
        )
        .unwrap();
        let (a2, c2) = act(
            &actor,
            &wm,
            &carry,
            &obs,
            ActMode::Eval,
            &mut Prng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!((a1, c1), (a2, c2));
        let (e1, _) = act(
            &actor,
            &wm,
            &carry,
            &obs,
            ActMode::Explore,
            &mut Prng::seed_from_u64(7),
        )
        .unwrap();
        let (e2, _) = act(
            &actor,
            &wm,
            &carry,
            &obs,
            ActMode::Explore,
            &mut Prng::seed_from_u64(7),
        )
        .unwrap();
        assert_eq!(e1, e2);
        assert!(e1.iter().all(|x| x.abs() < 1.0));
    }
}
