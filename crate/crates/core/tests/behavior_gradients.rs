use coworld::behavior::{actor_loss, critic_loss_on, imagine_trajectories, Actor, Critic};
use coworld::config::ModelConfig;
use coworld::worldmodel::{Draw, RssmState, WorldModel};
use coworld::Prng;
use ndarray::Array2;
use rand::{Rng, SeedableRng};

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn flat(grads: &[Array2<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.iter().copied()).collect()
}

fn random_feats(n: usize, f: usize, seed: u64) -> Array2<f64> {
    let mut rng = Prng::seed_from_u64(seed);
    Array2::from_shape_fn((n, f), |_| rng.gen_range(-1.5..1.5))
}

/// Central differences of `loss` over every scalar of `params`.
fn central_differences(
    tensors: usize,
    get: &mut dyn FnMut(usize) -> Array2<f64>,
    set: &mut dyn FnMut(usize, Array2<f64>),
    loss: &mut dyn FnMut() -> f64,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![];
    for t in 0..tensors {
        let base = get(t);
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            set(t, plus);
            let lp = loss();
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            set(t, minus);
            let lm = loss();
            set(t, base.clone());
            out.push((lp - lm) / (2.0 * eps));
        }
    }
    out
}

#[test]
fn tiny_critic_loss_matches_finite_differences() {
    let critic = Critic::new(3, 4, &mut Prng::seed_from_u64(1));
    assert!(critic.params.num_scalars() <= 50);
    let feats = random_feats(12, 3, 2);
    let targets = random_feats(12, 1, 3);
    let (alpha, zeta) = (0.3, 1.2);

    // source value sits between two scaled target values so states fall on both sides
    let mut scaled: Vec<f64> = critic.values(&feats).iter().map(|v| zeta * v).collect();
    scaled.sort_by(f64::total_cmp);
    let mid = 0.5 * (scaled[5] + scaled[6]);
    assert!(scaled[6] - scaled[5] > 1e-4);
    let mut source = Critic::new(3, 4, &mut Prng::seed_from_u64(9));
    source.set_constant(mid);

    let out = critic_loss_on(&critic, Some(&source), &feats, &targets, alpha, zeta).unwrap();
    assert!(out.report.fraction_clamped > 0.0 && out.report.fraction_clamped < 1.0);
    let analytic = flat(&out.grads);

    let n = critic.params.len();
    let cell = std::cell::RefCell::new(critic);
    let numeric = central_differences(
        n,
        &mut |t| cell.borrow().params.tensors()[t].clone(),
        &mut |t, v| cell.borrow_mut().params.tensors_mut()[t] = v,
        &mut || {
            critic_loss_on(&cell.borrow(), Some(&source), &feats, &targets, alpha, zeta)
                .unwrap()
                .report
                .total
        },
        1e-6,
    );
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn regularizer_gradient_is_zero_per_state_when_source_wins() {
    let critic = Critic::new(3, 4, &mut Prng::seed_from_u64(4));
    let feats = random_feats(40, 3, 5);
    let targets = random_feats(40, 1, 6);
    let zeta = 0.8;
    let values = critic.values(&feats);
    let mut source = Critic::new(3, 4, &mut Prng::seed_from_u64(7));
    source.set_constant(0.0);
    let mut checked = 0;
    for r in 0..feats.nrows() {
        let f = feats.slice(ndarray::s![r..r + 1, ..]).to_owned();
        let t = targets.slice(ndarray::s![r..r + 1, ..]).to_owned();
        if zeta * values[[r, 0]] >= 0.0 {
            continue;
        }
        checked += 1;
        let with = critic_loss_on(&critic, Some(&source), &f, &t, 0.5, zeta).unwrap();
        let without = critic_loss_on(&critic, None, &f, &t, 0.0, zeta).unwrap();
        assert_eq!(with.grads, without.grads, "state {r}");
        assert!(with.source_grads.unwrap().iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }
    assert!(checked >= 5, "only {checked} states with the source branch active");
}

#[test]
fn batch_regularizer_gradient_counts_only_target_branch_states() {
    let critic = Critic::new(3, 4, &mut Prng::seed_from_u64(10));
    let feats = random_feats(30, 3, 11);
    let targets = random_feats(30, 1, 12);
    let (alpha, zeta) = (0.4, 1.0);
    let values = critic.values(&feats);
    let mut source = Critic::new(3, 4, &mut Prng::seed_from_u64(13));
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let c = 0.5 * (sorted[14] + sorted[15]);
    source.set_constant(c);

    let reg = |f: &Array2<f64>, t: &Array2<f64>| -> Vec<f64> {
        let a = flat(&critic_loss_on(&critic, Some(&source), f, t, alpha, zeta).unwrap().grads);
        let b = flat(&critic_loss_on(&critic, None, f, t, 0.0, zeta).unwrap().grads);
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    };
    let all = reg(&feats, &targets);
    let winners: Vec<usize> = (0..30).filter(|&r| zeta * values[[r, 0]] >= c).collect();
    assert_eq!(winners.len(), 15);
    let sub = feats.select(ndarray::Axis(0), &winners);
    let sub_t = targets.select(ndarray::Axis(0), &winners);
    // restricting to the winners rescales the mean by |winners| / N
    let expected: Vec<f64> = reg(&sub, &sub_t).iter().map(|g| g * 15.0 / 30.0).collect();
    for (a, e) in all.iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

fn toy_world(seed: u64) -> (WorldModel, Actor, Critic, RssmState) {
    let model = ModelConfig {
        deter: 3,
        groups: 2,
        classes: 2,
        hidden: 4,
        ..ModelConfig::default()
    };
    let mut rng = Prng::seed_from_u64(seed);
    let mut wm = WorldModel::new(&model, (2, 2, 3), 1, &mut rng);
    let actor = Actor::new(model.feat(), 4, 1, 0.1, &mut rng);
    let mut critic = Critic::new(model.feat(), 4, &mut rng);
    // heads read only the deterministic part, so the loss is smooth in the actor
    let d = model.deter;
    let names: Vec<String> = wm.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if name == "reward.0.w" || name == "discount.0.w" {
            wm.params.tensors_mut()[i].slice_mut(ndarray::s![d.., ..]).fill(0.0);
        }
    }
    let ci = critic.params.names().iter().position(|n| n == "critic.0.w").unwrap();
    critic.params.tensors_mut()[ci].slice_mut(ndarray::s![d.., ..]).fill(0.0);

    let n = 5;
    let obs = random_feats(n, 12, seed + 1);
    let start = wm
        .observe_values(&wm.initial_state(n), &Array2::zeros((n, 1)), &obs, &vec![true; n], &mut Draw::Mode)
        .unwrap()
        .0;
    (wm, actor, critic, start)
}

#[test]
fn one_step_actor_loss_matches_finite_differences() {
    let (wm, actor, critic, start) = toy_world(20);
    let (lambda, eta) = (0.95, 0.05);
    let loss_and_grads = |a: &Actor| {
        let mut img = imagine_trajectories(&wm, a, &critic, &start, 1, 0.99, &mut Prng::seed_from_u64(77)).unwrap();
        let (report, grads, _) = actor_loss(&mut img, lambda, eta).unwrap();
        (report.loss, grads)
    };
    let analytic = flat(&loss_and_grads(&actor).1);
    assert!(analytic.iter().any(|g| g.abs() > 1e-6));

    let n = actor.params.len();
    let cell = std::cell::RefCell::new(actor);
    let numeric = central_differences(
        n,
        &mut |t| cell.borrow().params.tensors()[t].clone(),
        &mut |t, v| cell.borrow_mut().params.tensors_mut()[t] = v,
        &mut || loss_and_grads(&cell.borrow()).0,
        1e-6,
    );
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn actor_gradient_flows_through_imagined_dynamics() {
    let (wm, actor, mut critic, start) = toy_world(30);
    // with a constant critic and no entropy bonus, only r̂(s₁) and γ·σ(disc(s₁)) carry signal
    critic.set_constant(0.5);
    let mut img = imagine_trajectories(&wm, &actor, &critic, &start, 1, 0.99, &mut Prng::seed_from_u64(3)).unwrap();
    let (_, grads, _) = actor_loss(&mut img, 0.95, 0.0).unwrap();
    assert!(flat(&grads).iter().any(|g| g.abs() > 1e-8));
}
