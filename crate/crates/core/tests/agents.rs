//! Agent losses, targets, updates and acting.

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gruode::agents::{
    normal_block, tanh_gaussian_log_prob, ActMode, Agent, AgentConfig, AgentKind, NOISE_CRITIC_Z,
    NOISE_TARGET_ACTION,
};
use gruode::autodiff::{Checkpoint, ParamSet, Tape, Tensor};
use gruode::envs::{EnvSpec, EnvStep, PomdpEnv};
use gruode::gradcheck::tiny_agent;
use gruode::replay::{ReplayBuffer, SequenceBatch};
use gruode::trace::Episode;

// ---------------------------------------------------------------------------
// Scalar re-implementation of the networks, used as an independent oracle.

fn weights<'a>(ps: &'a ParamSet, name: &str) -> (&'a Tensor, &'a Tensor) {
    let w = ps.find(&format!("{name}.weight")).unwrap_or_else(|| panic!("{name}"));
    let b = ps.find(&format!("{name}.bias")).unwrap();
    (&ps.get(w).value, &ps.get(b).value)
}

fn lin(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let (w, b) = weights(ps, name);
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in, "{name}");
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn tanh(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

fn sigmoid(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

struct ScalarEncoder<'a> {
    ps: &'a ParamSet,
    prefix: &'a str,
    dt_scale: f64,
}

struct EncStep {
    h: Vec<f64>,
    obs_embed: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl ScalarEncoder<'_> {
    fn step(&self, h: &[f64], o: &[f64], a: &[f64], r: f64, dt: f64) -> EncStep {
        let n = |s: &str| format!("{}.{s}", self.prefix);
        let eo = relu(lin(self.ps, &n("embed.obs"), o));
        let ea = relu(lin(self.ps, &n("embed.action"), a));
        let er = relu(lin(self.ps, &n("embed.reward"), &[r]));
        let x = cat(&[&eo, &ea, &er]);
        let hx = cat(&[h, &x]);
        let u = sigmoid(lin(self.ps, &n("gru.update"), &hx));
        let g = sigmoid(lin(self.ps, &n("gru.reset"), &hx));
        let gh: Vec<f64> = g.iter().zip(h).map(|(g, h)| g * h).collect();
        let c = tanh(lin(self.ps, &n("gru.candidate"), &cat(&[&gh, &x])));
        let ht: Vec<f64> = (0..h.len()).map(|i| h[i] + u[i] * (c[i] - h[i])).collect();
        // One Euler step of the tanh vector field.
        let f = tanh(lin(self.ps, &n("dynamics.0"), &ht));
        let step = dt * self.dt_scale;
        let h1: Vec<f64> = ht.iter().zip(&f).map(|(h, f)| h + step * f).collect();
        let mu = lin(self.ps, &n("head.mean"), &h1);
        let sigma = lin(self.ps, &n("head.scale"), &h1)
            .into_iter()
            .map(|s| (1.0 + s.exp()).ln() + 1e-4)
            .collect();
        EncStep {
            h: h1,
            obs_embed: eo,
            mu,
            sigma,
        }
    }
}

fn kl(mu: &[f64], s: &[f64], pm: &[f64], ps: &[f64]) -> f64 {
    (0..mu.len())
        .map(|i| (ps[i] / s[i]).ln() + ((mu[i] - pm[i]).powi(2) + s[i] * s[i]) / (2.0 * ps[i] * ps[i]) - 0.5)
        .sum()
}

fn q(ps: &ParamSet, head: &str, e: &[f64], a: &[f64], z: &[f64]) -> f64 {
    let h = relu(lin(ps, &format!("critic.{head}.0"), &cat(&[e, a, z])));
    lin(ps, &format!("critic.{head}.1"), &h)[0]
}

fn td3_policy(ps: &ParamSet, e: &[f64], z: &[f64]) -> Vec<f64> {
    let h = relu(lin(ps, "actor.policy.0", &cat(&[e, z])));
    tanh(lin(ps, "actor.policy.1", &h))
}

/// Per-row unroll over `positions` positions; `eps(k)` supplies sample noise.
fn unroll_row(
    enc: &ScalarEncoder,
    batch: &SequenceBatch,
    row: usize,
    positions: usize,
    eps: impl Fn(usize) -> Option<Vec<f64>>,
) -> (Vec<EncStep>, Vec<Vec<f64>>, Vec<f64>) {
    let hidden = weights(enc.ps, &format!("{}.head.mean", enc.prefix)).0.shape()[0];
    let dz = weights(enc.ps, &format!("{}.head.mean", enc.prefix)).0.shape()[1];
    let mut h = vec![0.0; hidden];
    let (mut pm, mut psig) = (vec![0.0; dz], vec![1.0; dz]);
    let (mut steps, mut zs, mut kls) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..positions {
        let s = enc.step(
            &h,
            batch.obs[k].row(row),
            batch.prev_action[k].row(row),
            batch.prev_reward[k].row(row)[0],
            batch.dt[k][row],
        );
        kls.push(kl(&s.mu, &s.sigma, &pm, &psig));
        zs.push(match eps(k) {
            Some(e) => (0..dz).map(|i| s.mu[i] + s.sigma[i] * e[i]).collect(),
            None => s.mu.clone(),
        });
        h = s.h.clone();
        pm = s.mu.clone();
        psig = s.sigma.clone();
        steps.push(s);
    }
    (steps, zs, kls)
}

/// TD3 critic loss computed row by row with plain floats.
fn scalar_td3_critic_loss(agent: &Agent, batch: &SequenceBatch, seed: u64) -> f64 {
    let cfg = &agent.config;
    let (l, b) = (batch.seq_len(), batch.batch_size());
    let (dz, ad) = (cfg.encoder.context_dim, agent.action_dim);
    let enc = |ps, prefix| ScalarEncoder {
        ps,
        prefix,
        dt_scale: cfg.dt_scale,
    };
    let valid: f64 = batch.mask.iter().map(|m| m.data().iter().sum::<f64>()).sum();
    let (mut td, mut k_sum) = (0.0, 0.0);
    for row in 0..b {
        let (online, z, kls) = unroll_row(&enc(&agent.critic, "critic.encoder"), batch, row, l, |k| {
            Some(normal_block(seed, NOISE_CRITIC_Z, k, b, dz).row(row).to_vec())
        });
        let (targ, _, _) =
            unroll_row(&enc(&agent.critic_target, "critic.encoder"), batch, row, l + 1, |_| None);
        let (targ_actor, _, _) =
            unroll_row(&enc(&agent.actor_target, "actor.encoder"), batch, row, l + 1, |_| None);
        for k in 0..l {
            let mask = batch.mask[k].row(row)[0];
            let next = &targ[k + 1];
            let na = &targ_actor[k + 1];
            let noise = normal_block(seed, NOISE_TARGET_ACTION, k + 1, b, ad);
            let a_next: Vec<f64> = td3_policy(&agent.actor_target, &na.obs_embed, &na.mu)
                .iter()
                .zip(noise.row(row))
                .map(|(a, e)| {
                    let n = (cfg.target_noise * e).clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
                    (a + n).clamp(-1.0, 1.0)
                })
                .collect();
            let q1t = q(&agent.critic_target, "q1", &next.obs_embed, &a_next, &next.mu);
            let q2t = q(&agent.critic_target, "q2", &next.obs_embed, &a_next, &next.mu);
            let r = batch.reward[k].row(row)[0];
            let d = batch.done[k].row(row)[0];
            let y = r + cfg.gamma * (1.0 - d) * q1t.min(q2t);
            let a = batch.action[k].row(row);
            for head in ["q1", "q2"] {
                let qv = q(&agent.critic, head, &online[k].obs_embed, a, &z[k]);
                td += mask * (qv - y).powi(2) / valid;
            }
            k_sum += mask * kls[k] / b as f64;
        }
    }
    td + cfg.lambda_critic * k_sum
}

// ---------------------------------------------------------------------------

fn critic_loss(agent: &Agent, batch: &SequenceBatch, seed: u64) -> f64 {
    let mut tape = Tape::new();
    match agent.config.kind {
        AgentKind::Td3 => agent.td3_critic_loss(&mut tape, batch, seed),
        AgentKind::Sac => agent.sac_critic_loss(&mut tape, batch, seed),
    }
    .unwrap()
    .value
}

fn actor_loss(agent: &Agent, batch: &SequenceBatch, seed: u64) -> f64 {
    let mut tape = Tape::new();
    match agent.config.kind {
        AgentKind::Td3 => agent.td3_actor_loss(&mut tape, batch, seed),
        AgentKind::Sac => agent.sac_actor_loss(&mut tape, batch, seed),
    }
    .unwrap()
    .value
}

#[test]
fn critic_loss_matches_hand_unrolled_oracle() {
    for seed in [3, 4] {
        let (agent, batch) = tiny_agent(AgentKind::Td3, false, seed).unwrap();
        let got = critic_loss(&agent, &batch, 77);
        let want = scalar_td3_critic_loss(&agent, &batch, 77);
        assert_relative_eq!(got, want, max_relative = 1e-12);
        // Two-step prefix as well.
        let short = batch.prefix(2).unwrap();
        assert_relative_eq!(
            critic_loss(&agent, &short, 78),
            scalar_td3_critic_loss(&agent, &short, 78),
            max_relative = 1e-12
        );
    }
}

/// Overwrites every padded position with junk.
fn scramble_padding(batch: &SequenceBatch) -> SequenceBatch {
    let mut out = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut junk = |t: &mut Tensor, row: usize| {
        let cols = t.cols();
        for v in &mut t.data_mut()[row * cols..(row + 1) * cols] {
            *v = rng.random_range(-50.0..50.0);
        }
    };
    for (row, origin) in batch.origins.iter().enumerate() {
        for k in origin.valid..batch.seq_len() {
            junk(&mut out.action[k], row);
            junk(&mut out.reward[k], row);
            out.done[k].data_mut()[row] = 1.0;
        }
        for k in origin.valid + 1..=batch.seq_len() {
            junk(&mut out.obs[k], row);
            junk(&mut out.prev_action[k], row);
            junk(&mut out.prev_reward[k], row);
            out.dt[k][row] = 0.7;
        }
    }
    out
}

fn grads(
    agent: &Agent,
    batch: &SequenceBatch,
    actor: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let g = match (agent.config.kind, actor) {
        (AgentKind::Td3, false) => agent.td3_critic_loss(&mut tape, batch, 5),
        (AgentKind::Td3, true) => agent.td3_actor_loss(&mut tape, batch, 5),
        (AgentKind::Sac, false) => agent.sac_critic_loss(&mut tape, batch, 5),
        (AgentKind::Sac, true) => agent.sac_actor_loss(&mut tape, batch, 5),
    }
    .unwrap();
    tape.backward(g.loss).unwrap();
    let tree = if actor { &agent.actor } else { &agent.critic };
    let gs = tree
        .ids()
        .map(|id| tape.grad(g.bound[id]).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (g.value, gs)
}

#[test]
fn padded_positions_contribute_nothing() {
    for (kind, shared) in [
        (AgentKind::Td3, false),
        (AgentKind::Td3, true),
        (AgentKind::Sac, false),
    ] {
        let (agent, batch) = tiny_agent(kind, shared, 11).unwrap();
        assert!(batch.valid_steps() < batch.seq_len() * batch.batch_size());
        let junk = scramble_padding(&batch);
        for actor in [false, true] {
            let (v0, g0) = grads(&agent, &batch, actor);
            let (v1, g1) = grads(&agent, &junk, actor);
            assert_eq!(v0, v1, "{kind:?} shared={shared} actor={actor}");
            assert_eq!(g0, g1, "{kind:?} shared={shared} actor={actor}");
        }
    }
}

#[test]
fn padded_batch_equals_unpadded_prefix() {
    // A lone short episode padded to L = 8 against the same rows at L = 3.
    let (agent, _) = tiny_agent(AgentKind::Td3, false, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ep = random_episode(&mut rng, 3, true);
    let padded = SequenceBatch::assemble(&[(&ep, 0, 0)], 8).unwrap();
    let exact = SequenceBatch::assemble(&[(&ep, 0, 0)], 3).unwrap();
    assert_eq!(padded.valid_steps(), 3);
    for actor in [false, true] {
        let (v0, g0) = grads(&agent, &padded, actor);
        let (v1, g1) = grads(&agent, &exact, actor);
        assert_relative_eq!(v0, v1, max_relative = 1e-14);
        for (a, b) in g0.iter().flatten().zip(g1.iter().flatten()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }
}

fn random_episode(rng: &mut ChaCha8Rng, len: usize, terminal: bool) -> Episode {
    Episode::from_parts(
        2,
        1,
        (0..(len + 1) * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..=len).map(|_| rng.random_range(0.02..0.08)).collect(),
        terminal,
    )
    .unwrap()
}

#[test]
fn twin_target_never_exceeds_either_head() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        for seed in 0..5 {
            let (agent, batch) = tiny_agent(kind, false, seed).unwrap();
            let t = agent.td_target_parts(&batch, seed + 100).unwrap();
            let r: Vec<f64> = batch.reward.iter().flat_map(|x| x.data().to_vec()).collect();
            let d: Vec<f64> = batch.done.iter().flat_map(|x| x.data().to_vec()).collect();
            let g = agent.config.gamma;
            for i in 0..r.len() {
                let ent = t.entropy.as_ref().map_or(0.0, |e| e.data()[i]);
                let head = |q: &Tensor| r[i] + g * (1.0 - d[i]) * (q.data()[i] - ent);
                assert!(t.y.data()[i] <= head(&t.next_q1) + 1e-15);
                assert!(t.y.data()[i] <= head(&t.next_q2) + 1e-15);
                assert_eq!(t.y.data()[i], head(&t.next_q1).min(head(&t.next_q2)));
            }
        }
    }
}

#[test]
fn zero_discount_and_terminal_targets_are_rewards() {
    let (mut agent, mut batch) = tiny_agent(AgentKind::Td3, false, 2).unwrap();
    let y = agent.td_targets(&batch, 1).unwrap();
    for k in 0..batch.seq_len() {
        for row in 0..batch.batch_size() {
            if batch.done[k].data()[row] == 1.0 {
                assert_eq!(y.data()[k * batch.batch_size() + row], batch.reward[k].data()[row]);
            }
        }
    }
    assert!(batch.done.iter().any(|d| d.data().contains(&1.0)));

    agent.config.gamma = 0.0;
    for r in &mut batch.reward {
        r.data_mut().fill(5.0);
    }
    let y = agent.td_targets(&batch, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 5.0));
}

#[test]
fn sac_target_without_temperature_is_the_plain_twin_minimum() {
    let (mut agent, batch) = tiny_agent(AgentKind::Sac, false, 3).unwrap();
    let id = agent.log_alpha.ids().next().unwrap();
    agent.log_alpha.value_mut(id).data_mut()[0] = f64::NEG_INFINITY;
    assert_eq!(agent.alpha(), 0.0);
    let t = agent.td_target_parts(&batch, 4).unwrap();
    assert!(t.entropy.as_ref().unwrap().data().iter().all(|&e| e == 0.0));
    let r: Vec<f64> = batch.reward.iter().flat_map(|x| x.data().to_vec()).collect();
    let d: Vec<f64> = batch.done.iter().flat_map(|x| x.data().to_vec()).collect();
    for i in 0..r.len() {
        let want = r[i] + 0.99 * (1.0 - d[i]) * t.next_q1.data()[i].min(t.next_q2.data()[i]);
        assert_eq!(t.y.data()[i], want);
    }
}

#[test]
fn online_critic_does_not_move_td3_targets() {
    let (agent, batch) = tiny_agent(AgentKind::Td3, false, 6).unwrap();
    let before = agent.td_targets(&batch, 8).unwrap();
    let mut moved = agent.clone();
    let ids: Vec<_> = moved.critic.ids().collect();
    for id in ids {
        for v in moved.critic.value_mut(id).data_mut() {
            *v += 0.3;
        }
    }
    let ids: Vec<_> = moved.actor.ids().collect();
    for id in ids {
        for v in moved.actor.value_mut(id).data_mut() {
            *v -= 0.2;
        }
    }
    assert_eq!(moved.td_targets(&batch, 8).unwrap(), before);
}

#[test]
fn targets_receive_no_gradient_and_move_only_by_polyak() {
    let (mut agent, batch) = tiny_agent(AgentKind::Td3, false, 7).unwrap();
    let actor_t0 = agent.actor_target.clone();
    let critic_t0 = agent.critic_target.clone();
    agent.update(&batch).unwrap();
    // Policy delay 2: nothing moves on the first update.
    assert_eq!(values(&agent.actor_target), values(&actor_t0));
    assert_eq!(values(&agent.critic_target), values(&critic_t0));
    agent.update(&batch).unwrap();
    let tau = agent.config.tau;
    for (tree, t0, online) in [
        (&agent.actor_target, &actor_t0, &agent.actor),
        (&agent.critic_target, &critic_t0, &agent.critic),
    ] {
        for ((t, old), on) in values(tree).iter().zip(values(t0)).zip(values(online)) {
            assert_relative_eq!(*t, (1.0 - tau) * old + tau * on, epsilon = 1e-15);
        }
        assert!(tree.iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }
}

fn values(ps: &ParamSet) -> Vec<f64> {
    ps.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn policy_update_fires_once_per_delay() {
    for delay in [1, 2, 3] {
        let (mut agent, batch) = tiny_agent(AgentKind::Td3, false, 8).unwrap();
        agent.config.policy_delay = delay;
        let mut fired = Vec::new();
        for _ in 0..9 {
            fired.push(agent.update(&batch).unwrap().actor_loss.is_some());
        }
        let expected: Vec<bool> = (1..=9).map(|u| u % delay == 0).collect();
        assert_eq!(fired, expected);
        assert_eq!(agent.actor_updates, 9 / delay as u64);
        assert_eq!(agent.updates, 9);
    }
    let (mut sac, batch) = tiny_agent(AgentKind::Sac, false, 8).unwrap();
    for _ in 0..3 {
        assert!(sac.update(&batch).unwrap().actor_loss.is_some());
    }
}

#[test]
fn one_small_critic_step_decreases_the_batch_loss() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        for seed in 0..10 {
            let (mut agent, batch) = tiny_agent(kind, false, 200 + seed).unwrap();
            let before = critic_loss(&agent, &batch, 1);
            let mut tape = Tape::new();
            let g = match kind {
                AgentKind::Td3 => agent.td3_critic_loss(&mut tape, &batch, 1),
                AgentKind::Sac => agent.sac_critic_loss(&mut tape, &batch, 1),
            }
            .unwrap();
            tape.backward(g.loss).unwrap();
            agent.critic.zero_grad();
            agent.critic.accumulate_grads(&tape, &g.bound);
            agent.critic_opt.lr = 1e-5;
            agent.critic_opt.step(&mut agent.critic).unwrap();
            let after = critic_loss(&agent, &batch, 1);
            assert!(after < before, "{kind:?} seed {seed}: {before} -> {after}");
        }
    }
}

/// Sets the last layer of both critic heads to output the constant `c`.
fn constant_critic(agent: &mut Agent, c: f64) {
    for head in ["q1", "q2"] {
        let w = agent.critic.find(&format!("critic.{head}.1.weight")).unwrap();
        let b = agent.critic.find(&format!("critic.{head}.1.bias")).unwrap();
        agent.critic.value_mut(w).data_mut().fill(0.0);
        agent.critic.value_mut(b).data_mut().fill(c);
    }
}

#[test]
fn constant_critic_gives_constant_actor_loss() {
    let (mut agent, batch) = tiny_agent(AgentKind::Td3, false, 13).unwrap();
    agent.config.lambda_actor = 0.0;
    constant_critic(&mut agent, 2.5);
    let (v, g) = grads(&agent, &batch, true);
    assert_eq!(v, -2.5);
    assert!(g.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn kl_weight_is_additive_in_actor_loss() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        let (agent, batch) = tiny_agent(kind, false, 14).unwrap();
        let mut no_kl = agent.clone();
        no_kl.config.lambda_actor = 0.0;
        let mut tape = Tape::new();
        let g = match kind {
            AgentKind::Td3 => agent.td3_actor_loss(&mut tape, &batch, 2),
            AgentKind::Sac => agent.sac_actor_loss(&mut tape, &batch, 2),
        }
        .unwrap();
        assert!(g.kl > 0.0);
        assert_relative_eq!(g.value, actor_loss(&no_kl, &batch, 2) + 0.5 * g.kl, max_relative = 1e-14);
    }
}

#[test]
fn near_deterministic_sac_policy_pays_more_with_temperature() {
    let (mut agent, batch) = tiny_agent(AgentKind::Sac, false, 15).unwrap();
    let w = agent.actor.find("actor.log_std.weight").unwrap();
    let b = agent.actor.find("actor.log_std.bias").unwrap();
    agent.actor.value_mut(w).data_mut().fill(0.0);
    agent.actor.value_mut(b).data_mut().fill(-20.0);
    let id = agent.log_alpha.ids().next().unwrap();
    let mut losses = Vec::new();
    let mut logp = 0.0;
    for alpha in [0.01, 0.1, 1.0] {
        agent.log_alpha.value_mut(id).data_mut()[0] = f64::ln(alpha);
        let mut tape = Tape::new();
        let g = agent.sac_actor_loss(&mut tape, &batch, 3).unwrap();
        logp = g.mean_log_prob;
        losses.push(g.value);
    }
    // log σ is clamped at −5, so log π is at least 5 − ln √(2π) − ½ε² − ....
    assert!(logp > 3.0, "{logp}");
    assert!(losses[0] < losses[1] && losses[1] < losses[2], "{losses:?}");
}

/// Probability mass of `a ∈ [lo, hi]` under `tanh(N(m, s²))` by Simpson's rule in `u`.
fn squashed_mass(m: f64, s: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.atanh(), hi.atanh());
    let n = 2000;
    let h = (b - a) / n as f64;
    let pdf = |u: f64| (-(u - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let mut sum = pdf(a) + pdf(b);
    for i in 1..n {
        sum += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

#[test]
fn squashed_log_prob_matches_quadrature() {
    for (m, log_s, eps) in [(0.3, -0.5, 0.7), (-1.1, 0.2, -0.4), (0.0, -1.5, 1.9), (2.0, 0.5, -1.0)] {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::matrix(1, 1, vec![m]).unwrap());
        let ls = tape.constant(Tensor::matrix(1, 1, vec![log_s]).unwrap());
        let (a, logp) =
            tanh_gaussian_log_prob(&mut tape, mean, ls, Tensor::matrix(1, 1, vec![eps]).unwrap())
                .unwrap();
        let a = tape.value(a).item();
        let s = f64::exp(log_s);
        assert_relative_eq!(a, (m + s * eps).tanh(), epsilon = 1e-15);
        let half = 1e-4 * (1.0 - a * a);
        let density = squashed_mass(m, s, a - half, a + half) / (2.0 * half);
        assert_relative_eq!(tape.value(logp).item().exp(), density, max_relative = 1e-4);
    }
}

#[test]
fn squashed_density_integrates_to_one() {
    // ∫ exp(log π(a)) da over (−1, 1) via the u-substitution, summed on a grid.
    let (m, log_s) = (0.4, -0.3);
    let n = 20_000;
    let (lo, hi) = (-8.0, 8.0);
    let du = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let u = lo + (i as f64 + 0.5) * du;
        let eps = (u - m) / f64::exp(log_s);
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::matrix(1, 1, vec![m]).unwrap());
        let ls = tape.constant(Tensor::matrix(1, 1, vec![log_s]).unwrap());
        let (_, logp) =
            tanh_gaussian_log_prob(&mut tape, mean, ls, Tensor::matrix(1, 1, vec![eps]).unwrap())
                .unwrap();
        // da = (1 − tanh² u) du
        total += tape.value(logp).item().exp() * (1.0 - u.tanh().powi(2)) * du;
    }
    assert_relative_eq!(total, 1.0, epsilon = 1e-6);
}

fn first_step(obs_dim: usize) -> EnvStep {
    EnvStep {
        observation: vec![0.2; obs_dim],
        reward: 0.0,
        done: false,
        truncated: false,
        dt: 0.05,
    }
}

#[test]
fn eval_actions_are_deterministic() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        let (agent, _) = tiny_agent(kind, false, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run = |rng: &mut ChaCha8Rng| {
            let mut s = agent.start_episode();
            (0..5)
                .map(|_| agent.act(&mut s, &first_step(2), ActMode::Eval, rng).unwrap().action)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&mut rng), run(&mut rng));
    }
}

#[test]
fn actions_stay_in_bounds() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        let (mut agent, _) = tiny_agent(kind, false, 17).unwrap();
        // Saturate the policy so bounds are actually exercised.
        let ids: Vec<_> = agent.actor.ids().collect();
        for id in ids {
            for v in agent.actor.value_mut(id).data_mut() {
                *v *= 40.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = agent.start_episode();
        let mut saturated = 0;
        for i in 0..100_000 {
            if i % 200 == 0 {
                state = agent.start_episode();
            }
            let step = EnvStep {
                observation: vec![rng.random_range(-1e3..1e3), rng.random_range(-10.0..10.0)],
                reward: rng.random_range(-20.0..0.0),
                done: false,
                truncated: false,
                dt: rng.random_range(1e-3..0.1),
            };
            let mode = if i % 2 == 0 { ActMode::Explore } else { ActMode::Eval };
            let a = agent.act(&mut state, &step, mode, &mut rng).unwrap().action;
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)), "{a:?}");
            saturated += usize::from(a[0].abs() > 0.99);
        }
        assert!(saturated > 0);
    }
}

#[test]
fn exploration_noise_is_centred_on_the_eval_action() {
    let (agent, _) = tiny_agent(AgentKind::Td3, false, 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = agent.start_episode();
    let eval = agent
        .act(&mut base.clone(), &first_step(2), ActMode::Eval, &mut rng)
        .unwrap()
        .action[0];
    assert!(eval.abs() < 0.5);
    let n = 10_000;
    let mut sum = 0.0;
    for _ in 0..n {
        sum += agent
            .act(&mut base.clone(), &first_step(2), ActMode::Explore, &mut rng)
            .unwrap()
            .action[0];
    }
    // Standard error 0.1/√n = 0.001.
    assert!((sum / n as f64 - eval).abs() < 0.004, "{} vs {eval}", sum / n as f64);
}

#[test]
fn shared_encoder_has_fewer_parameters() {
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        let (sep, _) = tiny_agent(kind, false, 1).unwrap();
        let (shared, _) = tiny_agent(kind, true, 1).unwrap();
        assert!(shared.num_parameters() < sep.num_parameters());
        assert!(shared.actor.iter().all(|p| !p.name.contains("encoder")));
    }
}

#[test]
fn separate_actor_encoder_is_isolated_from_critic_loss() {
    let (agent, batch) = tiny_agent(AgentKind::Td3, false, 19).unwrap();
    let actor_grads = |critic_weight: f64| {
        let mut tape = Tape::new();
        let a = agent.td3_actor_loss(&mut tape, &batch, 4).unwrap();
        let c = agent.td3_critic_loss(&mut tape, &batch, 4).unwrap();
        let scaled = tape.scale(c.loss, critic_weight);
        let total = tape.add(a.loss, scaled).unwrap();
        tape.backward(total).unwrap();
        agent
            .actor
            .iter()
            .zip(agent.actor.ids())
            .filter(|(p, _)| p.name.starts_with("actor.encoder"))
            .map(|(_, id)| tape.grad(a.bound[id]).unwrap().to_vec())
            .collect::<Vec<_>>()
    };
    let with = actor_grads(1.0);
    assert!(!with.is_empty());
    assert_eq!(with, actor_grads(0.0));
}

fn pendulum_batch(seed: u64) -> (EnvSpec, SequenceBatch) {
    let spec = EnvSpec::pendulum_p();
    let mut env = PomdpEnv::new(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = ReplayBuffer::new(10_000);
    for _ in 0..2 {
        let mut step = env.reset();
        let mut ep = Episode::start(&step, 1);
        while !step.episode_over() {
            let a = [rng.random_range(-1.0..1.0)];
            step = env.step(&a).unwrap();
            ep.record(&a, &step).unwrap();
        }
        buffer.push_episode(ep).unwrap();
    }
    (spec, buffer.sample_batch(&mut rng, 4, 16).unwrap())
}

#[test]
fn both_encoder_modes_train_on_pendulum() {
    let (spec, batch) = pendulum_batch(0);
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        for shared in [false, true] {
            let mut config = AgentConfig {
                kind,
                shared_encoder: shared,
                policy_hidden: vec![32, 32],
                q_hidden: vec![32, 32],
                dt_scale: 2.0,
                ..AgentConfig::default()
            };
            config.encoder.hidden_dim = 16;
            config.encoder.dynamics_sizes = vec![16, 16];
            config.encoder.context_dim = 4;
            let mut agent = Agent::new(config, spec.obs_dim(), spec.action_dim(), 3).unwrap();
            for _ in 0..2 {
                let s = agent.update(&batch).unwrap();
                assert!(s.critic_loss.is_finite());
                assert!(s.actor_loss.is_none_or(f64::is_finite));
            }
        }
    }
}

#[test]
fn checkpoint_restores_behaviour() {
    let (mut agent, batch) = tiny_agent(AgentKind::Sac, false, 20).unwrap();
    for _ in 0..3 {
        agent.update(&batch).unwrap();
    }
    let mut ckpt = Checkpoint::new();
    agent.save_into(&mut ckpt);
    let bytes = ckpt.to_bytes();
    let (mut fresh, _) = tiny_agent(AgentKind::Sac, false, 999).unwrap();
    fresh
        .load_from(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap())
        .unwrap();
    assert_eq!(fresh.updates, 3);
    assert_eq!(fresh.alpha(), agent.alpha());
    assert_eq!(critic_loss(&fresh, &batch, 5), critic_loss(&agent, &batch, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s1 = agent.start_episode();
    let mut s2 = fresh.start_episode();
    for _ in 0..4 {
        let a1 = agent.act(&mut s1, &first_step(2), ActMode::Eval, &mut rng).unwrap();
        let a2 = fresh.act(&mut s2, &first_step(2), ActMode::Eval, &mut rng).unwrap();
        assert_eq!(a1, a2);
    }
    let (td3, _) = tiny_agent(AgentKind::Td3, false, 1).unwrap();
    let mut wrong = td3.clone();
    assert!(wrong.load_from(&ckpt).is_err());
}

#[test]
fn wrong_kind_loss_is_an_error() {
    let (agent, batch) = tiny_agent(AgentKind::Td3, false, 1).unwrap();
    let mut tape = Tape::new();
    assert!(agent.sac_actor_loss(&mut tape, &batch, 0).is_err());
}
