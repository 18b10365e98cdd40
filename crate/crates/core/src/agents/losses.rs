//! TD3 and SAC objectives over replayed subsequences.
//!
//! Every per-step quantity is stacked time-major into `[L·B, ·]` so the
//! value and policy heads run once per batch. Row `k·B + b` is step `k`
//! of sequence `b`.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Agent, AgentKind, PolicyOut, LOG_STD_MAX, LOG_STD_MIN};
use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::encoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::replay::SequenceBatch;

/// Noise stream identifiers, one per random quantity in an update.
/// Noise stream ids for [`normal_block`].
pub const NOISE_CRITIC_Z: u64 = 1;
pub const NOISE_ACTOR_Z: u64 = 2;
pub const NOISE_TARGET_ACTION: u64 = 3;
pub const NOISE_NEXT_ACTION: u64 = 4;
pub const NOISE_ACTION: u64 = 5;

/// A differentiable loss together with the binding of the tree it trains.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub loss: Var,
    pub bound: Bound,
    pub value: f64,
    /// Regulariser `K` (masked sum over steps, divided by batch size), unweighted.
    pub kl: f64,
    /// SAC only: mean `log π` over valid steps.
    pub mean_log_prob: f64,
}

/// Bootstrap target and the per-head values it was built from, each `[L·B, 1]`.
#[derive(Clone, Debug)]
pub struct Targets {
    pub y: Tensor,
    pub next_q1: Tensor,
    pub next_q2: Tensor,
    /// SAC only: `α log π(ã'|o', z')`.
    pub entropy: Option<Tensor>,
}

/// Encoder outputs at each position of a batch.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub obs_embed: Vec<Var>,
    pub mu: Vec<Var>,
    /// Reparameterised sample, or `mu` when unrolled without noise.
    pub z: Vec<Var>,
    pub kl: Vec<Var>,
}

/// Standard normal block for one noise stream and position. Depends only
/// on `(seed, stream, position)` so padded and unpadded batches agree.
pub fn normal_block(seed: u64, stream: u64, position: usize, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | position as u64);
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// `[L·B, c]` noise assembled from per-position blocks `first..first+len`.
fn stacked_noise(
    seed: u64,
    stream: u64,
    first: usize,
    len: usize,
    rows: usize,
    cols: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(len * rows * cols);
    for k in first..first + len {
        data.extend(normal_block(seed, stream, k, rows, cols).into_data());
    }
    Tensor::new(vec![len * rows, cols], data).expect("shape")
}

/// Stacks `tensors` along rows into one constant.
fn stacked_const(tape: &mut Tape, tensors: &[Tensor]) -> Result<Var> {
    let cols = tensors[0].cols();
    let rows: usize = tensors.iter().map(|t| t.rows()).sum();
    let data = tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(tape.constant(Tensor::new(vec![rows, cols], data)?))
}

fn stacked_tensor(tensors: &[Tensor]) -> Result<Tensor> {
    let cols = tensors[0].cols();
    let rows: usize = tensors.iter().map(|t| t.rows()).sum();
    let data = tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Errors on the first non-finite entry of a `[L·B, 1]` per-step loss.
fn check_finite(tape: &Tape, v: Var, batch: usize, what: &'static str) -> Result<()> {
    match tape.value(v).data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFiniteLoss {
            what,
            row: i % batch,
        }),
        None => Ok(()),
    }
}

/// Squashed-Gaussian sample and its log-density.
///
/// With `u = mean + exp(log_std)·ε` and `a = tanh(u)`,
/// `log π(a) = Σ_i [log N(u_i; mean_i, σ_i) − log(1 − tanh² u_i)]`, using
/// `log(1 − tanh² u) = 2(ln 2 − u − softplus(−2u))`. `log_std` is clamped
/// to `[LOG_STD_MIN, LOG_STD_MAX]`. Returns `(a, log π)` with `log π: [rows, 1]`.
pub fn tanh_gaussian_log_prob(
    tape: &mut Tape,
    mean: Var,
    log_std: Var,
    eps: Tensor,
) -> Result<(Var, Var)> {
    let ls = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
    let std = tape.exp(ls)?;
    let base = eps.map(|e| -0.5 * e * e - 0.5 * (2.0 * PI).ln());
    let u = tape.reparameterize(mean, std, eps)?;
    let a = tape.tanh(u);
    let neg2u = tape.scale(u, -2.0);
    let sp = tape.softplus(neg2u)?;
    let u_sp = tape.add(u, sp)?;
    let jac = tape.scale(u_sp, 2.0);
    let base = tape.constant(base);
    let per = tape.sub(base, ls)?;
    let per = tape.add(per, jac)?;
    let per = tape.add_scalar(per, -2.0 * LN_2);
    Ok((a, tape.sum_cols(per)))
}

struct MaskInfo {
    /// `[L·B, 1]`.
    mask: Tensor,
    valid: f64,
}

impl Agent {
    fn mask_info(&self, batch: &SequenceBatch) -> Result<MaskInfo> {
        let mask = stacked_tensor(&batch.mask)?;
        let valid: f64 = mask.data().iter().sum();
        if valid == 0.0 {
            return Err(Error::Replay("batch has no valid steps".into()));
        }
        Ok(MaskInfo { mask, valid })
    }

    /// Runs `enc` over the first `positions` positions of `batch` from the
    /// zero state. With `noise = Some((seed, stream))` the contexts are
    /// reparameterised samples.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        enc: &ContextEncoder,
        p: &Bound,
        batch: &SequenceBatch,
        positions: usize,
        noise: Option<(u64, u64)>,
    ) -> Result<Unrolled> {
        let b = batch.batch_size();
        let dz = enc.config.context_dim;
        let mut state = enc.initial_state(tape, b);
        let mut out = Unrolled {
            obs_embed: Vec::with_capacity(positions),
            mu: Vec::with_capacity(positions),
            z: Vec::with_capacity(positions),
            kl: Vec::with_capacity(positions),
        };
        for k in 0..positions {
            let obs = tape.constant(batch.obs[k].clone());
            let prev_a = tape.constant(batch.prev_action[k].clone());
            let prev_r = tape.constant(batch.prev_reward[k].clone());
            let (x, e) = enc.embed(tape, p, obs, prev_a, prev_r)?;
            let dt: Vec<f64> = batch.dt[k]
                .iter()
                .map(|d| d * self.config.dt_scale)
                .collect();
            let eps = noise.map(|(seed, stream)| normal_block(seed, stream, k, b, dz));
            let (next, ctx, kl) = enc.encode_step(tape, p, &state, x, &dt, eps, k)?;
            state = next;
            out.obs_embed.push(e);
            out.mu.push(ctx.mu);
            out.z.push(ctx.sample);
            out.kl.push(kl);
        }
        Ok(out)
    }

    /// `Σ_k Σ_b mask·kl / B` over transition positions.
    fn kl_term(&self, tape: &mut Tape, kl: &[Var], m: &MaskInfo, batch: usize) -> Result<Var> {
        let stacked = tape.stack_rows(kl)?;
        let mask = tape.constant(m.mask.clone());
        let masked = tape.mul(stacked, mask)?;
        let total = tape.sum(masked);
        Ok(tape.scale(total, 1.0 / batch as f64))
    }

    /// `Σ mask·x / n_valid` for `x: [L·B, 1]`.
    fn masked_mean(&self, tape: &mut Tape, x: Var, m: &MaskInfo) -> Result<Var> {
        let mask = tape.constant(m.mask.clone());
        let masked = tape.mul(x, mask)?;
        let total = tape.sum(masked);
        Ok(tape.scale(total, 1.0 / m.valid))
    }

    /// Contexts from the encoder the actor reads, given both tree bindings.
    fn actor_contexts(
        &self,
        tape: &mut Tape,
        actor_p: &Bound,
        critic_p: &Bound,
        batch: &SequenceBatch,
        positions: usize,
        noise: Option<(u64, u64)>,
    ) -> Result<Unrolled> {
        let p = if self.nets.shared { critic_p } else { actor_p };
        self.unroll(tape, &self.nets.actor_encoder, p, batch, positions, noise)
    }

    /// Bootstrap targets `y` for every transition, `[L·B, 1]`.
    ///
    /// TD3: `y = r + γ(1 − d)·min_i Q_i,targ(o', clip(π_targ(o', z') + ε), z')`.
    /// SAC: `y = r + γ(1 − d)·(min_i Q_i,targ(o', ã', z') − α log π(ã'|o', z'))`
    /// with `ã'` drawn from the online policy. Every network here is frozen
    /// and reads `z = μ`.
    pub fn td_targets(&self, batch: &SequenceBatch, seed: u64) -> Result<Tensor> {
        Ok(self.td_target_parts(batch, seed)?.y)
    }

    /// [`td_targets`](Self::td_targets) with the per-head bootstrap values.
    pub fn td_target_parts(&self, batch: &SequenceBatch, seed: u64) -> Result<Targets> {
        let (l, b, ad) = (batch.seq_len(), batch.batch_size(), self.action_dim);
        let mut tape = Tape::new();
        let ct = self.critic_target.bind(&mut tape, false);
        let critic = self.unroll(
            &mut tape,
            &self.nets.critic_encoder,
            &ct,
            batch,
            l + 1,
            None,
        )?;
        let (policy_tree, policy_critic): (&ParamSet, &ParamSet) = match self.config.kind {
            AgentKind::Td3 => (&self.actor_target, &self.critic_target),
            AgentKind::Sac => (&self.actor, &self.critic),
        };
        let ap = policy_tree.bind(&mut tape, false);
        let actor = if self.nets.shared && self.config.kind == AgentKind::Td3 {
            critic.clone()
        } else {
            let cp = policy_critic.bind(&mut tape, false);
            self.actor_contexts(&mut tape, &ap, &cp, batch, l + 1, None)?
        };
        let e_a = tape.stack_rows(&actor.obs_embed[1..])?;
        let z_a = tape.stack_rows(&actor.mu[1..])?;
        let (next_action, entropy) = match self.policy_forward(&mut tape, &ap, e_a, z_a)? {
            PolicyOut::Deterministic(a) => {
                let eps = stacked_noise(seed, NOISE_TARGET_ACTION, 1, l, b, ad);
                let (sigma, clip) = (self.config.target_noise, self.config.target_noise_clip);
                let noise = tape.constant(eps.map(|e| (sigma * e).clamp(-clip, clip)));
                let noisy = tape.add(a, noise)?;
                (tape.clamp(noisy, -1.0, 1.0), None)
            }
            PolicyOut::Gaussian { mean, log_std } => {
                let eps = stacked_noise(seed, NOISE_NEXT_ACTION, 1, l, b, ad);
                let (a, logp) = tanh_gaussian_log_prob(&mut tape, mean, log_std, eps)?;
                (a, Some(tape.scale(logp, self.alpha())))
            }
        };
        let e_c = tape.stack_rows(&critic.obs_embed[1..])?;
        let z_c = tape.stack_rows(&critic.mu[1..])?;
        let (q1, q2) = self.q_values(&mut tape, &ct, e_c, next_action, z_c)?;
        let mut next_v = tape.minimum(q1, q2)?;
        if let Some(ent) = entropy {
            next_v = tape.sub(next_v, ent)?;
        }
        let r = stacked_tensor(&batch.reward)?;
        let d = stacked_tensor(&batch.done)?;
        let gamma = self.config.gamma;
        let data = tape
            .value(next_v)
            .data()
            .iter()
            .zip(r.data())
            .zip(d.data())
            .map(|((&v, &r), &d)| r + gamma * (1.0 - d) * v)
            .collect();
        Ok(Targets {
            y: Tensor::new(vec![l * b, 1], data)?,
            next_q1: tape.value(q1).clone(),
            next_q2: tape.value(q2).clone(),
            entropy: entropy.map(|e| tape.value(e).clone()),
        })
    }

    /// `Σ_i masked-mean (Q_i(o, a, z) − y)² + λ_c·K(φ_c)`, trains the critic tree.
    fn critic_loss(&self, tape: &mut Tape, batch: &SequenceBatch, seed: u64) -> Result<LossGraph> {
        let (l, b) = (batch.seq_len(), batch.batch_size());
        let m = self.mask_info(batch)?;
        let y = self.td_targets(batch, seed)?;
        let cp = self.critic.bind(tape, true);
        let enc = self.unroll(
            tape,
            &self.nets.critic_encoder,
            &cp,
            batch,
            l,
            Some((seed, NOISE_CRITIC_Z)),
        )?;
        let e = tape.stack_rows(&enc.obs_embed)?;
        let z = tape.stack_rows(&enc.z)?;
        let a = stacked_const(tape, &batch.action)?;
        let (q1, q2) = self.q_values(tape, &cp, e, a, z)?;
        let y = tape.constant(y);
        let mut loss = None;
        for q in [q1, q2] {
            let err = tape.sub(q, y)?;
            let sq = tape.square(err);
            check_finite(tape, sq, b, "critic loss")?;
            let term = self.masked_mean(tape, sq, &m)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let kl = self.kl_term(tape, &enc.kl, &m, b)?;
        let weighted = tape.scale(kl, self.config.lambda_critic);
        let loss = tape.add(loss.expect("two heads"), weighted)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "critic loss",
                row: 0,
            });
        }
        Ok(LossGraph {
            loss,
            bound: cp,
            value,
            kl: tape.value(kl).item(),
            mean_log_prob: 0.0,
        })
    }

    /// TD3 critic objective on `tape` with its noise drawn from `seed`.
    pub fn td3_critic_loss(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        seed: u64,
    ) -> Result<LossGraph> {
        self.expect_kind(AgentKind::Td3)?;
        self.critic_loss(tape, batch, seed)
    }

    /// SAC critic objective: TD3's with the entropy-corrected target.
    pub fn sac_critic_loss(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        seed: u64,
    ) -> Result<LossGraph> {
        self.expect_kind(AgentKind::Sac)?;
        self.critic_loss(tape, batch, seed)
    }

    /// `−masked-mean Q_1(o, π(o, z_a), z_c) + λ_a·K(φ_a)`, trains the actor tree.
    /// The critic tree is bound frozen and reads `z_c = μ`. In shared mode
    /// the encoder is part of the frozen critic and `K` is left to the critic.
    pub fn td3_actor_loss(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        seed: u64,
    ) -> Result<LossGraph> {
        self.expect_kind(AgentKind::Td3)?;
        self.actor_loss(tape, batch, seed)
    }

    /// `masked-mean (α log π(a|o, z_a) − min_j Q_j(o, a, z_c)) + λ_a·K(φ_a)`.
    pub fn sac_actor_loss(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        seed: u64,
    ) -> Result<LossGraph> {
        self.expect_kind(AgentKind::Sac)?;
        self.actor_loss(tape, batch, seed)
    }

    /// `−ln α · (mean log π + H_target)`, the temperature objective, for a
    /// given mean log-probability.
    pub fn sac_alpha_loss(&self, mean_log_prob: f64) -> f64 {
        let log_alpha = self.alpha().ln();
        -log_alpha * (mean_log_prob - self.action_dim as f64)
    }

    /// Critic, actor and temperature losses of SAC on one batch.
    pub fn sac_losses(&self, batch: &SequenceBatch, seed: u64) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let critic = self.sac_critic_loss(&mut tape, batch, seed)?;
        let mut tape = Tape::new();
        let actor = self.sac_actor_loss(&mut tape, batch, seed)?;
        Ok((
            critic.value,
            actor.value,
            self.sac_alpha_loss(actor.mean_log_prob),
        ))
    }

    fn expect_kind(&self, kind: AgentKind) -> Result<()> {
        if self.config.kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{kind} loss requested from a {} agent",
                self.config.kind
            )))
        }
    }

    fn actor_loss(&self, tape: &mut Tape, batch: &SequenceBatch, seed: u64) -> Result<LossGraph> {
        let (l, b, ad) = (batch.seq_len(), batch.batch_size(), self.action_dim);
        let m = self.mask_info(batch)?;
        let ap = self.actor.bind(tape, true);
        let cp = self.critic.bind(tape, false);
        let shared = self.nets.shared;
        let actor = self.actor_contexts(
            tape,
            &ap,
            &cp,
            batch,
            l,
            (!shared).then_some((seed, NOISE_ACTOR_Z)),
        )?;
        let critic = if shared {
            actor.clone()
        } else {
            self.unroll(tape, &self.nets.critic_encoder, &cp, batch, l, None)?
        };
        let e_a = tape.stack_rows(&actor.obs_embed)?;
        let z_a = tape.stack_rows(&actor.z)?;
        let e_c = tape.stack_rows(&critic.obs_embed)?;
        let z_c = tape.stack_rows(&critic.mu)?;
        let (per_step, mean_log_prob) = match self.policy_forward(tape, &ap, e_a, z_a)? {
            PolicyOut::Deterministic(a) => {
                let (q1, _) = self.q_values(tape, &cp, e_c, a, z_c)?;
                (tape.neg(q1), 0.0)
            }
            PolicyOut::Gaussian { mean, log_std } => {
                let eps = stacked_noise(seed, NOISE_ACTION, 0, l, b, ad);
                let (a, logp) = tanh_gaussian_log_prob(tape, mean, log_std, eps)?;
                let (q1, q2) = self.q_values(tape, &cp, e_c, a, z_c)?;
                let q = tape.minimum(q1, q2)?;
                let ent = tape.scale(logp, self.alpha());
                let mlp = self.masked_mean(tape, logp, &m)?;
                let mlp = tape.value(mlp).item();
                (tape.sub(ent, q)?, mlp)
            }
        };
        check_finite(tape, per_step, b, "actor loss")?;
        let mut loss = self.masked_mean(tape, per_step, &m)?;
        let mut kl_value = 0.0;
        if !shared {
            let kl = self.kl_term(tape, &actor.kl, &m, b)?;
            kl_value = tape.value(kl).item();
            let weighted = tape.scale(kl, self.config.lambda_actor);
            loss = tape.add(loss, weighted)?;
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "actor loss",
                row: 0,
            });
        }
        Ok(LossGraph {
            loss,
            bound: ap,
            value,
            kl: kl_value,
            mean_log_prob,
        })
    }
}
