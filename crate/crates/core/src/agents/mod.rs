//! Recurrent TD3 and SAC agents conditioned on GRU-ODE contexts.
//!
//! Parameters live in four trees: the online actor, the online critic,
//! and their target copies (TD3 keeps both targets, SAC only uses the
//! critic target). With separate encoders the actor tree owns the actor
//! encoder and the critic tree owns the critic encoder. In shared mode a
//! single encoder lives in the critic tree and the actor reads it frozen.
//!
//! Actions are normalised to `[-1, 1]^dim(a)`; environments rescale.

mod losses;

pub use losses::{
    normal_block, tanh_gaussian_log_prob, LossGraph, Targets, Unrolled, NOISE_ACTION,
    NOISE_ACTOR_Z, NOISE_CRITIC_Z, NOISE_NEXT_ACTION, NOISE_TARGET_ACTION,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Adam, Bound, Checkpoint, ParamSet, Tape, Tensor, Var, DEFAULT_LR};
use crate::encoder::{ContextEncoder, EncoderConfig, EncoderState};
use crate::envs::EnvStep;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp, MlpSpec};
use crate::replay::SequenceBatch;

/// Bounds on the SAC policy's log standard deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Td3,
    Sac,
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td3" => Ok(AgentKind::Td3),
            "sac" => Ok(AgentKind::Sac),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Td3 => "td3",
            AgentKind::Sac => "sac",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    pub lr: f64,
    pub lambda_actor: f64,
    pub lambda_critic: f64,
    pub tau: f64,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub policy_delay: usize,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub alpha_lr: f64,
    pub shared_encoder: bool,
    pub policy_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    pub encoder: EncoderConfig,
    /// Multiplies environment intervals before they reach the encoder.
    pub dt_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Td3,
            gamma: 0.99,
            lr: DEFAULT_LR,
            lambda_actor: 0.5,
            lambda_critic: 0.5,
            tau: 0.005,
            exploration_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            policy_delay: 2,
            alpha: 0.2,
            auto_alpha: true,
            alpha_lr: 3e-4,
            shared_encoder: false,
            policy_hidden: vec![256, 256],
            q_hidden: vec![256, 256],
            encoder: EncoderConfig::default(),
            dt_scale: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("alpha_lr", self.alpha_lr),
            ("dt_scale", self.dt_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_actor", self.lambda_actor),
            ("lambda_critic", self.lambda_critic),
            ("exploration_noise", self.exploration_noise),
            ("target_noise", self.target_noise),
            ("target_noise_clip", self.target_noise_clip),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    name,
                    format!("must be non-negative, got {v}"),
                ));
            }
        }
        if self.gamma > 1.0 {
            return Err(Error::config("gamma", "must not exceed 1"));
        }
        if self.tau > 1.0 {
            return Err(Error::config("tau", "must not exceed 1"));
        }
        if self.policy_delay == 0 {
            return Err(Error::config("policy_delay", "must be at least 1"));
        }
        Ok(())
    }
}

/// Network layout shared by the online and target trees.
#[derive(Clone, Debug)]
pub struct Networks {
    /// Lives in the actor tree, or in the critic tree when shared.
    pub actor_encoder: ContextEncoder,
    pub critic_encoder: ContextEncoder,
    /// TD3: the full tanh-bounded policy. SAC: the hidden trunk.
    pub policy: Mlp,
    /// SAC mean and log-std layers on top of the trunk.
    pub gaussian_head: Option<(Linear, Linear)>,
    pub q1: Mlp,
    pub q2: Mlp,
    pub shared: bool,
}

/// Counters and last losses of the update loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub kl_critic: f64,
    pub kl_actor: Option<f64>,
    pub alpha: f64,
}

/// Per-episode rollout memory: encoder state and the previous action.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub encoder: EncoderState,
    pub prev_action: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// What [`Agent::act`] produced at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub context_mu: Vec<f64>,
    pub context_sigma: Vec<f64>,
}

/// Raw policy output on a tape.
#[derive(Clone, Copy, Debug)]
pub enum PolicyOut {
    /// TD3 action in `[-1, 1]`.
    Deterministic(Var),
    /// SAC pre-squash Gaussian; `log_std` is not yet clamped.
    Gaussian { mean: Var, log_std: Var },
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub nets: Networks,
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub actor_target: ParamSet,
    pub critic_target: ParamSet,
    /// One scalar, `ln α`.
    pub log_alpha: ParamSet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub alpha_opt: Adam,
    /// Critic updates performed so far.
    pub updates: u64,
    /// Actor updates performed so far.
    pub actor_updates: u64,
    update_rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(config: AgentConfig, obs_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = ParamSet::new();
        let mut critic = ParamSet::new();
        let critic_encoder = ContextEncoder::new(
            &mut critic,
            "critic.encoder",
            config.encoder.clone(),
            obs_dim,
            action_dim,
            &mut rng,
        )?;
        let actor_encoder = if config.shared_encoder {
            critic_encoder.clone()
        } else {
            ContextEncoder::new(
                &mut actor,
                "actor.encoder",
                config.encoder.clone(),
                obs_dim,
                action_dim,
                &mut rng,
            )?
        };
        let e = config.encoder.embed.obs;
        let z = config.encoder.context_dim;
        let sizes = |inp: usize, hidden: &[usize], out: usize| {
            let mut v = vec![inp];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let (policy, gaussian_head) = match config.kind {
            AgentKind::Td3 => {
                let spec = MlpSpec::new(
                    sizes(e + z, &config.policy_hidden, action_dim),
                    Activation::Relu,
                    Activation::Tanh,
                )?;
                (
                    Mlp::new(&mut actor, "actor.policy", spec, 0.01, &mut rng),
                    None,
                )
            }
            AgentKind::Sac => {
                let mut trunk = vec![e + z];
                trunk.extend_from_slice(&config.policy_hidden);
                if trunk.len() < 2 {
                    return Err(Error::config(
                        "policy_hidden",
                        "SAC needs at least one hidden layer",
                    ));
                }
                let width = *trunk.last().expect("non-empty");
                let spec = MlpSpec::new(trunk, Activation::Relu, Activation::Relu)?;
                let trunk = Mlp::new(&mut actor, "actor.policy", spec, 1.0, &mut rng);
                let mean = Linear::new(&mut actor, "actor.mean", width, action_dim, 0.01, &mut rng);
                let log_std = Linear::new(
                    &mut actor,
                    "actor.log_std",
                    width,
                    action_dim,
                    0.01,
                    &mut rng,
                );
                (trunk, Some((mean, log_std)))
            }
        };
        let q_spec = MlpSpec::new(
            sizes(e + action_dim + z, &config.q_hidden, 1),
            Activation::Relu,
            Activation::Identity,
        )?;
        let q1 = Mlp::new(&mut critic, "critic.q1", q_spec.clone(), 1.0, &mut rng);
        let q2 = Mlp::new(&mut critic, "critic.q2", q_spec, 1.0, &mut rng);
        let mut log_alpha = ParamSet::new();
        log_alpha.add("log_alpha", Tensor::scalar(config.alpha.ln()));

        let actor_opt = Adam::new(&actor, config.lr);
        let critic_opt = Adam::new(&critic, config.lr);
        let alpha_opt = Adam::new(&log_alpha, config.alpha_lr);
        let update_rng = ChaCha8Rng::seed_from_u64(rng.random());
        Ok(Self {
            obs_dim,
            action_dim,
            nets: Networks {
                actor_encoder,
                critic_encoder,
                policy,
                gaussian_head,
                q1,
                q2,
                shared: config.shared_encoder,
            },
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            log_alpha,
            actor_opt,
            critic_opt,
            alpha_opt,
            updates: 0,
            actor_updates: 0,
            update_rng,
            config,
        })
    }

    /// Current entropy temperature.
    pub fn alpha(&self) -> f64 {
        match self.config.kind {
            AgentKind::Td3 => 0.0,
            AgentKind::Sac => self
                .log_alpha
                .iter()
                .next()
                .expect("one")
                .value
                .item()
                .exp(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.actor.num_scalars() + self.critic.num_scalars()
    }

    /// Policy on `concat(obs embedding, z)`; `p` is the actor tree's binding.
    pub fn policy_forward(&self, tape: &mut Tape, p: &Bound, e: Var, z: Var) -> Result<PolicyOut> {
        let input = tape.concat(&[e, z])?;
        let h = self.nets.policy.forward(tape, p, input)?;
        Ok(match &self.nets.gaussian_head {
            None => PolicyOut::Deterministic(h),
            Some((mean, log_std)) => PolicyOut::Gaussian {
                mean: mean.forward(tape, p, h)?,
                log_std: log_std.forward(tape, p, h)?,
            },
        })
    }

    /// Both critic heads on `concat(obs embedding, a, z)`.
    pub fn q_values(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e: Var,
        a: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let input = tape.concat(&[e, a, z])?;
        let q1 = self.nets.q1.forward(tape, p, input)?;
        let q2 = self.nets.q2.forward(tape, p, input)?;
        Ok((q1, q2))
    }

    pub fn start_episode(&self) -> RolloutState {
        let ec = &self.config.encoder;
        RolloutState {
            encoder: EncoderState::initial(1, ec.hidden_dim, ec.context_dim),
            prev_action: vec![0.0; self.action_dim],
        }
    }

    /// Steps the actor encoder on `(o_t, a_{t-1}, r_{t-1}, dt_t)` and picks `a_t`.
    ///
    /// The policy always reads `z = μ`. Explore mode adds Gaussian noise
    /// (TD3) or samples the squashed Gaussian (SAC); eval mode is deterministic.
    pub fn act(
        &self,
        state: &mut RolloutState,
        step: &EnvStep,
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> Result<ActOutput> {
        let mut tape = Tape::new();
        let tree = if self.nets.shared {
            &self.critic
        } else {
            &self.actor
        };
        let enc_p = tree.bind(&mut tape, false);
        let pol_p = self.actor.bind(&mut tape, false);
        let obs = tape.constant(Tensor::new(
            vec![1, self.obs_dim],
            step.observation.clone(),
        )?);
        let prev_a = tape.constant(Tensor::new(
            vec![1, self.action_dim],
            state.prev_action.clone(),
        )?);
        let prev_r = tape.constant(Tensor::new(vec![1, 1], vec![step.reward])?);
        let enc = &self.nets.actor_encoder;
        let (x, e) = enc.embed(&mut tape, &enc_p, obs, prev_a, prev_r)?;
        let s = state.encoder.bind(&mut tape);
        let (next, ctx, _) = enc.encode_step(
            &mut tape,
            &enc_p,
            &s,
            x,
            &[step.dt * self.config.dt_scale],
            None,
            0,
        )?;
        let action: Vec<f64> = match self.policy_forward(&mut tape, &pol_p, e, ctx.mu)? {
            PolicyOut::Deterministic(a) => {
                let a = tape.value(a).data().to_vec();
                match mode {
                    ActMode::Eval => a,
                    ActMode::Explore => a
                        .iter()
                        .map(|&a| {
                            let n: f64 = rng.sample(StandardNormal);
                            (a + self.config.exploration_noise * n).clamp(-1.0, 1.0)
                        })
                        .collect(),
                }
            }
            PolicyOut::Gaussian { mean, log_std } => {
                let mean = tape.value(mean).data();
                let log_std = tape.value(log_std).data();
                match mode {
                    ActMode::Eval => mean.iter().map(|m| m.tanh()).collect(),
                    ActMode::Explore => mean
                        .iter()
                        .zip(log_std)
                        .map(|(&m, &ls)| {
                            let n: f64 = rng.sample(StandardNormal);
                            (m + ls.clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * n).tanh()
                        })
                        .collect(),
                }
            }
        };
        state.encoder = EncoderState::read(&tape, &next);
        state.prev_action = action.clone();
        Ok(ActOutput {
            action,
            context_mu: tape.value(ctx.mu).data().to_vec(),
            context_sigma: tape.value(ctx.sigma).data().to_vec(),
        })
    }

    /// One critic update, plus the actor (and α) update when due.
    ///
    /// TD3 updates the actor and both targets once every `policy_delay`
    /// critic updates; SAC updates actor, α and the critic target every time.
    pub fn update(&mut self, batch: &SequenceBatch) -> Result<UpdateStats> {
        let seed: u64 = self.update_rng.random();
        let (critic_loss, kl_critic) = {
            let mut tape = Tape::new();
            let g = match self.config.kind {
                AgentKind::Td3 => self.td3_critic_loss(&mut tape, batch, seed)?,
                AgentKind::Sac => self.sac_critic_loss(&mut tape, batch, seed)?,
            };
            tape.backward(g.loss)?;
            self.critic.zero_grad();
            self.critic.accumulate_grads(&tape, &g.bound);
            self.critic_opt.step(&mut self.critic)?;
            (g.value, g.kl)
        };
        self.updates += 1;
        let mut stats = UpdateStats {
            critic_loss,
            kl_critic,
            alpha: self.alpha(),
            ..Default::default()
        };
        let actor_due = match self.config.kind {
            AgentKind::Td3 => self.updates.is_multiple_of(self.config.policy_delay as u64),
            AgentKind::Sac => true,
        };
        if actor_due {
            let mut tape = Tape::new();
            let g = match self.config.kind {
                AgentKind::Td3 => self.td3_actor_loss(&mut tape, batch, seed ^ 0xA5A5)?,
                AgentKind::Sac => self.sac_actor_loss(&mut tape, batch, seed ^ 0xA5A5)?,
            };
            tape.backward(g.loss)?;
            self.actor.zero_grad();
            self.actor.accumulate_grads(&tape, &g.bound);
            self.actor_opt.step(&mut self.actor)?;
            self.actor_updates += 1;
            stats.actor_loss = Some(g.value);
            stats.kl_actor = Some(g.kl);
            if self.config.kind == AgentKind::Sac && self.config.auto_alpha {
                self.alpha_step(g.mean_log_prob)?;
                stats.alpha = self.alpha();
            }
            if self.config.kind == AgentKind::Td3 {
                self.actor_target
                    .polyak_update(&self.actor, self.config.tau)?;
            }
        }
        if self.config.kind == AgentKind::Sac || actor_due {
            self.critic_target
                .polyak_update(&self.critic, self.config.tau)?;
        }
        Ok(stats)
    }

    /// Gradient step on `−ln α · (E[log π] + H_target)` with `H_target = −dim(a)`.
    fn alpha_step(&mut self, mean_log_prob: f64) -> Result<()> {
        let target_entropy = -(self.action_dim as f64);
        let id = self.log_alpha.ids().next().expect("one");
        self.log_alpha.zero_grad();
        self.log_alpha.grad_mut(id)[0] = -(mean_log_prob + target_entropy);
        self.alpha_opt.step(&mut self.log_alpha)
    }

    /// Stores every parameter tree and optimiser state under `agent/`.
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("agent.kind", self.config.kind.to_string());
        ckpt.set_meta("agent.obs_dim", self.obs_dim.to_string());
        ckpt.set_meta("agent.action_dim", self.action_dim.to_string());
        ckpt.set_meta("agent.updates", self.updates.to_string());
        ckpt.set_meta("agent.actor_updates", self.actor_updates.to_string());
        ckpt.insert_params("actor", &self.actor);
        ckpt.insert_params("critic", &self.critic);
        ckpt.insert_params("actor_target", &self.actor_target);
        ckpt.insert_params("critic_target", &self.critic_target);
        ckpt.insert_params("alpha", &self.log_alpha);
        ckpt.insert_adam("adam.actor", &self.actor_opt);
        ckpt.insert_adam("adam.critic", &self.critic_opt);
        ckpt.insert_adam("adam.alpha", &self.alpha_opt);
    }

    /// Restores state written by [`save_into`](Self::save_into) into an agent
    /// built from the same configuration.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expect = |key: &str, want: String| -> Result<()> {
            match ckpt.meta(key) {
                Some(v) if v == want => Ok(()),
                Some(v) => Err(Error::Checkpoint(format!(
                    "`{key}` is {v} in the checkpoint but {want} in the configuration"
                ))),
                None => Err(Error::Checkpoint(format!("missing metadata `{key}`"))),
            }
        };
        expect("agent.kind", self.config.kind.to_string())?;
        expect("agent.obs_dim", self.obs_dim.to_string())?;
        expect("agent.action_dim", self.action_dim.to_string())?;
        ckpt.load_params("actor", &mut self.actor)?;
        ckpt.load_params("critic", &mut self.critic)?;
        ckpt.load_params("actor_target", &mut self.actor_target)?;
        ckpt.load_params("critic_target", &mut self.critic_target)?;
        ckpt.load_params("alpha", &mut self.log_alpha)?;
        ckpt.load_adam("adam.actor", &mut self.actor_opt)?;
        ckpt.load_adam("adam.critic", &mut self.critic_opt)?;
        ckpt.load_adam("adam.alpha", &mut self.alpha_opt)?;
        let counter = |key: &str| -> Result<u64> {
            ckpt.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
        };
        self.updates = counter("agent.updates")?;
        self.actor_updates = counter("agent.actor_updates")?;
        Ok(())
    }
}
