//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown keys are rejected. [`RunConfig::to_text`]
//! writes every key, and re-parsing that text reproduces the config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::agents::{AgentConfig, AgentKind};
use crate::encoder::EncoderConfig;
use crate::envs::{Clock, EnvKind, EnvSpec, Occlusion, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::nn::InputMode;
use crate::odeint::{Scheme, SolverChoice};
use crate::replay::{DEFAULT_BATCH_SIZE, DEFAULT_CAPACITY, DEFAULT_SEQ_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Fixed,
    Uniform,
}

impl FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ClockMode::Fixed),
            "uniform" => Ok(ClockMode::Uniform),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for ClockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClockMode::Fixed => "fixed",
            ClockMode::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub occlusion: Occlusion,
    pub clock: ClockMode,
    /// Nominal observation interval in seconds.
    pub delta: f64,
    pub agent: AgentKind,
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
    pub input_mode: InputMode,
    pub solver: Scheme,
    pub substeps: usize,
    /// Encoder integration interval for one nominal observation interval.
    pub encoder_dt: f64,
    pub hidden_dim: usize,
    pub context_dim: usize,
    pub policy_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    /// Uniform random actions before this many environment steps.
    pub learning_starts: usize,
    /// Environment steps between update rounds.
    pub update_every: usize,
    pub updates_per_round: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Also write the replay buffer into the final checkpoint.
    pub save_replay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        Self {
            env: EnvKind::Pendulum,
            occlusion: Occlusion::PositionOnly,
            clock: ClockMode::Fixed,
            delta: DEFAULT_DELTA,
            agent: agent.kind,
            gamma: agent.gamma,
            lr: agent.lr,
            lambda_actor: agent.lambda_actor,
            lambda_critic: agent.lambda_critic,
            tau: agent.tau,
            exploration_noise: agent.exploration_noise,
            target_noise: agent.target_noise,
            target_noise_clip: agent.target_noise_clip,
            policy_delay: agent.policy_delay,
            alpha: agent.alpha,
            auto_alpha: agent.auto_alpha,
            alpha_lr: agent.alpha_lr,
            shared_encoder: agent.shared_encoder,
            input_mode: agent.encoder.input_mode,
            solver: agent.encoder.solver.scheme,
            substeps: agent.encoder.solver.substeps,
            encoder_dt: 0.1,
            hidden_dim: agent.encoder.hidden_dim,
            context_dim: agent.encoder.context_dim,
            policy_hidden: agent.policy_hidden,
            q_hidden: agent.q_hidden,
            batch_size: DEFAULT_BATCH_SIZE,
            seq_len: DEFAULT_SEQ_LEN,
            buffer_capacity: DEFAULT_CAPACITY,
            total_steps: 150_000,
            learning_starts: 2_000,
            update_every: 20,
            updates_per_round: 1,
            eval_every: 5_000,
            eval_episodes: 20,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            save_replay: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(
            key,
            format!("expected true or false, got `{other}`"),
        )),
    }
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join_sizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Parses `text` on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {} is not `key = value`", n + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    /// Applies a single `key=value` override. Call [`validate`](Self::validate)
    /// once all overrides are in.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = parse(key, value)?,
            "occlusion" => self.occlusion = parse(key, value)?,
            "clock" => self.clock = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "agent" => self.agent = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda_actor" => self.lambda_actor = parse(key, value)?,
            "lambda_critic" => self.lambda_critic = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "exploration_noise" => self.exploration_noise = parse(key, value)?,
            "target_noise" => self.target_noise = parse(key, value)?,
            "target_noise_clip" => self.target_noise_clip = parse(key, value)?,
            "policy_delay" => self.policy_delay = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "auto_alpha" => self.auto_alpha = parse_bool(key, value)?,
            "alpha_lr" => self.alpha_lr = parse(key, value)?,
            "shared_encoder" => self.shared_encoder = parse_bool(key, value)?,
            "input_mode" => self.input_mode = parse(key, value)?,
            "solver" => self.solver = parse(key, value)?,
            "substeps" => self.substeps = parse(key, value)?,
            "encoder_dt" => self.encoder_dt = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "context_dim" => self.context_dim = parse(key, value)?,
            "policy_hidden" => self.policy_hidden = parse_sizes(key, value)?,
            "q_hidden" => self.q_hidden = parse_sizes(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "learning_starts" => self.learning_starts = parse(key, value)?,
            "update_every" => self.update_every = parse(key, value)?,
            "updates_per_round" => self.updates_per_round = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "save_replay" => self.save_replay = parse_bool(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("env", self.env.to_string()),
            ("occlusion", self.occlusion.to_string()),
            ("clock", self.clock.to_string()),
            ("delta", f(self.delta)),
            ("agent", self.agent.to_string()),
            ("gamma", f(self.gamma)),
            ("lr", f(self.lr)),
            ("lambda_actor", f(self.lambda_actor)),
            ("lambda_critic", f(self.lambda_critic)),
            ("tau", f(self.tau)),
            ("exploration_noise", f(self.exploration_noise)),
            ("target_noise", f(self.target_noise)),
            ("target_noise_clip", f(self.target_noise_clip)),
            ("policy_delay", self.policy_delay.to_string()),
            ("alpha", f(self.alpha)),
            ("auto_alpha", self.auto_alpha.to_string()),
            ("alpha_lr", f(self.alpha_lr)),
            ("shared_encoder", self.shared_encoder.to_string()),
            ("input_mode", self.input_mode.to_string()),
            ("solver", self.solver.to_string()),
            ("substeps", self.substeps.to_string()),
            ("encoder_dt", f(self.encoder_dt)),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("policy_hidden", join_sizes(&self.policy_hidden)),
            ("q_hidden", join_sizes(&self.q_hidden)),
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("learning_starts", self.learning_starts.to_string()),
            ("update_every", self.update_every.to_string()),
            ("updates_per_round", self.updates_per_round.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("save_replay", self.save_replay.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec()?;
        self.agent_config().validate()?;
        let positive = [
            ("substeps", self.substeps),
            ("hidden_dim", self.hidden_dim),
            ("context_dim", self.context_dim),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("buffer_capacity", self.buffer_capacity),
            ("update_every", self.update_every),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.encoder_dt > 0.0 && self.encoder_dt.is_finite()) {
            return Err(Error::config("encoder_dt", "must be positive"));
        }
        if self.policy_hidden.contains(&0) {
            return Err(Error::config(
                "policy_hidden",
                "layer sizes must be positive",
            ));
        }
        if self.q_hidden.contains(&0) {
            return Err(Error::config("q_hidden", "layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be positive"));
        }
        let clock = match self.clock {
            ClockMode::Fixed => Clock::Fixed { delta: self.delta },
            ClockMode::Uniform => Clock::Uniform { delta: self.delta },
        };
        EnvSpec::new(self.env, self.occlusion, clock)
            .map_err(|e| Error::config("occlusion", e.to_string()))
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            kind: self.agent,
            gamma: self.gamma,
            lr: self.lr,
            lambda_actor: self.lambda_actor,
            lambda_critic: self.lambda_critic,
            tau: self.tau,
            exploration_noise: self.exploration_noise,
            target_noise: self.target_noise,
            target_noise_clip: self.target_noise_clip,
            policy_delay: self.policy_delay,
            alpha: self.alpha,
            auto_alpha: self.auto_alpha,
            alpha_lr: self.alpha_lr,
            shared_encoder: self.shared_encoder,
            policy_hidden: self.policy_hidden.clone(),
            q_hidden: self.q_hidden.clone(),
            encoder: EncoderConfig {
                hidden_dim: self.hidden_dim,
                context_dim: self.context_dim,
                dynamics_sizes: vec![self.hidden_dim, self.hidden_dim],
                input_mode: self.input_mode,
                solver: SolverChoice {
                    scheme: self.solver,
                    substeps: self.substeps,
                },
                ..EncoderConfig::default()
            },
            dt_scale: self.encoder_dt / self.delta,
        }
    }

    /// The keys that determine which environment a checkpoint belongs to.
    pub fn env_signature(&self) -> String {
        format!(
            "{}/{}/{}/{:?}",
            self.env, self.occlusion, self.clock, self.delta
        )
    }
}
