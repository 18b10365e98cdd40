//! Rollout, training, evaluation and latent export.
//!
//! A training run writes into its output directory:
//!
//! - `config.txt`: the resolved configuration,
//! - `metrics.csv`: one row per evaluation block (deterministic given the seed),
//! - `timing.csv`: wall-clock seconds at each evaluation block,
//! - `checkpoint.bin`: agent parameters and optimiser state, refreshed
//!   at every evaluation block, and `checkpoint_failed.bin` if an update
//!   produced a non-finite loss.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{ActMode, Agent};
use crate::autodiff::Checkpoint;
use crate::config::RunConfig;
use crate::envs::{EnvSpec, PomdpEnv};
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::trace::{fmt_f64, Episode};

/// Evaluation environments are seeded at this offset from the run seed.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

pub const METRICS_HEADER: &str =
    "env_step,return_mean,return_std,length_mean,critic_loss,actor_loss,kl_actor,kl_critic";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl EvalStats {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        Self {
            returns: episodes.iter().map(Episode::total_reward).collect(),
            lengths: episodes.iter().map(Episode::len).collect(),
        }
    }

    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    /// Population standard deviation of the episode returns.
    pub fn std_return(&self) -> f64 {
        std_dev(&self.returns)
    }

    pub fn mean_length(&self) -> f64 {
        let l: Vec<f64> = self.lengths.iter().map(|&l| l as f64).collect();
        mean(&l)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_step: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub length_mean: f64,
    /// Means over the updates since the previous row; NaN if there were none.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub kl_actor: f64,
    pub kl_critic: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        [
            self.env_step.to_string(),
            fmt_f64(self.return_mean),
            fmt_f64(self.return_std),
            fmt_f64(self.length_mean),
            fmt_f64(self.critic_loss),
            fmt_f64(self.actor_loss),
            fmt_f64(self.kl_actor),
            fmt_f64(self.kl_critic),
        ]
        .join(",")
    }
}

/// Runs one episode with the agent. `on_step` sees the hidden state, the
/// agent's output and the observation it acted on.
pub fn run_episode(
    agent: &Agent,
    env: &mut PomdpEnv,
    mode: ActMode,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize, &[f64], &crate::agents::ActOutput),
) -> Result<Episode> {
    let mut step = env.reset();
    let mut state = agent.start_episode();
    let mut episode = Episode::start(&step, env.action_dim());
    let mut t = 0;
    while !step.episode_over() {
        let hidden = env.full_state();
        let out = agent.act(&mut state, &step, mode, rng)?;
        on_step(t, &hidden, &out);
        step = env.step(&out.action)?;
        episode.record(&out.action, &step)?;
        t += 1;
    }
    Ok(episode)
}

/// Deterministic-mode episodes from a fresh environment seeded with `seed`.
pub fn evaluation_episodes(
    agent: &Agent,
    spec: EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if episodes == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut env = PomdpEnv::new(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| run_episode(agent, &mut env, ActMode::Eval, &mut rng, |_, _, _| {}))
        .collect()
}

/// Deterministic-mode returns over `episodes` episodes from a fresh
/// environment seeded with `seed`.
pub fn evaluate_agent(
    agent: &Agent,
    spec: EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let eps = evaluation_episodes(agent, spec, episodes, seed)?;
    Ok(EvalStats::from_episodes(&eps))
}

/// Returns of the uniform random policy, the reference for learning checks.
pub fn random_policy_stats(spec: EnvSpec, episodes: usize, seed: u64) -> Result<EvalStats> {
    let mut env = PomdpEnv::new(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut stats = EvalStats {
        returns: Vec::with_capacity(episodes),
        lengths: Vec::with_capacity(episodes),
    };
    for _ in 0..episodes {
        let mut step = env.reset();
        let (mut ret, mut len) = (0.0, 0);
        while !step.episode_over() {
            let a: Vec<f64> = (0..env.action_dim())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            step = env.step(&a)?;
            ret += step.reward;
            len += 1;
        }
        stats.returns.push(ret);
        stats.lengths.push(len);
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub agent: Agent,
}

fn checkpoint_for(cfg: &RunConfig, agent: &Agent, env_step: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("config", cfg.to_text());
    ckpt.set_meta("config_hash", cfg.hash());
    ckpt.set_meta("env_step", env_step.to_string());
    agent.save_into(&mut ckpt);
    ckpt
}

fn is_numerical_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient(_)
            | Error::EncoderDiverged(_)
            | Error::OdeDiverged { .. }
    ) || matches!(e, Error::Domain { .. })
}

struct Window {
    critic: Vec<f64>,
    actor: Vec<f64>,
    kl_actor: Vec<f64>,
    kl_critic: Vec<f64>,
}

impl Window {
    fn new() -> Self {
        Self {
            critic: Vec::new(),
            actor: Vec::new(),
            kl_actor: Vec::new(),
            kl_critic: Vec::new(),
        }
    }
}

/// Trains an agent as configured and writes the run artifacts to `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let spec = cfg.env_spec()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("config.txt", &cfg.to_text())?;

    let metrics_path = out.join("metrics.csv");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let timing_path = out.join("timing.csv");
    let mut timing =
        BufWriter::new(File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?);
    writeln!(timing, "env_step,wall_seconds").map_err(|e| Error::io(&timing_path, e))?;

    let mut agent = Agent::new(
        cfg.agent_config(),
        spec.obs_dim(),
        spec.action_dim(),
        cfg.seed,
    )?;
    let mut env = PomdpEnv::new(spec, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let started = Instant::now();

    let mut rows = Vec::new();
    let mut window = Window::new();
    let mut step = env.reset();
    let mut state = agent.start_episode();
    let mut episode = Episode::start(&step, spec.action_dim());

    for env_step in 1..=cfg.total_steps {
        let proposed = agent.act(&mut state, &step, ActMode::Explore, &mut rng)?;
        let action = if env_step <= cfg.learning_starts {
            let a: Vec<f64> = (0..spec.action_dim())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            state.prev_action = a.clone();
            a
        } else {
            proposed.action
        };
        step = env.step(&action)?;
        episode.record(&action, &step)?;
        if step.episode_over() {
            step = env.reset();
            let finished =
                std::mem::replace(&mut episode, Episode::start(&step, spec.action_dim()));
            buffer.push_episode(finished)?;
            state = agent.start_episode();
        }

        if env_step > cfg.learning_starts && env_step % cfg.update_every == 0 && !buffer.is_empty()
        {
            for _ in 0..cfg.updates_per_round {
                let batch = buffer.sample_batch(&mut rng, cfg.batch_size, cfg.seq_len)?;
                match agent.update(&batch) {
                    Ok(stats) => {
                        window.critic.push(stats.critic_loss);
                        window.kl_critic.push(stats.kl_critic);
                        if let Some(a) = stats.actor_loss {
                            window.actor.push(a);
                        }
                        if let Some(k) = stats.kl_actor {
                            window.kl_actor.push(k);
                        }
                    }
                    Err(e) if is_numerical_failure(&e) => {
                        checkpoint_for(cfg, &agent, env_step)
                            .save(out.join("checkpoint_failed.bin"))?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if env_step % cfg.eval_every == 0 {
            let eval = evaluate_agent(
                &agent,
                spec,
                cfg.eval_episodes,
                cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
            )?;
            let row = MetricsRow {
                env_step,
                return_mean: eval.mean_return(),
                return_std: eval.std_return(),
                length_mean: eval.mean_length(),
                critic_loss: mean(&window.critic),
                actor_loss: mean(&window.actor),
                kl_actor: mean(&window.kl_actor),
                kl_critic: mean(&window.kl_critic),
            };
            window = Window::new();
            writeln!(metrics, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            writeln!(
                timing,
                "{},{}",
                env_step,
                fmt_f64(started.elapsed().as_secs_f64())
            )
            .map_err(|e| Error::io(&timing_path, e))?;
            timing.flush().map_err(|e| Error::io(&timing_path, e))?;
            checkpoint_for(cfg, &agent, env_step).save(out.join("checkpoint.bin"))?;
            rows.push(row);
        }
    }

    let mut ckpt = checkpoint_for(cfg, &agent, cfg.total_steps);
    if cfg.save_replay {
        buffer.snapshot(&mut ckpt, "replay");
    }
    ckpt.save(out.join("checkpoint.bin"))?;
    Ok(TrainSummary { rows, agent })
}

/// The configuration stored in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let text = ckpt
        .meta("config")
        .ok_or_else(|| Error::Checkpoint("no embedded configuration".into()))?;
    RunConfig::from_text(text)
}

/// Rebuilds the agent stored in `ckpt` for the environment described by `cfg`.
pub fn load_agent(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Agent> {
    let stored = checkpoint_config(ckpt)?;
    if stored.env_signature() != cfg.env_signature() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on {} but the configuration selects {}",
            stored.env_signature(),
            cfg.env_signature()
        )));
    }
    let spec = cfg.env_spec()?;
    let mut agent = Agent::new(
        cfg.agent_config(),
        spec.obs_dim(),
        spec.action_dim(),
        cfg.seed,
    )?;
    agent.load_from(ckpt)?;
    Ok(agent)
}

/// Deterministic evaluation episodes of a stored agent, seeded by `cfg.seed`.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, episodes: usize) -> Result<Vec<Episode>> {
    let agent = load_agent(ckpt, cfg)?;
    evaluation_episodes(
        &agent,
        cfg.env_spec()?,
        episodes,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
    )
}

/// Writes `t, mu…, sigma…, <hidden state>` rows for `episodes` deterministic
/// episodes; `t` restarts at 0 for each episode. Returns the data row count.
pub fn export_latents(
    agent: &Agent,
    spec: EnvSpec,
    episodes: usize,
    seed: u64,
    w: impl Write,
) -> Result<usize> {
    if episodes == 0 {
        return Err(Error::InvalidArgument(
            "export needs at least one episode".into(),
        ));
    }
    let mut w = BufWriter::new(w);
    let dz = agent.config.encoder.context_dim;
    let mut header = vec!["t".to_string()];
    header.extend((0..dz).map(|i| format!("mu{i}")));
    header.extend((0..dz).map(|i| format!("sigma{i}")));
    header.extend(spec.kind.full_state_names().iter().map(|s| s.to_string()));
    let io = |e: std::io::Error| Error::io("latents", e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut env = PomdpEnv::new(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = 0;
    let mut lines = Vec::new();
    for _ in 0..episodes {
        run_episode(
            agent,
            &mut env,
            ActMode::Eval,
            &mut rng,
            |t, hidden, out| {
                let mut row = vec![t.to_string()];
                row.extend(out.context_mu.iter().map(|&v| fmt_f64(v)));
                row.extend(out.context_sigma.iter().map(|&v| fmt_f64(v)));
                row.extend(hidden.iter().map(|&v| fmt_f64(v)));
                lines.push(row.join(","));
            },
        )?;
    }
    for line in lines {
        writeln!(w, "{line}").map_err(io)?;
        rows += 1;
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// [`export_latents`] for a stored agent into `path`.
pub fn export_latents_to(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    episodes: usize,
    path: &Path,
) -> Result<usize> {
    let agent = load_agent(ckpt, cfg)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    export_latents(
        &agent,
        cfg.env_spec()?,
        episodes,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        file,
    )
}
