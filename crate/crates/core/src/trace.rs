//! Episode traces.
//!
//! An [`Episode`] with `T` transitions stores `T + 1` observations and
//! intervals and `T` actions and rewards. Row `t` of the CSV export is the
//! record `(o_t, a_{t-1}, r_{t-1}, dt_t)`: everything the agent has seen
//! when it observes `o_t`.

use std::io::Write;
use std::path::Path;

use crate::envs::EnvStep;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    obs_dim: usize,
    action_dim: usize,
    /// `(T + 1) × obs_dim`, row-major.
    observations: Vec<f64>,
    /// `T × action_dim`, row-major.
    actions: Vec<f64>,
    /// Reward for the transition out of `o_t`.
    rewards: Vec<f64>,
    /// `dts[t]` is the interval that preceded `o_t`.
    dts: Vec<f64>,
    /// The final transition entered a terminal state.
    terminal: bool,
}

impl Episode {
    /// Starts a trace from the reset observation.
    pub fn start(first: &EnvStep, action_dim: usize) -> Self {
        Self {
            obs_dim: first.observation.len(),
            action_dim,
            observations: first.observation.clone(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dts: vec![first.dt],
            terminal: false,
        }
    }

    /// Appends the transition taken with `action` that produced `step`.
    pub fn record(&mut self, action: &[f64], step: &EnvStep) -> Result<()> {
        if action.len() != self.action_dim || step.observation.len() != self.obs_dim {
            return Err(Error::ShapeMismatch {
                op: "episode.record",
                lhs: vec![step.observation.len(), action.len()],
                rhs: vec![self.obs_dim, self.action_dim],
            });
        }
        if self.terminal {
            return Err(Error::InvalidArgument("episode already terminated".into()));
        }
        self.actions.extend_from_slice(action);
        self.rewards.push(step.reward);
        self.observations.extend_from_slice(&step.observation);
        self.dts.push(step.dt);
        self.terminal = step.done;
        Ok(())
    }

    /// Builds an episode from raw parts, validating their lengths.
    pub fn from_parts(
        obs_dim: usize,
        action_dim: usize,
        observations: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        dts: Vec<f64>,
        terminal: bool,
    ) -> Result<Self> {
        let t = rewards.len();
        if observations.len() != (t + 1) * obs_dim
            || actions.len() != t * action_dim
            || dts.len() != t + 1
        {
            return Err(Error::InvalidArgument(format!(
                "inconsistent episode parts: {} transitions, {} observation values, \
                 {} action values, {} intervals",
                t,
                observations.len(),
                actions.len(),
                dts.len()
            )));
        }
        Ok(Self {
            obs_dim,
            action_dim,
            observations,
            actions,
            rewards,
            dts,
            terminal,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn terminal(&self) -> bool {
        self.terminal
    }

    /// `o_t` for `t ∈ [0, T]`.
    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    /// `a_t` for `t ∈ [0, T)`.
    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t]
    }

    pub fn dt(&self, t: usize) -> f64 {
        self.dts[t]
    }

    /// Whether transition `t` ends in a terminal state.
    pub fn done(&self, t: usize) -> bool {
        self.terminal && t + 1 == self.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dts(&self) -> &[f64] {
        &self.dts
    }

    /// Writes `t, dt, o…, a…, r, done` rows, one per observation.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = vec!["t".to_string(), "dt".to_string()];
        header.extend((0..self.obs_dim).map(|i| format!("o{i}")));
        header.extend((0..self.action_dim).map(|i| format!("a{i}")));
        header.push("r".into());
        header.push("done".into());
        writeln!(w, "{}", header.join(","))?;
        let zeros = vec![0.0; self.action_dim];
        for t in 0..=self.len() {
            let mut row = vec![t.to_string(), fmt_f64(self.dt(t))];
            row.extend(self.observation(t).iter().map(|&v| fmt_f64(v)));
            let (prev_a, prev_r) = if t == 0 {
                (zeros.as_slice(), 0.0)
            } else {
                (self.action(t - 1), self.reward(t - 1))
            };
            row.extend(prev_a.iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64(prev_r));
            let done = t > 0 && self.done(t - 1);
            row.push(u8::from(done).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shortest round-tripping decimal form; never locale dependent.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
