//! Partially observable classic-control environments.
//!
//! [`PomdpEnv`] wraps one of the physics cores with an observation
//! occlusion, an observation clock (fixed or irregular interval), a
//! horizon and a seeded RNG. Agents act in `[-1, 1]^dim(a)`; the
//! environment rescales to its physical bounds.

pub mod cartpole;
pub mod pendulum;
pub mod semicircle;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use cartpole::{cartpole_step, CartPoleState};
use pendulum::{pendulum_step, PendulumState};
use semicircle::{semicircle_step, SemiCircleState};

pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Pendulum,
    CartPole,
    SemiCircle,
}

impl EnvKind {
    pub fn full_obs_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 2,
            EnvKind::CartPole => 4,
            EnvKind::SemiCircle => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::SemiCircle => 2,
            _ => 1,
        }
    }

    /// Physical magnitude of a unit action.
    pub fn max_action(self) -> f64 {
        match self {
            EnvKind::Pendulum => pendulum::MAX_TORQUE,
            EnvKind::CartPole => cartpole::MAX_FORCE,
            EnvKind::SemiCircle => semicircle::MAX_STEP,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            EnvKind::Pendulum => pendulum::HORIZON,
            EnvKind::CartPole => cartpole::HORIZON,
            EnvKind::SemiCircle => semicircle::HORIZON,
        }
    }

    /// Width of the hidden physical state reported by [`PomdpEnv::full_state`].
    pub fn full_state_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 2,
            EnvKind::CartPole => 4,
            EnvKind::SemiCircle => 4,
        }
    }

    pub fn full_state_names(self) -> &'static [&'static str] {
        match self {
            EnvKind::Pendulum => &["theta", "omega"],
            EnvKind::CartPole => &["x", "x_dot", "theta", "theta_dot"],
            EnvKind::SemiCircle => &["x", "y", "goal_x", "goal_y"],
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "cartpole" => Ok(EnvKind::CartPole),
            "semicircle" => Ok(EnvKind::SemiCircle),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::CartPole => "cartpole",
            EnvKind::SemiCircle => "semicircle",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Occlusion {
    Full,
    /// Keep positions and angles ("-P").
    PositionOnly,
    /// Keep velocities ("-V").
    VelocityOnly,
}

impl FromStr for Occlusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Occlusion::Full),
            "p" | "position" => Ok(Occlusion::PositionOnly),
            "v" | "velocity" => Ok(Occlusion::VelocityOnly),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for Occlusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Occlusion::Full => "full",
            Occlusion::PositionOnly => "p",
            Occlusion::VelocityOnly => "v",
        })
    }
}

/// Indices of the full observation kept under `mode`.
fn kept_indices(kind: EnvKind, mode: Occlusion) -> Result<&'static [usize]> {
    Ok(match (kind, mode) {
        (EnvKind::Pendulum, Occlusion::Full) => &[0, 1],
        (EnvKind::Pendulum, Occlusion::PositionOnly) => &[0],
        (EnvKind::Pendulum, Occlusion::VelocityOnly) => &[1],
        (EnvKind::CartPole, Occlusion::Full) => &[0, 1, 2, 3],
        (EnvKind::CartPole, Occlusion::PositionOnly) => &[0, 2],
        (EnvKind::CartPole, Occlusion::VelocityOnly) => &[1, 3],
        (EnvKind::SemiCircle, Occlusion::Full) => &[0, 1],
        (EnvKind::SemiCircle, other) => {
            return Err(Error::InvalidArgument(format!(
                "occlusion `{other}` is not defined for the semicircle task"
            )))
        }
    })
}

/// Drops the entries hidden by `mode` from a full observation.
pub fn occlude(kind: EnvKind, full: &[f64], mode: Occlusion) -> Result<Vec<f64>> {
    if full.len() != kind.full_obs_dim() {
        return Err(Error::ShapeMismatch {
            op: "occlude",
            lhs: vec![full.len()],
            rhs: vec![kind.full_obs_dim()],
        });
    }
    Ok(kept_indices(kind, mode)?.iter().map(|&i| full[i]).collect())
}

/// Spacing of successive observations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clock {
    /// Every interval equals `delta`.
    Fixed { delta: f64 },
    /// Intervals drawn from `U(0, 2·delta]`.
    Uniform { delta: f64 },
}

impl Clock {
    pub fn delta(&self) -> f64 {
        match *self {
            Clock::Fixed { delta } | Clock::Uniform { delta } => delta,
        }
    }

    pub fn is_irregular(&self) -> bool {
        matches!(self, Clock::Uniform { .. })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        irregular_clock(rng, *self)
    }
}

/// Draws the next observation interval.
pub fn irregular_clock(rng: &mut impl Rng, clock: Clock) -> f64 {
    match clock {
        Clock::Fixed { delta } => delta,
        Clock::Uniform { delta } => {
            // 1 − U[0, 1) lies in (0, 1].
            let u: f64 = rng.random();
            2.0 * delta * (1.0 - u)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub occlusion: Occlusion,
    pub clock: Clock,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, occlusion: Occlusion, clock: Clock) -> Result<Self> {
        kept_indices(kind, occlusion)?;
        if clock.delta().is_nan() || clock.delta() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "clock delta must be positive, got {}",
                clock.delta()
            )));
        }
        Ok(Self {
            kind,
            occlusion,
            clock,
        })
    }

    pub fn pendulum_p() -> Self {
        Self::new(
            EnvKind::Pendulum,
            Occlusion::PositionOnly,
            Clock::Fixed {
                delta: DEFAULT_DELTA,
            },
        )
        .expect("valid")
    }

    pub fn obs_dim(&self) -> usize {
        kept_indices(self.kind, self.occlusion).map_or(0, |k| k.len())
    }

    pub fn action_dim(&self) -> usize {
        self.kind.action_dim()
    }

    pub fn horizon(&self) -> usize {
        self.kind.horizon()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Terminal: the task ended and the value of the next state is zero.
    pub done: bool,
    /// The horizon was reached without termination.
    pub truncated: bool,
    /// Simulated seconds since the previous observation.
    pub dt: f64,
}

impl EnvStep {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Physics {
    Pendulum(PendulumState),
    CartPole(CartPoleState),
    SemiCircle(SemiCircleState),
}

#[derive(Clone, Debug)]
pub struct PomdpEnv {
    spec: EnvSpec,
    physics: Physics,
    rng: ChaCha8Rng,
    steps: usize,
}

impl PomdpEnv {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let physics = Self::initial_physics(spec.kind, &mut rng);
        Self {
            spec,
            physics,
            rng,
            steps: 0,
        }
    }

    fn initial_physics(kind: EnvKind, rng: &mut ChaCha8Rng) -> Physics {
        match kind {
            EnvKind::Pendulum => Physics::Pendulum(PendulumState {
                theta: rng.random_range(-PI..=PI),
                omega: rng.random_range(-1.0..=1.0),
            }),
            EnvKind::CartPole => {
                let mut u = || rng.random_range(-0.05..=0.05);
                Physics::CartPole(CartPoleState {
                    x: u(),
                    x_dot: u(),
                    theta: u(),
                    theta_dot: u(),
                })
            }
            EnvKind::SemiCircle => Physics::SemiCircle(SemiCircleState::sample(rng)),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden physical state (what the occluded observation leaves out).
    pub fn full_state(&self) -> Vec<f64> {
        match self.physics {
            Physics::Pendulum(s) => vec![s.theta, s.omega],
            Physics::CartPole(s) => s.to_vec(),
            Physics::SemiCircle(s) => vec![s.x, s.y, s.goal_x, s.goal_y],
        }
    }

    fn full_observation(&self) -> Vec<f64> {
        match self.physics {
            Physics::Pendulum(s) => vec![s.theta, s.omega],
            Physics::CartPole(s) => s.to_vec(),
            Physics::SemiCircle(s) => vec![s.x, s.y],
        }
    }

    fn observe(&self) -> Vec<f64> {
        occlude(
            self.spec.kind,
            &self.full_observation(),
            self.spec.occlusion,
        )
        .expect("occlusion validated by EnvSpec")
    }

    /// Starts a new episode. The first observation carries the nominal interval.
    pub fn reset(&mut self) -> EnvStep {
        self.physics = Self::initial_physics(self.spec.kind, &mut self.rng);
        self.steps = 0;
        EnvStep {
            observation: self.observe(),
            reward: 0.0,
            done: false,
            truncated: false,
            dt: self.spec.clock.delta(),
        }
    }

    /// Advances by the next clock interval with a normalised action in `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let dt = self.spec.clock.sample(&mut self.rng);
        self.step_with_dt(action, dt)
    }

    /// Advances by an explicit interval.
    pub fn step_with_dt(&mut self, action: &[f64], dt: f64) -> Result<EnvStep> {
        if action.len() != self.action_dim() {
            return Err(Error::ShapeMismatch {
                op: "env.step",
                lhs: vec![action.len()],
                rhs: vec![self.action_dim()],
            });
        }
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "dt must be positive, got {dt}"
            )));
        }
        let scale = self.spec.kind.max_action();
        let a: Vec<f64> = action
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    x.clamp(-1.0, 1.0) * scale
                } else {
                    0.0
                }
            })
            .collect();
        let (reward, failed) = match &mut self.physics {
            Physics::Pendulum(s) => {
                let (next, r) = pendulum_step(*s, a[0], dt);
                *s = next;
                (r, false)
            }
            Physics::CartPole(s) => {
                let (next, r, failed) = cartpole_step(*s, a[0], dt);
                *s = next;
                (r, failed)
            }
            Physics::SemiCircle(s) => {
                let (next, r) = semicircle_step(*s, [a[0], a[1]]);
                *s = next;
                (r, false)
            }
        };
        self.steps += 1;
        Ok(EnvStep {
            observation: self.observe(),
            reward,
            done: failed,
            truncated: !failed && self.steps >= self.spec.horizon(),
            dt,
        })
    }
}
