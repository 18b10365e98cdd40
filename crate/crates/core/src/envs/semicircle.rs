//! Point robot searching for a hidden goal on the upper unit semicircle.

use std::f64::consts::PI;

use rand::Rng;

pub const MAX_STEP: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.2;
pub const HORIZON: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemiCircleState {
    pub x: f64,
    pub y: f64,
    pub goal_x: f64,
    pub goal_y: f64,
}

impl SemiCircleState {
    /// Robot at the origin, goal uniform in angle on the upper semicircle.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let angle = rng.random_range(0.0..=PI);
        Self {
            x: 0.0,
            y: 0.0,
            goal_x: angle.cos(),
            goal_y: angle.sin(),
        }
    }

    pub fn distance_to_goal(&self) -> f64 {
        (self.x - self.goal_x).hypot(self.y - self.goal_y)
    }
}

/// Moves by the clamped action; reward 1 inside the goal radius, else 0.
pub fn semicircle_step(s: SemiCircleState, action: [f64; 2]) -> (SemiCircleState, f64) {
    let next = SemiCircleState {
        x: s.x + action[0].clamp(-MAX_STEP, MAX_STEP),
        y: s.y + action[1].clamp(-MAX_STEP, MAX_STEP),
        ..s
    };
    let reward = if next.distance_to_goal() < GOAL_RADIUS {
        1.0
    } else {
        0.0
    };
    (next, reward)
}
