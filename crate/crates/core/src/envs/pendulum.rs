//! Swing-up pendulum (uniform rod, pivot at one end, θ = 0 upright).

use std::f64::consts::PI;

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const HORIZON: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let wrapped = theta - two_pi * ((theta - PI) / two_pi).ceil();
    // ceil can land one period low when theta − π is an exact multiple.
    if wrapped <= -PI {
        wrapped + two_pi
    } else {
        wrapped
    }
}

/// One semi-implicit Euler step. Returns the next state and the reward of
/// the current state/action pair, `−(θ² + 0.1ω² + 0.001u²)`.
pub fn pendulum_step(state: PendulumState, torque: f64, dt: f64) -> (PendulumState, f64) {
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let theta = wrap_angle(state.theta);
    let reward = -(theta * theta + 0.1 * state.omega * state.omega + 0.001 * u * u);
    let alpha = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
    let omega = (state.omega + dt * alpha).clamp(-MAX_SPEED, MAX_SPEED);
    let theta = wrap_angle(theta + dt * omega);
    (PendulumState { theta, omega }, reward)
}

/// Mechanical energy per unit moment of inertia, conserved by the
/// unforced, unclamped continuous dynamics.
pub fn energy(state: PendulumState) -> f64 {
    0.5 * state.omega * state.omega + 3.0 * GRAVITY / (2.0 * LENGTH) * state.theta.cos()
}
