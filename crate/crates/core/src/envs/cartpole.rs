//! Continuous-force cart-pole.

pub const GRAVITY: f64 = 9.8;
pub const MASS_CART: f64 = 1.0;
pub const MASS_POLE: f64 = 0.1;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const MAX_FORCE: f64 = 10.0;
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const X_LIMIT: f64 = 2.4;
pub const HORIZON: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn out_of_bounds(&self) -> bool {
        self.theta.abs() > THETA_LIMIT || self.x.abs() > X_LIMIT
    }
}

/// `(ẍ, θ̈)` for the given state and horizontal force.
pub fn accelerations(s: &CartPoleState, force: f64) -> (f64, f64) {
    let total_mass = MASS_CART + MASS_POLE;
    let pole_mass_length = MASS_POLE * POLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    (x_acc, theta_acc)
}

/// Semi-implicit Euler step (velocities first). Returns the next state,
/// the per-step reward `+1`, and whether the pole or cart left its bounds.
pub fn cartpole_step(s: CartPoleState, force: f64, dt: f64) -> (CartPoleState, f64, bool) {
    let force = force.clamp(-MAX_FORCE, MAX_FORCE);
    let (x_acc, theta_acc) = accelerations(&s, force);
    let x_dot = s.x_dot + dt * x_acc;
    let theta_dot = s.theta_dot + dt * theta_acc;
    let next = CartPoleState {
        x: s.x + dt * x_dot,
        x_dot,
        theta: s.theta + dt * theta_dot,
        theta_dot,
    };
    let failed = next.out_of_bounds();
    (next, 1.0, failed)
}
