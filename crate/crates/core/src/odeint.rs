//! Fixed-step explicit integrators for `dh/dt = f(h)`.
//!
//! Every scheme is written in terms of tape operations, so gradients flow
//! through the vector field and the initial state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Euler,
    Heun,
    Rk4,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Heun, Scheme::Rk4];

    /// Global order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            Scheme::Euler => 1,
            Scheme::Heun => 2,
            Scheme::Rk4 => 4,
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "heun" => Ok(Scheme::Heun),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Heun => "heun",
            Scheme::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolverChoice {
    pub scheme: Scheme,
    pub substeps: usize,
}

impl Default for SolverChoice {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            substeps: 1,
        }
    }
}

impl SolverChoice {
    pub fn new(scheme: Scheme, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        Ok(Self { scheme, substeps })
    }
}

/// Learned autonomous vector field `f_θ: ℝ^{d_h} → ℝ^{d_h}`.
#[derive(Clone, Debug)]
pub struct DynamicsNet {
    pub mlp: Mlp,
}

impl DynamicsNet {
    /// `sizes` lists every layer width including input and output, which
    /// must both equal the hidden size. Every layer is tanh-activated.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        sizes: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.first() != sizes.last() {
            return Err(Error::InvalidArgument(format!(
                "dynamics net must map the hidden size to itself, got {sizes:?}"
            )));
        }
        let spec = MlpSpec::new(sizes, Activation::Tanh, Activation::Tanh)?;
        Ok(Self {
            mlp: Mlp::new(params, name, spec, 1.0, rng),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn eval(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        self.mlp.forward(tape, p, h)
    }
}

/// `h + c·k` with `c` given per row.
fn axpy(tape: &mut Tape, h: Var, k: Var, c: &[f64]) -> Result<Var> {
    let scaled = tape.scale_rows(k, c)?;
    tape.add(h, scaled)
}

/// Integrates `dh/dt = f(h)` from `h0` over `dt[i]` for each row `i` of the
/// `[rows, d]` state, using `solver.substeps` equal steps of the chosen scheme.
pub fn ode_solve<F>(
    tape: &mut Tape,
    mut f: F,
    h0: Var,
    dt: &[f64],
    solver: SolverChoice,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if let Some(bad) = dt.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {bad}"
        )));
    }
    if !tape.value(h0).is_finite() {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let n = solver.substeps as f64;
    let step: Vec<f64> = dt.iter().map(|d| d / n).collect();
    let half: Vec<f64> = step.iter().map(|d| 0.5 * d).collect();
    let sixth: Vec<f64> = step.iter().map(|d| d / 6.0).collect();

    let mut h = h0;
    for substep in 0..solver.substeps {
        h = match solver.scheme {
            Scheme::Euler => {
                let k1 = f(tape, h)?;
                axpy(tape, h, k1, &step)?
            }
            Scheme::Heun => {
                let k1 = f(tape, h)?;
                let predictor = axpy(tape, h, k1, &step)?;
                let k2 = f(tape, predictor)?;
                let ks = tape.add(k1, k2)?;
                axpy(tape, h, ks, &half)?
            }
            Scheme::Rk4 => {
                let k1 = f(tape, h)?;
                let h2 = axpy(tape, h, k1, &half)?;
                let k2 = f(tape, h2)?;
                let h3 = axpy(tape, h, k2, &half)?;
                let k3 = f(tape, h3)?;
                let h4 = axpy(tape, h, k3, &step)?;
                let k4 = f(tape, h4)?;
                let k23 = tape.add(k2, k3)?;
                let k23 = tape.scale(k23, 2.0);
                let s = tape.add(k1, k23)?;
                let s = tape.add(s, k4)?;
                axpy(tape, h, s, &sixth)?
            }
        };
        if !tape.value(h).is_finite() {
            return Err(Error::OdeDiverged { substep });
        }
    }
    Ok(h)
}

/// Least-squares slope of `log(global error)` against `log(step size)` when
/// integrating `f` from `h0` over `[0, horizon]`, compared with `exact(horizon)`.
pub fn convergence_order<F>(
    f: F,
    h0: &[f64],
    horizon: f64,
    scheme: Scheme,
    steps: &[f64],
    exact: impl Fn(f64) -> Vec<f64>,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if steps.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "convergence fit needs at least 3 step sizes, got {}",
            steps.len()
        )));
    }
    let target = exact(horizon);
    let mut points = Vec::with_capacity(steps.len());
    for &step in steps {
        let n = (horizon / step).round();
        if n < 1.0 || (n * step - horizon).abs() > 1e-9 * horizon.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "step {step} does not divide horizon {horizon}"
            )));
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(Tensor::new(vec![1, h0.len()], h0.to_vec())?);
        let choice = SolverChoice::new(scheme, 1)?;
        for _ in 0..n as usize {
            h = ode_solve(&mut tape, &f, h, &[step], choice)?;
        }
        let err = tape
            .value(h)
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        points.push((step.ln(), err.ln()));
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Measured convergence slope of one scheme against its expected order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub scheme: Scheme,
    pub slope: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl OrderCheck {
    pub fn passed(&self) -> bool {
        (self.slope - self.expected).abs() <= self.tolerance
    }
}

/// Step sizes for [`order_suite`]; all divide the unit horizon.
pub const ORDER_STEPS: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.0125];

/// Global-error slopes on `dh/dt = −h` over `[0, 1]` for every scheme.
pub fn order_suite() -> Result<Vec<OrderCheck>> {
    let h0 = [1.0, -0.5, 2.0];
    let decay = |t: &mut Tape, h: Var| -> Result<Var> { Ok(t.neg(h)) };
    let exact = |t: f64| h0.iter().map(|x| x * (-t).exp()).collect();
    Scheme::ALL
        .iter()
        .map(|&scheme| {
            let slope = convergence_order(decay, &h0, 1.0, scheme, &ORDER_STEPS, exact)?;
            let expected = f64::from(scheme.order());
            let tolerance = match scheme {
                Scheme::Euler => 0.15,
                Scheme::Heun => 0.25,
                Scheme::Rk4 => 0.5,
            };
            Ok(OrderCheck {
                scheme,
                slope,
                expected,
                tolerance,
            })
        })
        .collect()
}
