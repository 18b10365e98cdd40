//! Network building blocks: affine layers, MLPs, the GRU cell, input
//! embedders and the diagonal-Gaussian output head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

fn check_width(tape: &Tape, op: &'static str, x: Var, expected: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![expected],
        });
    }
    Ok(())
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform fan-in initialisation, `U(-s/√in, s/√in)` for weights and biases.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale / (in_dim as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = Tensor::new(vec![in_dim, out_dim], draw(in_dim * out_dim)).expect("shape");
        let b = Tensor::new(vec![out_dim], draw(out_dim)).expect("shape");
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        check_width(tape, "linear", x, self.in_dim)?;
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least an input and an output size, all positive; got {sizes:?}"
            )));
        }
        Ok(Self {
            sizes,
            hidden,
            output,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `last_layer_scale` multiplies the init range of the output layer.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        spec: MlpSpec,
        last_layer_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = spec.sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let scale = if i + 1 == n { last_layer_scale } else { 1.0 };
                Linear::new(
                    params,
                    &format!("{name}.{i}"),
                    spec.sizes[i],
                    spec.sizes[i + 1],
                    scale,
                    rng,
                )
            })
            .collect();
        Self { spec, layers }
    }

    pub fn in_dim(&self) -> usize {
        self.spec.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.sizes.last().expect("validated")
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            let act = if i + 1 == self.layers.len() {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(tape, h);
        }
        Ok(h)
    }
}

/// Standard GRU cell over `[h, x]`:
///
/// ```text
/// u = σ(W_u [h, x] + b_u)
/// r = σ(W_r [h, x] + b_r)
/// c = tanh(W_c [r ⊙ h, x] + b_c)
/// h̃ = (1 − u) ⊙ h + u ⊙ c
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let joint = hidden_dim + input_dim;
        Self {
            update: Linear::new(
                params,
                &format!("{name}.update"),
                joint,
                hidden_dim,
                1.0,
                rng,
            ),
            reset: Linear::new(
                params,
                &format!("{name}.reset"),
                joint,
                hidden_dim,
                1.0,
                rng,
            ),
            candidate: Linear::new(
                params,
                &format!("{name}.candidate"),
                joint,
                hidden_dim,
                1.0,
                rng,
            ),
            input_dim,
            hidden_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, x: Var) -> Result<Var> {
        Ok(self.forward_with_gates(tape, p, h, x)?.0)
    }

    /// Returns `(h̃, candidate)`.
    pub fn forward_with_gates(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        check_width(tape, "gru_cell(h)", h, self.hidden_dim)?;
        check_width(tape, "gru_cell(x)", x, self.input_dim)?;
        if tape.shape(h)[0] != tape.shape(x)[0] {
            return Err(Error::ShapeMismatch {
                op: "gru_cell",
                lhs: tape.shape(h).to_vec(),
                rhs: tape.shape(x).to_vec(),
            });
        }
        let hx = tape.concat(&[h, x])?;
        let u = self.update.forward(tape, p, hx)?;
        let u = tape.sigmoid(u);
        let r = self.reset.forward(tape, p, hx)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhx = tape.concat(&[rh, x])?;
        let c = self.candidate.forward(tape, p, rhx)?;
        let c = tape.tanh(c);
        // h + u ⊙ (c − h)
        let diff = tape.sub(c, h)?;
        let step = tape.mul(u, diff)?;
        Ok((tape.add(h, step)?, c))
    }
}

/// Maps a hidden state to a diagonal Gaussian: `μ = W_μ h + b_μ`,
/// `σ = softplus(W_σ h + b_σ) + floor`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Linear,
    pub scale: Linear,
    pub sigma_floor: f64,
}

impl GaussianHead {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        sigma_floor: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mean: Linear::new(params, &format!("{name}.mean"), in_dim, out_dim, 1.0, rng),
            scale: Linear::new(params, &format!("{name}.scale"), in_dim, out_dim, 1.0, rng),
            sigma_floor,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let mu = self.mean.forward(tape, p, h)?;
        let s = self.scale.forward(tape, p, h)?;
        let s = tape.softplus(s)?;
        let sigma = tape.add_scalar(s, self.sigma_floor);
        Ok((mu, sigma))
    }
}

/// Which parts of `(o_t, a_{t-1}, r_t)` enter the recurrent input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    O,
    Oa,
    Or,
    Oar,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [InputMode::O, InputMode::Oa, InputMode::Or, InputMode::Oar];

    pub fn uses_action(self) -> bool {
        matches!(self, InputMode::Oa | InputMode::Oar)
    }

    pub fn uses_reward(self) -> bool {
        matches!(self, InputMode::Or | InputMode::Oar)
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o" => Ok(InputMode::O),
            "oa" => Ok(InputMode::Oa),
            "or" => Ok(InputMode::Or),
            "oar" => Ok(InputMode::Oar),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::O => "o",
            InputMode::Oa => "oa",
            InputMode::Or => "or",
            InputMode::Oar => "oar",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedderSpec {
    pub obs: usize,
    pub action: usize,
    pub reward: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            obs: 32,
            action: 16,
            reward: 16,
        }
    }
}

impl EmbedderSpec {
    pub fn input_dim(&self, mode: InputMode) -> usize {
        self.obs
            + if mode.uses_action() { self.action } else { 0 }
            + if mode.uses_reward() { self.reward } else { 0 }
    }
}

/// One relu-activated linear layer per enabled input part.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub spec: EmbedderSpec,
    pub mode: InputMode,
    pub obs: Linear,
    pub action: Option<Linear>,
    pub reward: Option<Linear>,
}

impl Embedder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        spec: EmbedderSpec,
        mode: InputMode,
        obs_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let obs = Linear::new(params, &format!("{name}.obs"), obs_dim, spec.obs, 1.0, rng);
        let action = mode.uses_action().then(|| {
            Linear::new(
                params,
                &format!("{name}.action"),
                action_dim,
                spec.action,
                1.0,
                rng,
            )
        });
        let reward = mode
            .uses_reward()
            .then(|| Linear::new(params, &format!("{name}.reward"), 1, spec.reward, 1.0, rng));
        Self {
            spec,
            mode,
            obs,
            action,
            reward,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.spec.input_dim(self.mode)
    }

    pub fn embed_obs(&self, tape: &mut Tape, p: &Bound, obs: Var) -> Result<Var> {
        let e = self.obs.forward(tape, p, obs)?;
        Ok(tape.relu(e))
    }

    /// `x = [relu(E_o o), relu(E_a a_prev), relu(E_r r)]`, restricted to the
    /// parts the mode enables. Returns `(x, obs_embedding)`.
    pub fn embed_input(
        &self,
        tape: &mut Tape,
        p: &Bound,
        obs: Var,
        prev_action: Var,
        prev_reward: Var,
    ) -> Result<(Var, Var)> {
        let eo = self.embed_obs(tape, p, obs)?;
        let mut parts = vec![eo];
        if let Some(layer) = &self.action {
            let e = layer.forward(tape, p, prev_action)?;
            parts.push(tape.relu(e));
        }
        if let Some(layer) = &self.reward {
            let e = layer.forward(tape, p, prev_reward)?;
            parts.push(tape.relu(e));
        }
        let x = if parts.len() == 1 {
            eo
        } else {
            tape.concat(&parts)?
        };
        Ok((x, eo))
    }
}
