//! GRU-ODE context encoder.
//!
//! Each step runs a discrete GRU update on the new input, evolves the
//! result through the learned vector field for the elapsed interval, and
//! reads a diagonal Gaussian context off the evolved state:
//!
//! ```text
//! h̃_t = GRUCell(h_{t-1}, x_t)
//! h_t = ODESolve(f_θ, h̃_t, dt_t)
//! z_t ~ N(μ(h_t), σ(h_t))
//! ```
//!
//! The regulariser at step `t` is `KL(N(μ_t, σ_t) ‖ N(μ_{t-1}, σ_{t-1}))`
//! against the gradient-stopped previous posterior, starting from `N(0, I)`.

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Embedder, EmbedderSpec, GaussianHead, GruCell, InputMode, DEFAULT_SIGMA_FLOOR};
use crate::odeint::{ode_solve, DynamicsNet, SolverChoice};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub context_dim: usize,
    /// Layer widths of the vector field, input and output included.
    pub dynamics_sizes: Vec<usize>,
    pub embed: EmbedderSpec,
    pub input_mode: InputMode,
    pub solver: SolverChoice,
    pub sigma_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            context_dim: 32,
            dynamics_sizes: vec![128, 128],
            embed: EmbedderSpec::default(),
            input_mode: InputMode::Oar,
            solver: SolverChoice::default(),
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    pub embedder: Embedder,
    pub gru: GruCell,
    pub dynamics: DynamicsNet,
    pub head: GaussianHead,
}

/// Diagonal Gaussian context `z_t` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianContext {
    pub mu: Var,
    pub sigma: Var,
    /// `mu + sigma ⊙ ε`, or `mu` itself when no noise was supplied.
    pub sample: Var,
}

/// Recurrent state threaded between steps on one tape.
#[derive(Clone, Copy, Debug)]
pub struct StepState {
    pub h: Var,
    pub prior_mu: Var,
    pub prior_sigma: Var,
}

/// Tape-independent encoder state carried across environment steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub h: Tensor,
    pub prior_mu: Tensor,
    pub prior_sigma: Tensor,
}

impl EncoderState {
    /// `h = 0`, prior `N(0, I)`.
    pub fn initial(batch: usize, hidden_dim: usize, context_dim: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden_dim]),
            prior_mu: Tensor::zeros(&[batch, context_dim]),
            prior_sigma: Tensor::full(&[batch, context_dim], 1.0),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> StepState {
        StepState {
            h: tape.constant(self.h.clone()),
            prior_mu: tape.constant(self.prior_mu.clone()),
            prior_sigma: tape.constant(self.prior_sigma.clone()),
        }
    }

    pub fn read(tape: &Tape, state: &StepState) -> Self {
        Self {
            h: tape.value(state.h).clone(),
            prior_mu: tape.value(state.prior_mu).clone(),
            prior_sigma: tape.value(state.prior_sigma).clone(),
        }
    }
}

/// Output of [`ContextEncoder::encode_sequence`].
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub contexts: Vec<GaussianContext>,
    /// Per-step KL, each `[batch, 1]`.
    pub kl: Vec<Var>,
    /// `Σ_t Σ_rows kl_t`, a scalar.
    pub kl_total: Var,
    pub final_state: StepState,
}

/// Closed-form `KL(N(μ, σ) ‖ N(μ_p, σ_p))` summed over the last axis:
/// `ln(σ_p/σ) + ((μ − μ_p)² + σ²) / (2σ_p²) − 1/2`. Returns `[rows, 1]`.
pub fn gaussian_kl(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    prior_mu: Var,
    prior_sigma: Var,
) -> Result<Var> {
    let log_prior = tape.log(prior_sigma)?;
    let log_sigma = tape.log(sigma)?;
    let log_ratio = tape.sub(log_prior, log_sigma)?;
    let diff = tape.sub(mu, prior_mu)?;
    let diff2 = tape.square(diff);
    let var = tape.square(sigma);
    let num = tape.add(diff2, var)?;
    let prior_var = tape.square(prior_sigma);
    let denom = tape.scale(prior_var, 2.0);
    let inv = tape.recip(denom)?;
    let quad = tape.mul(num, inv)?;
    let per_dim = tape.add(log_ratio, quad)?;
    let per_dim = tape.add_scalar(per_dim, -0.5);
    Ok(tape.sum_cols(per_dim))
}

/// Scalar form of [`gaussian_kl`] for a single dimension.
pub fn gaussian_kl_value(mu: f64, sigma: f64, prior_mu: f64, prior_sigma: f64) -> f64 {
    (prior_sigma / sigma).ln()
        + ((mu - prior_mu).powi(2) + sigma * sigma) / (2.0 * prior_sigma * prior_sigma)
        - 0.5
}

impl ContextEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        config: EncoderConfig,
        obs_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embedder = Embedder::new(
            params,
            &format!("{name}.embed"),
            config.embed,
            config.input_mode,
            obs_dim,
            action_dim,
            rng,
        );
        let gru = GruCell::new(
            params,
            &format!("{name}.gru"),
            embedder.out_dim(),
            config.hidden_dim,
            rng,
        );
        let dynamics = DynamicsNet::new(
            params,
            &format!("{name}.dynamics"),
            config.dynamics_sizes.clone(),
            rng,
        )?;
        if dynamics.hidden_dim() != config.hidden_dim {
            return Err(Error::InvalidArgument(format!(
                "dynamics net width {} differs from hidden size {}",
                dynamics.hidden_dim(),
                config.hidden_dim
            )));
        }
        let head = GaussianHead::new(
            params,
            &format!("{name}.head"),
            config.hidden_dim,
            config.context_dim,
            config.sigma_floor,
            rng,
        );
        Ok(Self {
            config,
            embedder,
            gru,
            dynamics,
            head,
        })
    }

    pub fn obs_embed_dim(&self) -> usize {
        self.config.embed.obs
    }

    pub fn initial_state(&self, tape: &mut Tape, batch: usize) -> StepState {
        EncoderState::initial(batch, self.config.hidden_dim, self.config.context_dim).bind(tape)
    }

    /// Embeds `(o_t, a_{t-1}, r_t)`; returns `(x_t, obs embedding)`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        obs: Var,
        prev_action: Var,
        prev_reward: Var,
    ) -> Result<(Var, Var)> {
        self.embedder
            .embed_input(tape, p, obs, prev_action, prev_reward)
    }

    /// One encoder step. `noise`, when given, drives the reparameterised
    /// sample; `t` only labels errors.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: &StepState,
        x: Var,
        dt: &[f64],
        noise: Option<Tensor>,
        t: usize,
    ) -> Result<(StepState, GaussianContext, Var)> {
        let h_tilde = self.gru.forward(tape, p, state.h, x)?;
        let h = ode_solve(
            tape,
            |tape: &mut Tape, h| self.dynamics.eval(tape, p, h),
            h_tilde,
            dt,
            self.config.solver,
        )
        .map_err(|e| match e {
            Error::OdeDiverged { .. } => Error::EncoderDiverged(t),
            other => other,
        })?;
        if !tape.value(h).is_finite() {
            return Err(Error::EncoderDiverged(t));
        }
        let (mu, sigma) = self.head.forward(tape, p, h)?;
        let kl = gaussian_kl(tape, mu, sigma, state.prior_mu, state.prior_sigma)?;
        let sample = match noise {
            Some(eps) => tape.reparameterize(mu, sigma, eps)?,
            None => mu,
        };
        let next = StepState {
            h,
            prior_mu: tape.detach(mu),
            prior_sigma: tape.detach(sigma),
        };
        Ok((next, GaussianContext { mu, sigma, sample }, kl))
    }

    /// Left fold of [`encode_step`](Self::encode_step) over `(x_t, dt_t)`
    /// pairs from `state`.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: StepState,
        steps: &[(Var, Vec<f64>)],
        mut noise: impl FnMut(usize) -> Option<Tensor>,
    ) -> Result<SequenceOutput> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument(
                "encode_sequence needs at least one step".into(),
            ));
        }
        let mut state = state;
        let mut contexts = Vec::with_capacity(steps.len());
        let mut kl = Vec::with_capacity(steps.len());
        for (t, (x, dt)) in steps.iter().enumerate() {
            let (next, ctx, kl_t) = self.encode_step(tape, p, &state, *x, dt, noise(t), t)?;
            state = next;
            contexts.push(ctx);
            kl.push(kl_t);
        }
        let stacked = tape.stack_rows(&kl)?;
        let kl_total = tape.sum(stacked);
        Ok(SequenceOutput {
            contexts,
            kl,
            kl_total,
            final_state: state,
        })
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 6,
            context_dim: 3,
            dynamics_sizes: vec![6, 6],
            embed: EmbedderSpec {
                obs: 4,
                action: 2,
                reward: 2,
            },
            ..EncoderConfig::default()
        }
    }

    fn encoder(seed: u64) -> (ParamSet, ContextEncoder) {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ContextEncoder::new(&mut p, "enc", small_config(), 2, 1, &mut rng).unwrap();
        (p, enc)
    }

    fn kl_of(mu: &[f64], sigma: &[f64], pm: &[f64], ps: &[f64]) -> f64 {
        let mut t = Tape::new();
        let n = mu.len();
        let mut c = |v: &[f64]| t.constant(Tensor::matrix(1, n, v.to_vec()).unwrap());
        let (a, b, c2, d) = (c(mu), c(sigma), c(pm), c(ps));
        let kl = gaussian_kl(&mut t, a, b, c2, d).unwrap();
        t.value(kl).item()
    }

    #[test]
    fn zero_head_first_step_kl() {
        // σ = ln 2 + 1e-4 against N(0, 1), per dimension.
        let s = std::f64::consts::LN_2 + 1e-4;
        let per_dim = 0.106_664_488_160_576_17;
        assert_relative_eq!(gaussian_kl_value(0.0, s, 0.0, 1.0), per_dim, epsilon = 1e-15);
        assert_relative_eq!(kl_of(&[0.0; 3], &[s; 3], &[0.0; 3], &[1.0; 3]), 3.0 * per_dim, epsilon = 1e-14);

        let (mut p, enc) = encoder(1);
        for id in [
            enc.head.mean.weight,
            enc.head.mean.bias,
            enc.head.scale.weight,
            enc.head.scale.bias,
        ] {
            p.value_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let s0 = enc.initial_state(&mut t, 1);
        let o = t.constant(Tensor::matrix(1, 2, vec![0.4, -0.3]).unwrap());
        let a = t.constant(Tensor::zeros(&[1, 1]));
        let r = t.constant(Tensor::zeros(&[1, 1]));
        let (x, _) = enc.embed(&mut t, &b, o, a, r).unwrap();
        let (_, _, kl) = enc.encode_step(&mut t, &b, &s0, x, &[0.1], None, 0).unwrap();
        assert_relative_eq!(t.value(kl).item(), 3.0 * per_dim, epsilon = 1e-14);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let v = kl_of(&[0.3, -1.2], &[0.5, 2.0], &[0.3, -1.2], &[0.5, 2.0]);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn kl_anchor_value() {
        // ln(1/2) + (1 + 4)/2 − 1/2 = 2 − ln 2
        let expected = 2.0 - std::f64::consts::LN_2;
        assert_relative_eq!(kl_of(&[1.0], &[2.0], &[0.0], &[1.0]), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 1.3069, epsilon = 1e-4);
    }

    fn inputs(rng: &mut ChaCha8Rng, len: usize) -> Vec<[f64; 4]> {
        (0..len)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn run(p: &ParamSet, enc: &ContextEncoder, seq: &[[f64; 4]], dt: f64) -> (Vec<f64>, f64) {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let mut steps = Vec::new();
        for s in seq {
            let o = t.constant(Tensor::matrix(1, 2, s[..2].to_vec()).unwrap());
            let a = t.constant(Tensor::matrix(1, 1, vec![s[2]]).unwrap());
            let r = t.constant(Tensor::matrix(1, 1, vec![s[3]]).unwrap());
            steps.push((enc.embed(&mut t, &b, o, a, r).unwrap().0, vec![dt]));
        }
        let s0 = enc.initial_state(&mut t, 1);
        let out = enc.encode_sequence(&mut t, &b, s0, &steps, |_| None).unwrap();
        let z = t.value(out.contexts.last().unwrap().mu).data().to_vec();
        (z, t.value(out.kl_total).item())
    }

    #[test]
    fn length_one_sequence_is_one_step() {
        let (p, enc) = encoder(2);
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let o = t.constant(Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let a = t.constant(Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap());
        let r = t.constant(Tensor::matrix(2, 1, vec![-1.0, 0.0]).unwrap());
        let (x, _) = enc.embed(&mut t, &b, o, a, r).unwrap();
        let eps = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let s0 = enc.initial_state(&mut t, 2);
        let (st, ctx, kl) = enc
            .encode_step(&mut t, &b, &s0, x, &[0.1, 0.05], Some(eps.clone()), 0)
            .unwrap();
        let s0 = enc.initial_state(&mut t, 2);
        let seq = enc
            .encode_sequence(&mut t, &b, s0, &[(x, vec![0.1, 0.05])], |_| Some(eps.clone()))
            .unwrap();
        assert_eq!(t.value(seq.contexts[0].sample), t.value(ctx.sample));
        assert_eq!(t.value(seq.final_state.h), t.value(st.h));
        assert_eq!(t.value(seq.kl_total).item(), t.value(kl).data().iter().sum::<f64>());
    }

    #[test]
    fn rows_use_their_own_interval() {
        let (p, enc) = encoder(3);
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let o = t.constant(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.1, 0.2]).unwrap());
        let a = t.constant(Tensor::zeros(&[2, 1]));
        let r = t.constant(Tensor::zeros(&[2, 1]));
        let (x, _) = enc.embed(&mut t, &b, o, a, r).unwrap();
        let s0 = enc.initial_state(&mut t, 2);
        let (st, _, _) = enc.encode_step(&mut t, &b, &s0, x, &[0.1, 0.3], None, 0).unwrap();
        let h = t.value(st.h).clone();
        assert_ne!(h.row(0), h.row(1));
        let s1 = enc.initial_state(&mut t, 2);
        let (same, _, _) = enc.encode_step(&mut t, &b, &s1, x, &[0.3, 0.3], None, 0).unwrap();
        assert_eq!(t.value(same.h).row(1), h.row(1));
    }

    #[test]
    fn swapping_two_inputs_changes_final_context() {
        for seed in 0..20 {
            let (p, enc) = encoder(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = inputs(&mut rng, 5);
            let mut swapped = seq.clone();
            swapped.swap(1, 3);
            assert_ne!(run(&p, &enc, &seq, 0.1).0, run(&p, &enc, &swapped, 0.1).0, "seed {seed}");
        }
    }

    #[test]
    fn mismatched_dynamics_width_is_rejected() {
        let mut p = ParamSet::new();
        let cfg = EncoderConfig {
            dynamics_sizes: vec![5, 5],
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ContextEncoder::new(&mut p, "e", cfg, 2, 1, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in -5.0..5.0f64, pm in -5.0..5.0f64,
            s in 1e-3..10.0f64, ps in 1e-3..10.0f64,
        ) {
            prop_assert!(gaussian_kl_value(mu, s, pm, ps) >= -1e-12);
        }

        #[test]
        fn sequence_kl_is_nonnegative(seed in 0u64..500, len in 1usize..8, dt in 0.01..0.5f64) {
            let (p, enc) = encoder(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let seq = inputs(&mut rng, len);
            prop_assert!(run(&p, &enc, &seq, dt).1 >= 0.0);
        }
    }
}
