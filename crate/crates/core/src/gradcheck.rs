//! Finite-difference verification of every differentiable component.
//!
//! Each check compares reverse-mode gradients of a scalar against central
//! differences `(f(θ + h) − f(θ − h)) / 2h`, element by element, using the
//! relative error `|a − n| / max(|a|, |n|, REL_FLOOR)`. Non-scalar outputs
//! are reduced with a fixed weight pattern so every output entry matters.
//! Perturbed passes replay the reference pass's detached values, so both
//! routes differentiate the same stop-gradient function.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{Agent, AgentConfig, AgentKind, LossGraph};
use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::encoder::{ContextEncoder, EncoderConfig};
use crate::error::Result;
use crate::nn::{
    Activation, Embedder, EmbedderSpec, GaussianHead, GruCell, InputMode, Linear, Mlp, MlpSpec,
};
use crate::odeint::{ode_solve, DynamicsNet, Scheme, SolverChoice};
use crate::replay::SequenceBatch;
use crate::trace::Episode;

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Tolerance for losses unrolled through long encoder sequences.
pub const SEQUENCE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of scalars compared.
    pub scalars: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients of `eval` at `params` with central differences.
pub fn compare(
    name: &str,
    tolerance: f64,
    params: &ParamSet,
    analytic: &[Vec<f64>],
    mut eval: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<CheckResult> {
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..params.get(id).value.numel() {
            let x0 = params.get(id).value.data()[i];
            work.value_mut(id).data_mut()[i] = x0 + FD_STEP;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = x0 - FD_STEP;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[pi][i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            scalars += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
        scalars,
    })
}

/// Fixed weights `sin(1.3 i + 0.7) + 0.1` for reducing an output to a scalar.
fn reduction_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
    if tape.value(v).numel() == 1 && tape.shape(v).is_empty() {
        return Ok(v);
    }
    let w = tape.constant(reduction_weights(tape.shape(v)));
    let weighted = tape.mul(v, w)?;
    Ok(tape.sum(weighted))
}

/// Checks the gradient of a graph built from `params` by `build`.
pub fn check_graph(
    name: &str,
    tolerance: f64,
    params: &ParamSet,
    build: impl Fn(&mut Tape, &Bound) -> Result<Var>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let out = build(&mut tape, &b)?;
    let loss = reduce(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| {
            tape.grad(b[id])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; params.get(id).value.numel()])
        })
        .collect();
    let pinned: Vec<Arc<Tensor>> = tape.detached_values().to_vec();
    compare(name, tolerance, params, &analytic, |p| {
        let mut tape = Tape::with_pinned_detach(pinned.clone());
        let b = p.bind(&mut tape, true);
        let out = build(&mut tape, &b)?;
        let loss = reduce(&mut tape, out)?;
        Ok(tape.value(loss).item())
    })
}

/// `U(-1, 1)` tensor.
fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// Entries with magnitude in `[0.2, 2]`, random sign: away from kinks at zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).map(|x| x.signum() * (0.2 + 1.8 * x.abs()))
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).map(|x| 1.25 + 0.75 * x)
}

const SHAPES: [(usize, usize); 3] = [(1, 3), (3, 4), (5, 2)];

/// Every tape operation on three shapes each.
pub fn check_ops() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for (si, &(m, n)) in SHAPES.iter().enumerate() {
        let tag = |op: &str| format!("op.{op}[{m}x{n}]");
        let s = [m, n];
        let mut run = |op: &str,
                       inputs: Vec<Tensor>,
                       build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>|
         -> Result<()> {
            let mut p = ParamSet::new();
            let ids: Vec<_> = inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| p.add(format!("x{i}"), t))
                .collect();
            out.push(check_graph(&tag(op), TOLERANCE, &p, |tape, b| {
                let vars: Vec<Var> = ids.iter().map(|&id| b[id]).collect();
                build(tape, &vars)
            })?);
            Ok(())
        };
        let k = [2, 4, 3][si];
        run("matmul", vec![uniform(&mut rng, &[m, k]), uniform(&mut rng, &[k, n])], &|t, v| {
            t.matmul(v[0], v[1])
        })?;
        run("add", vec![uniform(&mut rng, &s), uniform(&mut rng, &s)], &|t, v| t.add(v[0], v[1]))?;
        run("add_row", vec![uniform(&mut rng, &s), uniform(&mut rng, &[n])], &|t, v| {
            t.add(v[0], v[1])
        })?;
        run("sub", vec![uniform(&mut rng, &s), uniform(&mut rng, &s)], &|t, v| t.sub(v[0], v[1]))?;
        run("mul", vec![uniform(&mut rng, &s), uniform(&mut rng, &s)], &|t, v| t.mul(v[0], v[1]))?;
        run("mul_row", vec![uniform(&mut rng, &s), uniform(&mut rng, &[1, n])], &|t, v| {
            t.mul(v[0], v[1])
        })?;
        let a = uniform(&mut rng, &s);
        let gap = away_from_zero(&mut rng, &s);
        let b = Tensor::new(
            s.to_vec(),
            a.data().iter().zip(gap.data()).map(|(x, g)| x + 0.5 * g).collect(),
        )?;
        run("minimum", vec![a, b], &|t, v| t.minimum(v[0], v[1]))?;
        run("scale", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
        run("neg", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.neg(v[0])))?;
        run("add_scalar", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.add_scalar(v[0], 0.3)))?;
        let factors: Vec<f64> = (0..m).map(|i| 0.1 + 0.3 * i as f64).collect();
        run("scale_rows", vec![uniform(&mut rng, &s)], &|t, v| t.scale_rows(v[0], &factors))?;
        run("concat", vec![uniform(&mut rng, &s), uniform(&mut rng, &[m, 2])], &|t, v| {
            t.concat(&[v[0], v[1]])
        })?;
        run("stack_rows", vec![uniform(&mut rng, &s), uniform(&mut rng, &[2, n])], &|t, v| {
            t.stack_rows(&[v[0], v[1]])
        })?;
        run("slice_rows", vec![uniform(&mut rng, &[m + 2, n])], &|t, v| {
            t.slice_rows(v[0], 1, m)
        })?;
        run("tanh", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.tanh(v[0])))?;
        run("sigmoid", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.sigmoid(v[0])))?;
        run("relu", vec![away_from_zero(&mut rng, &s)], &|t, v| Ok(t.relu(v[0])))?;
        run("softplus", vec![uniform(&mut rng, &s)], &|t, v| t.softplus(v[0]))?;
        run("exp", vec![uniform(&mut rng, &s)], &|t, v| t.exp(v[0]))?;
        run("log", vec![positive(&mut rng, &s)], &|t, v| t.log(v[0]))?;
        run("square", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.square(v[0])))?;
        run("recip", vec![away_from_zero(&mut rng, &s)], &|t, v| t.recip(v[0]))?;
        // Bounds at ±0.9 with inputs kept off them.
        let c = uniform(&mut rng, &s).map(|x| if (x.abs() - 0.9).abs() < 0.05 { x * 0.5 } else { 2.0 * x });
        run("clamp", vec![c], &|t, v| Ok(t.clamp(v[0], -0.9, 0.9)))?;
        run("sum", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.sum(v[0])))?;
        run("mean", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.mean(v[0])))?;
        run("sum_cols", vec![uniform(&mut rng, &s)], &|t, v| Ok(t.sum_cols(v[0])))?;
        let eps = uniform(&mut rng, &s);
        run("reparameterize", vec![uniform(&mut rng, &s), positive(&mut rng, &s)], &|t, v| {
            t.reparameterize(v[0], v[1], eps.clone())
        })?;
    }
    Ok(out)
}

/// Linear, MLP, GRU cell, Gaussian head and embedders, with respect to
/// both weights and inputs.
pub fn check_nn() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out = Vec::new();
    for &(rows, width) in &SHAPES {
        let mut p = ParamSet::new();
        let layer = Linear::new(&mut p, "lin", width, 3, 1.0, &mut rng);
        let x = p.add("x", uniform(&mut rng, &[rows, width]));
        out.push(check_graph(&format!("nn.linear[{rows}x{width}]"), TOLERANCE, &p, |t, b| {
            layer.forward(t, b, b[x])
        })?);
    }
    for (hidden, tag) in [(Activation::Tanh, "tanh"), (Activation::Relu, "relu")] {
        let mut p = ParamSet::new();
        let spec = MlpSpec::new(vec![3, 5, 4, 2], hidden, Activation::Tanh)?;
        let mlp = Mlp::new(&mut p, "mlp", spec, 1.0, &mut rng);
        let x = p.add("x", uniform(&mut rng, &[4, 3]));
        out.push(check_graph(&format!("nn.mlp.{tag}"), TOLERANCE, &p, |t, b| {
            mlp.forward(t, b, b[x])
        })?);
    }
    let mut p = ParamSet::new();
    let gru = GruCell::new(&mut p, "gru", 4, 5, &mut rng);
    let h = p.add("h", uniform(&mut rng, &[3, 5]));
    let x = p.add("x", uniform(&mut rng, &[3, 4]));
    out.push(check_graph("nn.gru_cell", TOLERANCE, &p, |t, b| gru.forward(t, b, b[h], b[x]))?);

    let mut p = ParamSet::new();
    let head = GaussianHead::new(&mut p, "head", 5, 3, 1e-4, &mut rng);
    let h = p.add("h", uniform(&mut rng, &[2, 5]));
    out.push(check_graph("nn.gaussian_head", TOLERANCE, &p, |t, b| {
        let (mu, sigma) = head.forward(t, b, b[h])?;
        t.concat(&[mu, sigma])
    })?);

    for mode in InputMode::ALL {
        let mut p = ParamSet::new();
        let spec = EmbedderSpec { obs: 3, action: 2, reward: 2 };
        let emb = Embedder::new(&mut p, "emb", spec, mode, 2, 1, &mut rng);
        let o = p.add("o", uniform(&mut rng, &[3, 2]));
        let a = p.add("a", uniform(&mut rng, &[3, 1]));
        let r = p.add("r", uniform(&mut rng, &[3, 1]));
        out.push(check_graph(&format!("nn.embedder.{mode}"), TOLERANCE, &p, |t, b| {
            Ok(emb.embed_input(t, b, b[o], b[a], b[r])?.0)
        })?);
    }
    Ok(out)
}

/// ODE solves through a small tanh vector field for every scheme.
pub fn check_odeint() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut out = Vec::new();
    for scheme in Scheme::ALL {
        for substeps in [1, 3] {
            let mut p = ParamSet::new();
            let field = DynamicsNet::new(&mut p, "f", vec![4, 6, 4], &mut rng)?;
            let h0 = p.add("h0", uniform(&mut rng, &[3, 4]));
            let dt = [0.1, 0.05, 0.3];
            let solver = SolverChoice::new(scheme, substeps)?;
            out.push(check_graph(
                &format!("odeint.{scheme}.substeps{substeps}"),
                TOLERANCE,
                &p,
                |t, b| ode_solve(t, |t: &mut Tape, h| field.eval(t, b, h), b[h0], &dt, solver),
            )?);
        }
    }
    Ok(out)
}

fn tiny_encoder_config(scheme: Scheme) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 4,
        context_dim: 3,
        dynamics_sizes: vec![4, 4],
        embed: EmbedderSpec { obs: 3, action: 2, reward: 2 },
        input_mode: InputMode::Oar,
        solver: SolverChoice::new(scheme, 1).expect("valid"),
        ..EncoderConfig::default()
    }
}

/// Length-8 encoder unrolls: every context sample plus the summed KL.
pub fn check_encoder() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut out = Vec::new();
    for scheme in [Scheme::Euler, Scheme::Rk4] {
        let (batch, len) = (2, 8);
        let mut p = ParamSet::new();
        let enc = ContextEncoder::new(&mut p, "enc", tiny_encoder_config(scheme), 2, 1, &mut rng)?;
        let obs: Vec<Tensor> = (0..len).map(|_| uniform(&mut rng, &[batch, 2])).collect();
        let act: Vec<Tensor> = (0..len).map(|_| uniform(&mut rng, &[batch, 1])).collect();
        let rew: Vec<Tensor> = (0..len).map(|_| uniform(&mut rng, &[batch, 1])).collect();
        let noise: Vec<Tensor> = (0..len).map(|_| uniform(&mut rng, &[batch, 3])).collect();
        let dts: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..batch).map(|_| rng.random_range(0.02..0.2)).collect())
            .collect();
        out.push(check_graph(
            &format!("encoder.sequence8.{scheme}"),
            SEQUENCE_TOLERANCE,
            &p,
            |t, b| {
                let mut steps = Vec::with_capacity(len);
                for k in 0..len {
                    let o = t.constant(obs[k].clone());
                    let a = t.constant(act[k].clone());
                    let r = t.constant(rew[k].clone());
                    let (x, _) = enc.embed(t, b, o, a, r)?;
                    steps.push((x, dts[k].clone()));
                }
                let s0 = enc.initial_state(t, batch);
                let seq = enc.encode_sequence(t, b, s0, &steps, |k| Some(noise[k].clone()))?;
                let samples: Vec<Var> = seq.contexts.iter().map(|c| c.sample).collect();
                let z = t.stack_rows(&samples)?;
                let w = t.constant(reduction_weights(t.shape(z)));
                let zw = t.mul(z, w)?;
                let zs = t.sum(zw);
                t.add(zs, seq.kl_total)
            },
        )?);
    }
    Ok(out)
}

/// A small agent and a two-row batch whose second row is padded.
pub fn tiny_agent(kind: AgentKind, shared: bool, seed: u64) -> Result<(Agent, SequenceBatch)> {
    let config = AgentConfig {
        kind,
        shared_encoder: shared,
        policy_hidden: vec![5],
        q_hidden: vec![5],
        encoder: tiny_encoder_config(Scheme::Euler),
        dt_scale: 2.0,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(config, 2, 1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    // Decouple targets from the online trees so target paths are exercised.
    for tree in [&mut agent.actor_target, &mut agent.critic_target] {
        let ids: Vec<_> = tree.ids().collect();
        for id in ids {
            for v in tree.value_mut(id).data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
    }
    let episode = |rng: &mut ChaCha8Rng, len: usize, terminal: bool| {
        Episode::from_parts(
            2,
            1,
            (0..(len + 1) * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..=len).map(|_| rng.random_range(0.02..0.08)).collect(),
            terminal,
        )
    };
    let long = episode(&mut rng, 6, false)?;
    let short = episode(&mut rng, 3, true)?;
    let batch = SequenceBatch::assemble(&[(&long, 0, 1), (&short, 1, 1)], 4)?;
    Ok((agent, batch))
}

type LossFn = fn(&Agent, &mut Tape, &SequenceBatch, u64) -> Result<LossGraph>;

fn check_agent_loss(
    name: &str,
    agent: &Agent,
    batch: &SequenceBatch,
    critic_tree: bool,
    loss: LossFn,
) -> Result<CheckResult> {
    let seed = 99;
    let mut tape = Tape::new();
    let g = loss(agent, &mut tape, batch, seed)?;
    tape.backward(g.loss)?;
    let tree = if critic_tree { &agent.critic } else { &agent.actor };
    let analytic: Vec<Vec<f64>> = tree
        .ids()
        .map(|id| {
            tape.grad(g.bound[id])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tree.get(id).value.numel()])
        })
        .collect();
    let pinned: Vec<Arc<Tensor>> = tape.detached_values().to_vec();
    let mut probe = agent.clone();
    compare(name, TOLERANCE, tree, &analytic, |p| {
        if critic_tree {
            probe.critic = p.clone();
        } else {
            probe.actor = p.clone();
        }
        let mut tape = Tape::with_pinned_detach(pinned.clone());
        Ok(loss(&probe, &mut tape, batch, seed)?.value)
    })
}

/// TD3 and SAC critic and actor objectives on tiny networks.
pub fn check_agents() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for shared in [false, true] {
        let tag = if shared { "shared" } else { "separate" };
        let (agent, batch) = tiny_agent(AgentKind::Td3, shared, 21)?;
        out.push(check_agent_loss(
            &format!("agents.td3.critic.{tag}"),
            &agent,
            &batch,
            true,
            Agent::td3_critic_loss,
        )?);
        out.push(check_agent_loss(
            &format!("agents.td3.actor.{tag}"),
            &agent,
            &batch,
            false,
            Agent::td3_actor_loss,
        )?);
    }
    let (agent, batch) = tiny_agent(AgentKind::Sac, false, 22)?;
    out.push(check_agent_loss("agents.sac.critic", &agent, &batch, true, Agent::sac_critic_loss)?);
    out.push(check_agent_loss("agents.sac.actor", &agent, &batch, false, Agent::sac_actor_loss)?);
    Ok(out)
}

/// The full suite, in module order.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = check_ops()?;
    out.extend(check_nn()?);
    out.extend(check_odeint()?);
    out.extend(check_encoder()?);
    out.extend(check_agents()?);
    Ok(out)
}
