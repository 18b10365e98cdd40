//! Acceptance criteria A1 to A10, one PASS/FAIL line each.
//!
//! The learning criteria (A5, A6, A7, A10) take hours on one core and only
//! run when `--include-ignored` or `--ignored` is passed, e.g.
//! `cargo test --release --test acceptance -- --include-ignored`.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use gruode::agents::{Agent, AgentKind};
use gruode::autodiff::Tape;
use gruode::config::RunConfig;
use gruode::encoder::gaussian_kl_value;
use gruode::error::Result;
use gruode::gradcheck;
use gruode::odeint;
use gruode::replay::{ReplayBuffer, SequenceBatch};
use gruode::run::{self, mean};
use gruode::trace::Episode;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn a1_gradient_integrity() -> Result<Outcome> {
    let start = Instant::now();
    let results = gradcheck::run_all()?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let worst = results
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0, f64::max);
    Ok(verdict(
        failed.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{} checks, worst error/tolerance {worst:.3}, {:.1}s, failed {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn a2_truncation_orders() -> Result<Outcome> {
    let start = Instant::now();
    let checks = odeint::order_suite()?;
    let elapsed = start.elapsed();
    let slopes: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.3}", c.scheme, c.slope))
        .collect();
    Ok(verdict(
        checks.iter().all(|c| c.passed()) && elapsed < Duration::from_secs(60),
        format!("slopes {}", slopes.join(", ")),
    ))
}

fn log_density(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn a3_kl_correctness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (qm, qs) = (rng.random_range(-0.5..0.5), rng.random_range(0.5..1.0));
        let (pm, ps) = (rng.random_range(-0.5..0.5), rng.random_range(0.5..1.0));
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = qm + qs * rng.sample::<f64, _>(StandardNormal);
            sum += log_density(x, qm, qs) - log_density(x, pm, ps);
        }
        worst = worst.max((gaussian_kl_value(qm, qs, pm, ps) - sum / n as f64).abs());
    }
    let mut self_kl: f64 = 0.0;
    for _ in 0..1000 {
        let (m, s) = (rng.random_range(-10.0..10.0), rng.random_range(1e-4..10.0));
        self_kl = self_kl.max(gaussian_kl_value(m, s, m, s).abs());
    }
    Ok(verdict(
        worst < 0.01 && self_kl < 1e-12,
        format!("max |closed form - MC| {worst:.5}, max KL(q||q) {self_kl:.1e}"),
    ))
}

fn tagged_episode(tag: usize, len: usize, terminal: bool) -> Episode {
    let obs = (0..=len)
        .flat_map(|t| [(tag * 1000 + t) as f64, 0.5])
        .collect();
    let actions = (0..len).map(|t| ((tag * 1000 + t) as f64).sin()).collect();
    let rewards = (0..len).map(|t| -((t % 5) as f64)).collect();
    let dts = vec![0.05; len + 1];
    Episode::from_parts(2, 1, obs, actions, rewards, dts, terminal).unwrap()
}

fn junk_padding(batch: &SequenceBatch, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let mut out = batch.clone();
    for (row, origin) in batch.origins.iter().enumerate() {
        for k in origin.valid..batch.seq_len() {
            out.action[k].data_mut()[row] = rng.random_range(-9.0..9.0);
            out.reward[k].data_mut()[row] = rng.random_range(-9.0..9.0);
        }
        for k in origin.valid + 1..=batch.seq_len() {
            for v in &mut out.obs[k].data_mut()[row * 2..row * 2 + 2] {
                *v = rng.random_range(-9.0..9.0);
            }
            out.dt[k][row] = 0.3;
        }
    }
    out
}

fn losses_and_grads(agent: &Agent, batch: &SequenceBatch) -> Result<Vec<f64>> {
    let mut all = Vec::new();
    for actor in [false, true] {
        let mut tape = Tape::new();
        let g = match (agent.config.kind, actor) {
            (AgentKind::Td3, false) => agent.td3_critic_loss(&mut tape, batch, 1)?,
            (AgentKind::Td3, true) => agent.td3_actor_loss(&mut tape, batch, 1)?,
            (AgentKind::Sac, false) => agent.sac_critic_loss(&mut tape, batch, 1)?,
            (AgentKind::Sac, true) => agent.sac_actor_loss(&mut tape, batch, 1)?,
        };
        tape.backward(g.loss)?;
        all.push(g.value);
        let tree = if actor { &agent.actor } else { &agent.critic };
        for id in tree.ids() {
            all.extend_from_slice(tape.grad(g.bound[id]).unwrap_or(&[]));
        }
    }
    Ok(all)
}

fn a4_replay_soundness() -> Result<Outcome> {
    let lens = [3, 200, 17, 64, 1, 90];
    let mut buffer = ReplayBuffer::new(10_000);
    let mut info = std::collections::HashMap::new();
    for (i, &len) in lens.iter().enumerate() {
        let id = buffer.push_episode(tagged_episode(i + 1, len, i % 2 == 0))?;
        info.insert(id, (i + 1, len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut rows, mut bad) = (0, 0);
    while rows < 100_000 {
        let batch = buffer.sample_batch(&mut rng, 100, 32)?;
        for (i, o) in batch.origins.iter().enumerate() {
            let (tag, len) = info[&o.episode_id];
            let mut ok = o.start < len && o.valid == 32.min(len - o.start);
            for k in 0..=32 {
                let t = o.start + k;
                let want = if t <= len { (tag * 1000 + t) as f64 } else { 0.0 };
                ok &= batch.obs[k].row(i)[0] == want;
                if k < 32 {
                    ok &= batch.mask[k].row(i)[0] == f64::from(u8::from(t < len));
                }
            }
            bad += usize::from(!ok);
            rows += 1;
        }
    }

    let mut masked_equal = true;
    for (kind, shared) in [
        (AgentKind::Td3, false),
        (AgentKind::Td3, true),
        (AgentKind::Sac, false),
        (AgentKind::Sac, true),
    ] {
        let (agent, batch) = gradcheck::tiny_agent(kind, shared, 5)?;
        let junk = junk_padding(&batch, &mut rng);
        masked_equal &= losses_and_grads(&agent, &batch)? == losses_and_grads(&agent, &junk)?;
    }
    Ok(verdict(
        bad == 0 && masked_equal,
        format!(
            "{rows} rows, {bad} malformed; losses and gradients ignore padding: {masked_equal}"
        ),
    ))
}

fn base_config(dir: &TempDir, name: &str, sets: &[&str]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for s in sets {
        cfg.apply_override(s)?;
    }
    cfg.out_dir = dir.path().join(name);
    Ok(cfg)
}

/// Width used by the short plumbing runs so they finish in seconds.
const COMPACT: &[&str] = &[
    "hidden_dim=32",
    "context_dim=4",
    "policy_hidden=64,64",
    "q_hidden=64,64",
    "batch_size=16",
    "seq_len=32",
    "eval_episodes=2",
];

fn a8_ablation_plumbing() -> Result<Outcome> {
    let dir = TempDir::new().expect("temp dir");
    let variants = [
        ("shared", "shared_encoder=true"),
        ("o", "input_mode=o"),
        ("oa", "input_mode=oa"),
        ("or", "input_mode=or"),
        ("oar", "input_mode=oar"),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, set) in variants {
        let mut sets = COMPACT.to_vec();
        sets.extend(["total_steps=5000", "eval_every=1000", set]);
        let cfg = base_config(&dir, name, &sets)?;
        match run::train(&cfg) {
            Ok(summary) => {
                let trained: Vec<_> = summary
                    .rows
                    .iter()
                    .filter(|r| r.env_step > cfg.learning_starts)
                    .collect();
                let finite = !trained.is_empty()
                    && trained.iter().all(|r| {
                        [r.critic_loss, r.actor_loss, r.kl_actor, r.kl_critic, r.return_mean]
                            .iter()
                            .all(|v| v.is_finite())
                    });
                ok &= finite;
                notes.push(format!("{name}:{}", if finite { "ok" } else { "non-finite" }));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{name}:error {e}"));
            }
        }
    }
    Ok(verdict(ok, notes.join(" ")))
}

fn a9_determinism() -> Result<Outcome> {
    let dir = TempDir::new().expect("temp dir");
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, extra) in [
        ("td3", &["agent=td3"][..]),
        ("sac", &["agent=sac"][..]),
        ("irregular", &["clock=uniform", "solver=rk4"][..]),
    ] {
        let mut sets = COMPACT.to_vec();
        sets.extend(["total_steps=3000", "eval_every=1000"]);
        sets.extend(extra);
        let mut bytes = Vec::new();
        for run_id in 0..2 {
            let cfg = base_config(&dir, &format!("{name}{run_id}"), &sets)?;
            run::train(&cfg)?;
            bytes.push(fs::read(cfg.out_dir.join("metrics.csv")).expect("metrics written"));
        }
        let same = bytes[0] == bytes[1];
        ok &= same;
        notes.push(format!("{name}:{}", if same { "identical" } else { "differs" }));
    }
    Ok(verdict(ok, notes.join(" ")))
}

/// Final 20-episode evaluation of one full training run.
fn final_eval(name: &str, sets: &[&str], seed: u64) -> Result<(f64, f64)> {
    let dir = TempDir::new().expect("temp dir");
    let mut cfg = base_config(&dir, name, sets)?;
    cfg.seed = seed;
    cfg.eval_every = cfg.total_steps;
    cfg.eval_episodes = 20;
    let summary = run::train(&cfg)?;
    let last = summary.rows.last().expect("final evaluation row");
    Ok((last.return_mean, last.length_mean))
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Trains on `sets` for each seed and counts seeds at least five random-policy
/// standard deviations above the random mean.
fn improvement(name: &str, sets: &[&str]) -> Result<(usize, Vec<f64>, Vec<String>)> {
    let mut passed = 0;
    let mut returns = Vec::new();
    let mut notes = Vec::new();
    for seed in SEEDS {
        let cfg = base_config(&TempDir::new().expect("temp dir"), name, sets)?;
        let base = run::random_policy_stats(cfg.env_spec()?, 200, seed)?;
        let (ret, _) = final_eval(name, sets, seed)?;
        let sigmas = (ret - base.mean_return()) / base.std_return();
        passed += usize::from(sigmas >= 5.0);
        returns.push(ret);
        notes.push(format!(
            "seed {seed}: {ret:.1} vs random {:.1}±{:.1} ({sigmas:.2} sd)",
            base.mean_return(),
            base.std_return()
        ));
    }
    Ok((passed, returns, notes))
}

fn a5_pendulum_p() -> Result<Outcome> {
    let (passed, _, notes) = improvement("pendulum_p", &[])?;
    Ok(verdict(passed == 3, notes.join("; ")))
}

fn a6_pendulum_v() -> Result<Outcome> {
    let (passed, _, notes) = improvement("pendulum_v", &["occlusion=v"])?;
    Ok(verdict(passed == 3, notes.join("; ")))
}

fn a7_irregular() -> Result<Outcome> {
    let mut regular = Vec::new();
    let mut irregular = Vec::new();
    for seed in SEEDS {
        regular.push(final_eval("regular", &[], seed)?.0);
        irregular.push(final_eval("irregular", &["clock=uniform"], seed)?.0);
    }
    let (r, i) = (mean(&regular), mean(&irregular));
    Ok(verdict(
        (i - r).abs() <= 0.25 * r.abs(),
        format!("irregular {i:.1} vs regular {r:.1}"),
    ))
}

fn a10_cartpole() -> Result<Outcome> {
    let sets = ["env=cartpole", "occlusion=p", "total_steps=100000"];
    let mut passed = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let cfg = base_config(&TempDir::new().expect("temp dir"), "cartpole", &sets)?;
        let base = run::random_policy_stats(cfg.env_spec()?, 200, seed)?;
        let (_, len) = final_eval("cartpole", &sets, seed)?;
        let ratio = len / base.mean_length();
        passed += usize::from(ratio >= 3.0);
        notes.push(format!("seed {seed}: length {len:.1} = {ratio:.2}x random"));
    }
    Ok(verdict(passed >= 2, notes.join("; ")))
}

type Criterion = (&'static str, &'static str, bool, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let long = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    // Integration-test binaries are also invoked with `--list` by some tools.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 10] = [
        ("A1", "gradient integrity", false, a1_gradient_integrity),
        ("A2", "truncation-error orders", false, a2_truncation_orders),
        ("A3", "KL correctness", false, a3_kl_correctness),
        ("A4", "replay soundness", false, a4_replay_soundness),
        ("A5", "Pendulum-P learning", true, a5_pendulum_p),
        ("A6", "Pendulum-V learning", true, a6_pendulum_v),
        ("A7", "irregular-clock robustness", true, a7_irregular),
        ("A8", "ablation plumbing", false, a8_ablation_plumbing),
        ("A9", "determinism", false, a9_determinism),
        ("A10", "CartPole-P learning", true, a10_cartpole),
    ];
    let mut failed = 0;
    for (id, title, is_long, check) in criteria {
        let start = Instant::now();
        let outcome = if is_long && !long {
            Ok(Outcome::Skipped)
        } else {
            check()
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(Outcome::Pass(d)) => println!("{id} PASS {title} ({secs:.1}s): {d}"),
            Ok(Outcome::Fail(d)) => {
                failed += 1;
                println!("{id} FAIL {title} ({secs:.1}s): {d}");
            }
            Ok(Outcome::Skipped) => {
                println!("{id} SKIP {title}: multi-hour run, pass --include-ignored")
            }
            Err(e) => {
                failed += 1;
                println!("{id} FAIL {title} ({secs:.1}s): error {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
