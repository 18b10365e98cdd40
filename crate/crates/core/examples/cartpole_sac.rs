//! Trains SAC with a GRU-ODE context on CartPole-P (positions only).
//!
//! Usage: `cargo run --release --example cartpole_sac [STEPS]`

use gruode::config::RunConfig;
use gruode::run;

fn main() -> gruode::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let mut cfg = RunConfig::default();
    for set in ["env=cartpole", "occlusion=p", "agent=sac"] {
        cfg.apply_override(set)?;
    }
    cfg.total_steps = steps;
    cfg.eval_every = (steps / 5).max(1);
    cfg.out_dir = std::env::temp_dir().join("gruode-examples/cartpole_sac");
    let random = run::random_policy_stats(cfg.env_spec()?, 50, cfg.seed)?;
    println!(
        "random policy: return {:.1} ± {:.1}, length {:.1}",
        random.mean_return(),
        random.std_return(),
        random.mean_length()
    );
    let summary = run::train(&cfg)?;
    for row in &summary.rows {
        println!(
            "step {:>7}  return {:>9.2} ± {:>7.2}  length {:>6.1}  critic {:>9.4}",
            row.env_step, row.return_mean, row.return_std, row.length_mean, row.critic_loss
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
