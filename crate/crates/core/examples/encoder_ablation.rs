//! Short runs of every encoder input mode plus the shared-encoder variant.
//!
//! Usage: `cargo run --release --example encoder_ablation [STEPS]`

use gruode::config::RunConfig;
use gruode::run;

fn main() -> gruode::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let variants = [
        ("o", "input_mode=o"),
        ("oa", "input_mode=oa"),
        ("or", "input_mode=or"),
        ("oar", "input_mode=oar"),
        ("shared", "shared_encoder=true"),
    ];
    for (name, set) in variants {
        let mut cfg = RunConfig::default();
        cfg.apply_override(set)?;
        cfg.total_steps = steps;
        cfg.eval_every = steps;
        cfg.eval_episodes = 5;
        cfg.out_dir = std::env::temp_dir().join(format!("gruode-examples/ablation_{name}"));
        let summary = run::train(&cfg)?;
        let last = summary.rows.last().expect("final evaluation");
        println!(
            "{name:<7} params {:>7}  return {:>9.2}  critic {:>8.4}  kl {:>7.4}",
            summary.agent.num_parameters(),
            last.return_mean,
            last.critic_loss,
            last.kl_critic
        );
    }
    Ok(())
}
