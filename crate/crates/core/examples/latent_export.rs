//! Trains briefly, then writes per-step context means and scales next to the
//! true pendulum state.
//!
//! Usage: `cargo run --release --example latent_export [STEPS]`

use gruode::config::RunConfig;
use gruode::run::{self, EVAL_SEED_OFFSET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let cfg = RunConfig {
        total_steps: steps,
        eval_every: steps,
        eval_episodes: 2,
        out_dir: std::env::temp_dir().join("gruode-examples/latent_export"),
        ..RunConfig::default()
    };
    let summary = run::train(&cfg)?;
    let mut csv = Vec::new();
    let rows = run::export_latents(
        &summary.agent,
        cfg.env_spec()?,
        1,
        cfg.seed + EVAL_SEED_OFFSET,
        &mut csv,
    )?;
    let path = cfg.out_dir.join("latents.csv");
    std::fs::write(&path, &csv)?;
    println!("{rows} rows in {}", path.display());
    let text = String::from_utf8(csv)?;
    // First context dimension and the true state, for a quick look.
    for line in text.lines().take(6) {
        let fields: Vec<&str> = line.split(',').collect();
        let state = &fields[fields.len() - 2..];
        println!("{:>4} {:>10.10} | {:>10.10} {:>10.10}", fields[0], fields[1], state[0], state[1]);
    }
    Ok(())
}
