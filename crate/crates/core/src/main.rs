use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gruode::autodiff::Checkpoint;
use gruode::config::RunConfig;
use gruode::error::{Error, Result};
use gruode::run::{self, EvalStats};
use gruode::trace::fmt_f64;
use gruode::{gradcheck, odeint};

#[derive(Parser)]
#[command(version, about = "GRU-ODE context encoders for recurrent TD3/SAC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value configuration file; `#` starts a comment.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write config.txt, metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Write context means and scales with the true state, one row per step.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Defaults to latents.csv in the output directory.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Convergence orders of the ODE schemes.
    Odecheck {
        #[command(flatten)]
        common: Common,
    },
}

/// File (or `base`) first, then `--set` overrides, then `--seed` and `--out`.
fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    for assignment in &common.set {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(common: &Common) -> Result<bool> {
    let cfg = resolve(common, None)?;
    let summary = run::train(&cfg)?;
    if let Some(last) = summary.rows.last() {
        println!(
            "env_step={} return_mean={:.3} return_std={:.3} length_mean={:.1}",
            last.env_step, last.return_mean, last.return_std, last.length_mean
        );
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(true)
}

fn evaluate(common: &Common, checkpoint: &Path, episodes: usize) -> Result<bool> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = resolve(common, Some(run::checkpoint_config(&ckpt)?))?;
    let eps = run::evaluate(&ckpt, &cfg, episodes)?;
    let stats = EvalStats::from_episodes(&eps);
    println!(
        "episodes={} return_mean={} return_std={} length_mean={}",
        episodes,
        fmt_f64(stats.mean_return()),
        fmt_f64(stats.std_return()),
        fmt_f64(stats.mean_length())
    );
    if common.out.is_some() {
        let mut text = String::from("episode,return,length\n");
        for (i, (r, l)) in stats.returns.iter().zip(&stats.lengths).enumerate() {
            text.push_str(&format!("{i},{},{l}\n", fmt_f64(*r)));
        }
        write_file(&cfg.out_dir.join("evaluation.csv"), &text)?;
        for (i, ep) in eps.iter().enumerate() {
            ep.save_csv(&cfg.out_dir.join(format!("trace_{i:03}.csv")))?;
        }
        println!("wrote {}", cfg.out_dir.display());
    }
    Ok(true)
}

fn export_latents(
    common: &Common,
    checkpoint: &Path,
    episodes: usize,
    output: Option<&Path>,
) -> Result<bool> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = resolve(common, Some(run::checkpoint_config(&ckpt)?))?;
    let path = output.map_or_else(|| cfg.out_dir.join("latents.csv"), Path::to_path_buf);
    write_file(&path, "")?;
    let rows = run::export_latents_to(&ckpt, &cfg, episodes, &path)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(true)
}

fn report<T>(
    common: &Common,
    file: &str,
    header: &str,
    items: &[T],
    line: impl Fn(&T) -> (String, bool),
) -> Result<bool> {
    let mut csv = format!("{header}\n");
    let mut failed = 0;
    for item in items {
        let (row, ok) = line(item);
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, row.replace(',', " "));
        csv.push_str(&format!("{row},{}\n", u8::from(ok)));
        failed += usize::from(!ok);
    }
    println!("{} checks, {failed} failed", items.len());
    if let Some(out) = &common.out {
        write_file(&out.join(file), &csv)?;
    }
    Ok(failed == 0)
}

fn gradcheck(common: &Common) -> Result<bool> {
    let results = gradcheck::run_all()?;
    report(
        common,
        "gradcheck.csv",
        "name,scalars,max_rel_error,tolerance,passed",
        &results,
        |r| {
            let row = format!(
                "{},{},{:e},{:e}",
                r.name, r.scalars, r.max_rel_error, r.tolerance
            );
            (row, r.passed())
        },
    )
}

fn odecheck(common: &Common) -> Result<bool> {
    let results = odeint::order_suite()?;
    report(
        common,
        "odecheck.csv",
        "scheme,slope,expected,tolerance,passed",
        &results,
        |c| {
            let row = format!(
                "{},{:.4},{},{}",
                c.scheme, c.slope, c.expected, c.tolerance
            );
            (row, c.passed())
        },
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train { common } => train(common),
        Command::Evaluate {
            common,
            checkpoint,
            episodes,
        } => evaluate(common, checkpoint, *episodes),
        Command::ExportLatents {
            common,
            checkpoint,
            episodes,
            output,
        } => export_latents(common, checkpoint, *episodes, output.as_deref()),
        Command::Gradcheck { common } => gradcheck(common),
        Command::Odecheck { common } => odecheck(common),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
