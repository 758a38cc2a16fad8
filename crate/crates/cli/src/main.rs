use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qtraffic::config::ExperimentConfig;
use qtraffic::models::ModelKind;
use qtraffic::pipeline::Pipeline;

/// Desk-scale traffic-speed forecasting with crowd map-query signals.
///
/// Each subcommand is one pipeline stage. Stages read their inputs from
/// upstream stage directories under `--out` and finish by writing a `.done`
/// marker; `manifest.json` lists every artifact with its SHA-256.
#[derive(Debug, Parser)]
#[command(name = "qtraffic", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in desk profile.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the world seed and the base training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Falls back to `out_dir` in the config, then `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world: segments, raw speeds, queries, injected events.
    Generate,
    /// Filter queries, build the arrival tensor, smooth speeds and cut windows.
    Preprocess,
    /// Discover query-burst events and score them against the injected ones.
    Events,
    /// Compute per-segment query impact.
    Qi,
    /// Train every configured replicate of one variant, or of all variants.
    Train {
        /// seq2seq, seq2seq_at, seq2seq_nb, seq2seq_qi or hybrid.
        #[arg(long)]
        variant: Option<ModelKind>,
    },
    /// Score trained checkpoints and baselines on Err_T and Err_E.
    Evaluate,
    /// Compare analytic gradients with central finite differences.
    Gradcheck,
    /// Run every stage and check the acceptance thresholds.
    Repro,
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    let (cfg, out) = load(&cli)?;
    let p = Pipeline::new(cfg, &out).with_context(|| format!("preparing {}", out.display()))?;
    match cli.command {
        Command::Generate => p.generate()?,
        Command::Preprocess => {
            let s = p.preprocess()?;
            println!(
                "{} raw queries, {} after dedup, {} after proximity; {} train and {} test windows",
                s.raw_queries, s.after_dedup, s.after_proximity, s.train_windows, s.test_windows
            );
        }
        Command::Events => {
            let r = p.events()?;
            println!("{} events discovered, {}/{} injected recovered", r.discovered, r.recovered, r.injected);
        }
        Command::Qi => p.qi()?,
        Command::Train { variant } => p.train(variant)?,
        Command::Evaluate => {
            let e = p.evaluate()?;
            print!("{}", e.report.to_markdown());
        }
        Command::Gradcheck => {
            let entries = p.gradcheck()?;
            let mut ok = true;
            for g in &entries {
                println!(
                    "{:<12} tf={:<5} max_rel={:.3e} {}",
                    g.variant.as_str(),
                    g.teacher_forcing,
                    g.max_rel_error,
                    if g.passed { "PASS" } else { "FAIL" }
                );
                ok &= g.passed;
            }
            return Ok(ok);
        }
        Command::Repro => {
            let r = p.repro()?;
            for c in &r.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
