mod artifacts;
mod config;
mod error;
mod stages;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use crate::artifacts::{ensure_layout, RunLock};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::stages::{Runner, Stage};

/// Fraud detection on text-attributed graphs: reasoning distillation into a
/// small encoder, then encoder/GNN co-training.
#[derive(Debug, Parser)]
#[command(name = "fraudcot", version)]
struct Args {
    /// Config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed, repeatable. Replaces `[run] seeds`.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "all", value_parser = parse_stage)]
    stage: Stage,
    /// Output directory. Replaces `[run] out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// asymmetric, naive or frozen.
    #[arg(long)]
    paradigm: Option<String>,
    /// Unlikelihood weight for distillation.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    distill_nodes: Option<String>,
    /// `synthetic` or `transcript:PATH`.
    #[arg(long)]
    teacher: Option<String>,
    /// Print the defaults in config-file form and exit.
    #[arg(long)]
    print_defaults: bool,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn resolve(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    let overrides = [
        ("cotrain", "paradigm", &args.paradigm),
        ("distill", "lambda", &args.lambda),
        ("distill", "nodes", &args.distill_nodes),
        ("teacher", "source", &args.teacher),
    ];
    for (sec, key, value) in overrides {
        if let Some(v) = value {
            cfg.set(sec, key, v).map_err(|m| CliError::Config(format!("--{}: {m}", key_flag(key))))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn key_flag(key: &str) -> &str {
    match key {
        "nodes" => "distill-nodes",
        "source" => "teacher",
        k => k,
    }
}

fn run(args: Args) -> Result<(), CliError> {
    if args.print_defaults {
        print!("{}", RunConfig::default().render());
        return Ok(());
    }
    let cfg = resolve(&args)?;
    let root = cfg.out.clone();
    ensure_layout(&root)?;
    let _lock = RunLock::acquire(&root)?;
    let resolved = root.join("config.resolved.ini");
    fs::write(&resolved, cfg.render()).map_err(CliError::io(format!("writing {}", resolved.display())))?;

    let runner = Runner::new(cfg)?;
    for stage in args.stage.expand() {
        let t = Instant::now();
        runner.run(stage)?;
        log::info!("stage {stage:?} finished in {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
