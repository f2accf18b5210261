mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use eguide::exec::Workers;
use serde_json::json;

use commands::{Context, Failure};
use config::{RunConfig, SUBCOMMANDS};

#[derive(Debug, Parser)]
#[command(name = "eguide", version, about = "Microwave electron guide and beam splitter simulations", after_help = subcommand_help())]
struct Cli {
    /// Subcommand to run; may instead be given as `subcommand` in the config.
    subcommand: Option<String>,
    /// JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker count (overrides `workers` and EGUIDE_WORKERS).
    #[arg(short, long)]
    workers: Option<usize>,
    /// Validate the configuration, print it with defaults filled in, and exit.
    #[arg(long)]
    check: bool,
}

fn subcommand_help() -> String {
    format!("Subcommands:\n  {}\n\nExit status: 0 success, 1 runtime error, 2 usage or configuration error.", SUBCOMMANDS.join("\n  "))
}

fn usage() -> ExitCode {
    eprintln!("usage: eguide <SUBCOMMAND> [--config FILE] [--output DIR] [--workers N]\n\n{}", subcommand_help());
    ExitCode::from(2)
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("eguide: configuration error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (text, base_dir) = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => (t, p.parent().map(|d| d.to_path_buf()).unwrap_or_default()),
            Err(e) => return config_error(format!("{}: {e}", p.display())),
        },
        None if cli.subcommand.is_none() => return usage(),
        None => ("{}".to_string(), PathBuf::from(".")),
    };
    if text.trim().is_empty() {
        return usage();
    }
    let cfg = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    let sub = match (&cli.subcommand, &cfg.subcommand) {
        (Some(a), Some(b)) if a != b => {
            return config_error(format!("subcommand `{a}` on the command line but `{b}` in the config"))
        }
        (Some(a), _) => a.clone(),
        (None, Some(b)) => b.clone(),
        (None, None) => return usage(),
    };
    if !SUBCOMMANDS.contains(&sub.as_str()) {
        eprintln!("eguide: unknown subcommand `{sub}`");
        return usage();
    }
    let resolved = cfg.resolved(&sub);
    if let Err(e) = resolved.validate() {
        return config_error(e);
    }
    if cli.check {
        println!("{}", serde_json::to_string_pretty(&resolved).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    let workers = cli.workers.or(resolved.workers).map(Workers).unwrap_or_else(Workers::from_env);
    let out = cli.output.clone().or_else(|| resolved.output_dir.clone()).unwrap_or_else(|| PathBuf::from("eguide-out").join(&sub));
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("eguide: cannot create {}: {e}", out.display());
        return ExitCode::from(1);
    }
    let start = Instant::now();
    let mut ctx = match Context::new(resolved.clone(), base_dir, out.clone(), workers) {
        Ok(c) => c,
        Err(Failure::Config(m)) => return config_error(m),
        Err(Failure::Runtime { module, message }) => {
            eprintln!("eguide: {module}: {message}");
            return ExitCode::from(1);
        }
    };
    let result = commands::run(&mut ctx, &sub);
    let (summary, status) = match result {
        Ok(s) => (s, ExitCode::SUCCESS),
        Err(Failure::Config(m)) => return config_error(m),
        Err(Failure::Runtime { module, message }) => {
            eprintln!("eguide: {module}: {message}");
            (json!({ "error": { "module": module, "message": message } }), ExitCode::from(1))
        }
    };
    let meta = json!({
        "tool": "eguide",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": sub,
        "seed": resolved.seed,
        "workers": workers.0,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "config": resolved,
        "si": {
            "drive_omega_rad_s": ctx.drive.omega,
            "drive_v0": ctx.drive.v0,
            "drive_phase": ctx.drive.phase,
            "charge_c": ctx.species.charge,
            "mass_kg": ctx.species.mass,
        },
        "outputs": ctx.written,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    if let Err(e) = std::fs::write(out.join("metadata.json"), text) {
        eprintln!("eguide: cannot write metadata: {e}");
        return ExitCode::from(1);
    }
    status
}
