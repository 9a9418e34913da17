//! `kamtori` command line: each subcommand resolves a config, writes its
//! artifacts into a run directory named by the config hash, and reports a
//! one-line JSON status.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{Failure, Run};

#[derive(Parser, Debug)]
#[command(name = "kamtori", version, about = "KAM iteration for lower-dimensional elliptic tori of twist maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set kam.gamma=0.02` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Directory in which run directories are created.
    #[arg(long, default_value = "runs", global = true)]
    out: PathBuf,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// RNG seed; overrides the config's `seed` (which defaults to 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Iterate the twist map or the scheme and dump the orbit.
    IterateMap,
    /// Run the KAM iteration and write the manifest and step trace.
    KamRun,
    /// Excluded measure over a gamma ladder.
    MeasureSweep,
    /// Screen, converge and certify one torus.
    VerifyTorus,
    /// Scheme order and two-step frequency comparison.
    SchemeCompare,
    /// Survival fractions over an (eps, t) grid.
    SurvivalSweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::IterateMap => "iterate-map",
            Command::KamRun => "kam-run",
            Command::MeasureSweep => "measure-sweep",
            Command::VerifyTorus => "verify-torus",
            Command::SchemeCompare => "scheme-compare",
            Command::SurvivalSweep => "survival-sweep",
        }
    }
}

fn emit(diag: &serde_json::Value, dir: Option<&PathBuf>) {
    eprintln!("{diag}");
    if let Some(d) = dir {
        let _ = std::fs::write(d.join("diagnostic.json"), format!("{:#}\n", diag));
    }
}

fn usage(command: &str, key: &str, message: &str) -> ExitCode {
    emit(&json!({ "status": "error", "kind": "usage", "command": command, "key": key, "message": message }), None);
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return usage("", "arguments", first);
        }
    };
    let name = cli.command.name();
    let cfg = match config::resolve(cli.config.as_deref(), &cli.sets, cli.seed) {
        Ok(c) => c,
        Err(e) => return usage(name, &e.key, &e.message),
    };
    if cli.threads == Some(0) {
        return usage(name, "threads", "must be positive");
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => return usage(name, "threads", &e.to_string()),
    };

    let hash = config::content_hash(name, &cfg);
    let dir = commands::run_dir(&cli.out, name, &hash);
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return usage(name, "out", &format!("{}: {e}", dir.display()));
    }
    let mut resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    resolved.push('\n');
    let mut run = Run { cfg: &cfg, dir: &dir, files: vec![] };
    let _ = std::fs::remove_file(dir.join("diagnostic.json"));
    let result = std::fs::write(dir.join("config.json"), resolved).map_err(Failure::from).and_then(|_| {
        run.files.push("config.json".into());
        pool.install(|| match cli.command {
            Command::IterateMap => commands::iterate_map(&mut run),
            Command::KamRun => commands::kam_run(&mut run),
            Command::MeasureSweep => commands::measure(&mut run),
            Command::VerifyTorus => commands::verify_torus(&mut run),
            Command::SchemeCompare => commands::scheme_compare(&mut run),
            Command::SurvivalSweep => commands::survival(&mut run),
        })
    });
    let run_dir = dir.display().to_string();
    match result {
        Ok(()) => {
            println!("{}", json!({ "status": "ok", "command": name, "run_dir": run_dir, "hash": hash, "files": run.files }));
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            emit(&json!({ "status": "error", "kind": "usage", "command": name, "key": e.key, "message": e.message }), Some(&dir));
            ExitCode::from(1)
        }
        Err(Failure::Dynamical { message, details }) => {
            let diag = json!({ "status": "error", "kind": "failure", "command": name, "run_dir": run_dir, "message": message, "details": details });
            emit(&diag, Some(&dir));
            ExitCode::from(2)
        }
        Err(Failure::Internal(message)) => {
            emit(&json!({ "status": "error", "kind": "internal", "command": name, "message": message }), Some(&dir));
            ExitCode::from(1)
        }
    }
}
