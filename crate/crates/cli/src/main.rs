//! `amde`: generate synthetic worlds, replay or run the dual-rate pipeline,
//! sweep accuracy against memory lag and benchmark the feature cache.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant violation, 3 I/O error.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use amde::runtime::{Clock, Mode};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{parse_mode, ConfigError, Settings};

#[derive(Parser, Debug)]
#[command(name = "amde", version, about = "Dual-rate depth pipeline on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Cmd {
    /// Write a synthetic sequence (depth, foundation and encoder features) to --out.
    Generate,
    /// Fixed-interval refresh every N frames; writes run_log.csv and lag_profile.csv.
    RunSync,
    /// Concurrent slow and fast paths; also writes publishes.csv.
    RunAsync,
    /// Per-seed and cross-seed lag profiles plus the encoder-only reference.
    SweepLag,
    /// Cache publish/read throughput, worst read latency and torn-read check.
    BenchCache,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with [scene], [modulator], [run], [sweep] and [bench] sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set scene.drift_x=0.5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [out]; bench-cache writes only when given.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Scene seed (first seed of a sweep).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// sync or async.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Refresh interval and lag bins.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Frames to process.
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Deterministic simulated clock for async runs.
    #[arg(long, global = true)]
    virtual_clock: bool,
}

fn settings(cmd: Cmd, c: &Common) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &c.config {
        s.apply_file(path)?;
    }
    for pair in &c.set {
        s.apply_override(pair)?;
    }
    if let Some(seed) = c.seed {
        s.scene.seed = seed;
    }
    if let Some(n) = c.n {
        s.run.n = n;
    }
    if let Some(f) = c.frames {
        s.frames = f;
    }
    if c.virtual_clock {
        s.run.clock = Clock::Virtual;
    }
    let flag_mode = c.mode.as_deref().map(parse_mode).transpose()?;
    if let Some(m) = flag_mode {
        s.run.mode = m;
    }
    let forced = match cmd {
        Cmd::RunSync => Some((Mode::SyncReplay, "run-sync")),
        Cmd::RunAsync => Some((Mode::Async, "run-async")),
        _ => None,
    };
    if let Some((m, name)) = forced {
        if flag_mode.is_some_and(|f| f != m) {
            return Err(ConfigError(format!("--mode contradicts the {name} subcommand")).into());
        }
        s.run.mode = m;
    }
    s.validate()?;
    Ok(s)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(a) = cause.downcast_ref::<amde::Error>() {
            return match a {
                amde::Error::Invariant(_) | amde::Error::State(_) | amde::Error::Degenerate(_) => 2,
                amde::Error::Io(_) | amde::Error::Format(_) | amde::Error::Truncated { .. } => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let s = settings(cli.cmd, &cli.common)?;
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let (text, ok) = match cli.cmd {
        Cmd::Generate => (commands::generate(&s, &out)?, true),
        Cmd::RunSync => (commands::run_sync_cmd(&s, &out)?, true),
        Cmd::RunAsync => (commands::run_async_cmd(&s, &out)?, true),
        Cmd::SweepLag => (commands::sweep_lag(&s, &out)?, true),
        Cmd::BenchCache => commands::bench(&s, cli.common.out.as_deref())?,
    };
    print!("{text}");
    Ok(ok)
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_help(config::key_help()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: torn reads detected");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
