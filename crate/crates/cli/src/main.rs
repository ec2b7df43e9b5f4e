//! `pve`: batch entry points for data generation, training, inversion,
//! editing, render-edit-reconstruct and the attention benchmark.
//!
//! Exit status: 0 on success, 2 for an unknown command or bad usage, 3 when
//! the configuration fails validation, 4 for any pipeline error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pve_core::Error;

use pve_core::alloc_meter::CountingAllocator;

// Lets `attnbench` report measured auxiliary bytes.
#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "pve", version, about = "Progressive video editing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides on dotted paths.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set edit.alpha=0.8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the toy denoiser on freshly generated data.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Extract the latent track of a video.
    Invert {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Edit a video from `data.source_prompt` to `data.target_prompt`.
    Edit {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Edit a planar scene through its rendering along a camera path.
    Rer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time naive against streaming attention with map replacement.
    Attnbench {
        /// Comma-separated square sizes `n = m`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Replay a saved latent track.
    Replay {
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn status(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        _ => 4,
    }
}

fn thread_cap() -> pve_core::Result<()> {
    let Ok(raw) = std::env::var("PVE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PVE_THREADS = {raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> pve_core::Result<()> {
    thread_cap()?;
    match cmd {
        Command::GenData { count, seed, out, cfg } => commands::gen_data(count, seed, &out, &cfg),
        Command::Train { out, cfg } => commands::train(&out, &cfg),
        Command::Invert {
            video,
            alpha,
            checkpoint,
            out,
            cfg,
        } => commands::invert(&video, alpha, &checkpoint, &out, &cfg),
        Command::Edit {
            video,
            checkpoint,
            out,
            cfg,
        } => commands::edit(&video, &checkpoint, &out, &cfg),
        Command::Rer {
            scene,
            path,
            checkpoint,
            out,
            cfg,
        } => commands::rer(&scene, &path, &checkpoint, &out, &cfg),
        Command::Attnbench { grid, out, cfg } => commands::attnbench(&grid, &out, &cfg),
        Command::Replay {
            track,
            checkpoint,
            out,
            cfg,
        } => commands::replay(&track, &checkpoint, &out, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pve: {e}");
            ExitCode::from(status(&e))
        }
    }
}
