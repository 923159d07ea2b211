//! Command-line front end. Every command reads one resolved [`RunConfig`],
//! writes a snapshot of it into the output directory, and maps library
//! errors onto exit codes (2 config, 3 numeric, 4 artifact or state).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use commands::{dir_content_hash, LearnState};
pub use config::{describe_keys, Preset, RunConfig};

use crate::error::{Error, Result};
use crate::harness::{BaselineKind, Grid};

#[derive(Debug, Parser)]
#[command(name = "cpcvar", about = "Continual concept learning and composition for a desk-scale next-scale image model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file layered onto the preset; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when the config file names none.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Root seed; every random stream is split from it by name.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "cpcvar-run")]
    pub out: PathBuf,
    /// Worker threads for `ablate`.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the tokenizer and the base model on the procedural corpus.
    Pretrain {
        /// Overrides lab.pretrain.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Learn one concept as the next task.
    Learn {
        /// Concept name, such as v1 or <v1>.
        concept: String,
        #[arg(long)]
        method: Option<BaselineKind>,
    },
    /// Sample images for one prompt with the current model.
    Generate {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Multi-branch sampling from a composition file.
    Compose {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Score every learned concept against its learn-time score.
    Eval,
    /// Run an ablation grid and write report.md.
    Ablate {
        #[arg(long)]
        grid: Option<Grid>,
    },
}

fn help_text() -> String {
    format!(
        "Config keys and defaults (desk preset):\n{}\nEnvironment:\n  CPCVAR_LOG = error | info | debug (default error)\n\nExit codes: 0 ok, 2 config, 3 numeric fault, 4 artifact or state",
        describe_keys(Preset::Desk)
    )
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(help_text())
}

/// Resolves the config: preset, then file, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let fallback = cli.common.preset.unwrap_or(Preset::Desk);
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p, fallback)?,
        None => RunConfig::preset(fallback),
    };
    if let Some(p) = cli.common.preset {
        if cli.common.config.is_some() && cfg.preset != p {
            return Err(Error::Config(format!("--preset {p:?} conflicts with the config file")));
        }
    }
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.common.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Pretrain { steps: Some(s) } => cfg.lab.pretrain.steps = *s,
        Command::Learn { method: Some(m), .. } => cfg.method = *m,
        Command::Generate { prompt, images } => {
            if let Some(p) = prompt {
                cfg.prompt = p.clone();
            }
            if let Some(n) = images {
                cfg.images = *n;
            }
        }
        _ => {}
    }
    if let Command::Ablate { grid: Some(g) } = &cli.command {
        cfg.grid = *g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_logging() -> Result<()> {
    let level = std::env::var("CPCVAR_LOG").unwrap_or_else(|_| "error".into());
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(Error::Config(format!("CPCVAR_LOG = `{level}`; expected error, info or debug")));
    }
    let _ = env_logger::Builder::new()
        .parse_filters(&format!("cpcvar={level}"))
        .format_timestamp(None)
        .try_init();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let run = || -> Result<()> {
        init_logging()?;
        let cfg = resolve(&cli)?;
        commands::dispatch(&cli, &cfg)
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
