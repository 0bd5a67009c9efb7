//! The `s3im` pipeline: configuration loading and one function per
//! subcommand, each a pure function of config, input files and seed.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use s3im_core::Result;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "s3im", about = "Self-styled inpainting at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Style training mode: progressive, contrastive_only or stats_only.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub paste_background: bool,
    /// Extra key=value overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    GenDataset,
    TrainPsrl,
    TrainNsd,
    Inpaint,
    Eval,
    Viz,
    /// Print the resolved configuration.
    ShowConfig,
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_text(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.mode {
            cfg.set("psrl.mode", m)?;
        }
        if self.paste_background {
            cfg.set("sample.paste_background", "true")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs `cmd` and returns the files it wrote.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::GenDataset => commands::gen_dataset(cfg),
        Command::TrainPsrl => commands::train_psrl(cfg),
        Command::TrainNsd => commands::train_nsd(cfg),
        Command::Inpaint => commands::inpaint(cfg),
        Command::Eval => commands::eval(cfg),
        Command::Viz => commands::viz(cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(Vec::new())
        }
    }
}

/// Caps rayon workers at `S3IM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("S3IM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| s3im_core::Error::Config(format!("S3IM_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(s3im_core::Error::Config("S3IM_THREADS must be at least 1".into()));
        }
        // A second initialization in one process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
