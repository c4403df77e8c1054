//! `meshflow` command-line pipeline: preprocessing, training, sampling, completion and evaluation.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use meshflow_core::geometry::ShapeKind;
use meshflow_core::Error;

use crate::commands::{CompleteArgs, SampleArgs};
use crate::config::{default_config_text, RunConfig};
use crate::gradcheck::Profile;

#[derive(Debug, Parser)]
#[command(name = "meshflow", version, about = "Triangle-mesh generation with a face-token autoencoder and a rectified-flow transformer")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workspace directory holding the manifest, checkpoints and outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Configuration override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default configuration.
    Config,
    /// Write synthetic primitive meshes as OBJ files.
    Synth {
        /// Comma-separated kinds: box, pyramid, prism, grid.
        #[arg(long, value_delimiter = ',', default_value = "box,pyramid,prism,grid")]
        kinds: Vec<ShapeKind>,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Cells per side for grid sheets, cycled; random when omitted.
        #[arg(long, value_delimiter = ',')]
        grid_cells: Vec<usize>,
        /// Destination directory; defaults to `<out>/synth`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Normalize, quantize and filter a directory of OBJ files into the workspace.
    Preprocess {
        input: PathBuf,
        /// Directory of same-named originals for the Hausdorff filter.
        #[arg(long)]
        originals: Option<PathBuf>,
        /// Keep meshes above the face budget.
        #[arg(long)]
        allow_oversize: bool,
    },
    /// Train the face autoencoder on the train split.
    TrainVae {
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) once this many steps are done.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Encode the train split into latent sequences.
    Encode,
    /// Train the velocity transformer on the encoded latents.
    TrainDit {
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) once this many steps are done.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Generate meshes with prescribed face counts.
    Sample {
        #[arg(long, value_delimiter = ',', required = true)]
        faces: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Euler steps; overrides `sample.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Reference mesh for cross-attention conditioning.
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Integrate all samples in one padded batch.
        #[arg(long)]
        batch: bool,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Complete a partial mesh to a total face count.
    Complete {
        #[arg(long)]
        partial: PathBuf,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        condition: Option<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Point-cloud metrics of generated meshes against references.
    Eval { generated: PathBuf, reference: PathBuf },
    /// Finite-difference gradient checks of every differentiable block.
    Gradcheck {
        #[arg(long, default_value = "small")]
        profile: Profile,
    },
}

/// Effective configuration: file, then `--set` overrides, then `--seed`.
pub fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `MESHFLOW_THREADS`. Only 1 is meaningful: every kernel runs on the calling thread.
pub fn thread_setting() -> anyhow::Result<usize> {
    match std::env::var("MESHFLOW_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                Error::validation(format!("MESHFLOW_THREADS must be a positive integer, got {v:?}"))
            })?;
            if n > 1 {
                log::warn!("MESHFLOW_THREADS={n} requested; kernels are single-threaded, running on one thread");
            }
            Ok(n)
        }
    }
}

fn with_steps(mut cfg: RunConfig, steps: Option<usize>) -> anyhow::Result<RunConfig> {
    if let Some(s) = steps {
        cfg.set("sample.steps", s)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    thread_setting()?;
    let out: &Path = &cli.out;
    if let Command::Config = cli.command {
        print!("{}", default_config_text());
        return Ok(());
    }
    if let Command::Gradcheck { profile } = cli.command {
        print!("{}", commands::cmd_gradcheck(profile)?);
        return Ok(());
    }
    let mut cfg = load_config(cli)?;
    info!("seed {}", cfg.seed());
    match &cli.command {
        Command::Config | Command::Gradcheck { .. } => unreachable!(),
        Command::Synth { kinds, count, grid_cells, dest } => {
            let dest = dest.clone().unwrap_or_else(|| out.join("synth"));
            commands::cmd_synth(&dest, kinds, *count, grid_cells, cfg.seed())?;
        }
        Command::Preprocess { input, originals, allow_oversize } => {
            if *allow_oversize {
                cfg.set("allow_oversize", true)?;
            }
            std::fs::create_dir_all(out)?;
            commands::cmd_preprocess(&cfg, out, input, originals.as_deref())?;
        }
        Command::TrainVae { resume, until } => commands::cmd_train_vae(&cfg, out, *resume, *until)?,
        Command::Encode => {
            commands::cmd_encode(&cfg, out)?;
        }
        Command::TrainDit { resume, until } => commands::cmd_train_dit(&cfg, out, *resume, *until)?,
        Command::Sample { faces, count, steps, condition, batch, dest } => {
            let cfg = with_steps(cfg, *steps)?;
            let args = SampleArgs {
                faces: faces.clone(),
                count: *count,
                condition: condition.clone(),
                batched: *batch,
                dest: dest.clone(),
            };
            commands::cmd_sample(&cfg, out, &args)?;
        }
        Command::Complete { partial, total, count, steps, condition, dest } => {
            let cfg = with_steps(cfg, *steps)?;
            let args = CompleteArgs {
                partial: partial.clone(),
                total: *total,
                count: *count,
                condition: condition.clone(),
                dest: dest.clone(),
            };
            commands::cmd_complete(&cfg, out, &args)?;
        }
        Command::Eval { generated, reference } => {
            let report = commands::cmd_eval(&cfg, out, generated, reference)?;
            println!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Process exit status: 2 for invalid input, 3 for numerical or generation failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}
