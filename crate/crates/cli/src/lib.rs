//! `stx`: phantom generation, training, inference, evaluation and ablation.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use shape_transfer::manifest::Domain;
use shape_transfer::train::Mode;

use crate::commands::PhantomArgs;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "stx", version, about = "Shape-transfer GAN experiments on synthetic cardiac phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; `STX_SECTION__KEY` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (training seed, or dataset seed for `phantom generate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write zero wall times so logs are byte-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train one pipeline on the configured source/target datasets.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        /// Continue adversarial training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict masks for every image of a manifest.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predicted masks against reference masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Voxel size as `slice,row,col`.
        #[arg(long, value_parser = parse_spacing)]
        spacing: Option<[f64; 3]>,
        /// Average per-slice 2-D surface distances.
        #[arg(long)]
        per_slice: bool,
    },
    /// Run all three pipelines over the configured seeds and compare them.
    Ablate,
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    Generate {
        /// TOML phantom specification; defaults to the config's `[phantom]`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        #[arg(long)]
        patients: u32,
        #[arg(long)]
        slices: u32,
        /// Replace an existing dataset.
        #[arg(long)]
        overwrite: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: shape_transfer::Error| e.to_string())
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|e: shape_transfer::Error| e.to_string())
}

/// Loads the configuration and applies the global flags.
pub fn resolve_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if g.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Phantom(PhantomCommand::Generate { spec, domain, patients, slices, overwrite }) => {
            let args = PhantomArgs {
                spec,
                domain,
                patients,
                slices,
                seed: cli.global.seed.unwrap_or(0),
                out: cfg.out_dir.clone(),
                overwrite,
            };
            let m = commands::cmd_phantom(&cfg, &args)?;
            println!("wrote {} {domain} slices to {}", m.samples.len(), args.out.display());
        }
        Command::Train { mode, resume } => {
            let o = match resume {
                Some(ckpt) => commands::cmd_resume(&cfg, mode, &ckpt)?,
                None => commands::cmd_train(&cfg, mode)?,
            };
            if let Some(last) = o.pretrain_log.last() {
                println!("pretraining: final source Myo Dice {:.4}", last.train_myo_dice);
            }
            if let Some(m) = o.gan_log.as_ref().and_then(|l| l.epoch_means.last()) {
                println!("adversarial: final epoch l_gan {:.4} l_cyc {:.4} l_shape {:.4}", m.l_gan, m.l_cyc, m.l_shape);
            }
            println!("outputs in {}", o.out_dir.display());
        }
        Command::Segment { checkpoint, input } => {
            let m = commands::cmd_segment(&cfg, &checkpoint, &input, &cfg.out_dir)?;
            println!("wrote {} masks to {}", m.samples.len(), cfg.out_dir.display());
        }
        Command::Evaluate { pred, gt, spacing, per_slice } => {
            if let Some(s) = spacing {
                cfg.evaluate.spacing = s;
            }
            cfg.evaluate.per_slice |= per_slice;
            let o = commands::cmd_evaluate(&cfg, &pred, &gt, &cfg.out_dir)?;
            print!("{}", o.table);
        }
        Command::Ablate => {
            let o = commands::cmd_ablate(&cfg)?;
            print!("{}", o.csv);
        }
    }
    Ok(())
}
