use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use croco::cli;
use croco::config::{RunConfig, KEYS};
use croco::model::{DecoderVariant, ModelConfig};
use croco::{Error, Result};

#[derive(Parser)]
#[command(name = "croco", version, about = "Cross-view completion pre-training toolkit")]
struct Args {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Override one config key, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlopsModel {
    /// ViT-Base encoder with the default decoder sizes.
    Base,
    /// Sizes from the run configuration.
    Config,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train on a pair manifest.
    Pretrain,
    /// Reconstruct masked patches of one pair from a checkpoint.
    Reconstruct,
    /// Sample pairs from a scene directory by co-visibility.
    Covis,
    /// Print parameter and FLOP counts for both decoder variants.
    Flops {
        #[arg(long, value_enum, default_value = "base")]
        model: FlopsModel,
    },
    /// Fine-tune a flow head on image/flow triplets and report AEPE.
    FinetuneFlow,
    /// Score a prediction map against ground truth.
    Eval,
    /// Write synthetic pairs, scenes or flow triplets.
    Synth,
    /// List every configuration key.
    Keys,
}

fn resolve_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &Args) -> Result<&Path> {
    args.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out <DIR>".into()))
}

fn run(args: &Args) -> Result<()> {
    if let Cmd::Keys = args.cmd {
        for (k, doc) in KEYS {
            println!("{k:<24} {doc}");
        }
        return Ok(());
    }
    let cfg = resolve_config(args)?;
    let force = args.force;
    match &args.cmd {
        Cmd::Pretrain => {
            let out = out_dir(args)?;
            let r = cli::cmd_pretrain(&cfg, out, force)?;
            if let (Some(a), Some(b)) = (r.first_loss, r.last_loss) {
                println!("trained {} steps: loss {a:.5} -> {b:.5}", r.steps);
            }
            println!("wrote {}", out.join("checkpoint.ckpt").display());
        }
        Cmd::Reconstruct => {
            let out = out_dir(args)?;
            cli::cmd_reconstruct(&cfg, out, force)?;
            println!(
                "wrote reference, masked, composite and target images to {}",
                out.display()
            );
        }
        Cmd::Covis => {
            let out = out_dir(args)?;
            let entries = cli::cmd_covis(&cfg, out, force)?;
            println!(
                "kept {} pairs; wrote {}",
                entries.len(),
                out.join("pairs.jsonl").display()
            );
        }
        Cmd::Flops { model } => {
            let m = match model {
                FlopsModel::Base => ModelConfig::base(DecoderVariant::CrossBlock),
                FlopsModel::Config => cfg.model.clone(),
            };
            print!("{}", cli::cmd_flops(&m, args.out.as_deref(), &cfg, force)?);
        }
        Cmd::FinetuneFlow => {
            let out = out_dir(args)?;
            let r = cli::cmd_finetune_flow(&cfg, out, force)?;
            println!("loss {:.5} -> {:.5}, AEPE {:.4} px", r.first_loss, r.last_loss, r.aepe);
        }
        Cmd::Eval => {
            let m = cli::cmd_eval(&cfg, args.out.as_deref(), force)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Synth => {
            let out = out_dir(args)?;
            let n = cli::cmd_synth(&cfg, out, force)?;
            println!("wrote {n} {} items to {}", cfg.synth_kind, out.display());
        }
        Cmd::Keys => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
