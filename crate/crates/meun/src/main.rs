use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use meun::cli::eval::cmd_eval;
use meun::cli::gradcheck::{cmd_gradcheck, Scope};
use meun::cli::infer::{cmd_infer, InferOptions};
use meun::cli::train::cmd_train;
use meun::cli::RunConfig;
use meun::data::synth::synth_dataset;

#[derive(Parser)]
#[command(
    name = "meun",
    about = "Multi-scale edge-based U-shape network for salient object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that build a model. Values layer as
/// defaults -> config file -> command-line flags.
#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square input resolution (multiple of 32).
    #[arg(long)]
    input_size: Option<usize>,
    /// Channel width the stages are squeezed to.
    #[arg(long)]
    base_channels: Option<usize>,
    /// Encoder: mini | resnet50-shape.
    #[arg(long)]
    encoder: Option<String>,
    /// Five comma-separated mini encoder stage widths.
    #[arg(long)]
    mini_stage_channels: Option<String>,
    /// Disable the additional down-sampling module.
    #[arg(long)]
    no_adm: bool,
    /// Replace U-shape edge blocks with plain two-conv blocks.
    #[arg(long)]
    plain_uen: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        if let Some(v) = self.input_size {
            cfg.set("input_size", &v.to_string())?;
        }
        if let Some(v) = self.base_channels {
            cfg.set("base_channels", &v.to_string())?;
        }
        if let Some(v) = &self.encoder {
            cfg.set("encoder", v)?;
        }
        if let Some(v) = &self.mini_stage_channels {
            cfg.set("mini_stage_channels", v)?;
        }
        if self.no_adm {
            cfg.set("use_adm", "false")?;
        }
        if self.plain_uen {
            cfg.set("use_uen", "false")?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root containing images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_head: Option<f64>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        /// Loss reduction: mean | sum.
        #[arg(long)]
        loss_reduction: Option<String>,
        /// Apply the 1/(h*w) factor inside the IoU loss.
        #[arg(long)]
        iou_hw_scaling: Option<bool>,
    },
    /// Run inference over a directory of images.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the five per-stage maps (_s1.._s5).
        #[arg(long)]
        emit_intermediates: bool,
        /// Also write the edge map (_edge).
        #[arg(long)]
        emit_edge: bool,
        /// Emit the top-stage prediction instead of the united map.
        #[arg(long)]
        use_last_stage: bool,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// primitives | model
        #[arg(long, default_value = "primitives")]
        scope: Scope,
        #[arg(long, default_value_t = 20260811)]
        seed: u64,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            steps,
            batch_size,
            lr_head,
            lr_backbone,
            loss_reduction,
            iou_hw_scaling,
        } => {
            let mut cfg = config.build()?;
            if let Some(v) = steps {
                cfg.set("steps", &v.to_string())?;
            }
            if let Some(v) = batch_size {
                cfg.set("batch_size", &v.to_string())?;
            }
            if let Some(v) = lr_head {
                cfg.set("lr_head", &v.to_string())?;
            }
            if let Some(v) = lr_backbone {
                cfg.set("lr_backbone", &v.to_string())?;
            }
            if let Some(v) = &loss_reduction {
                cfg.set("loss_reduction", v)?;
            }
            if let Some(v) = iou_hw_scaling {
                cfg.set("iou_hw_scaling", &v.to_string())?;
            }
            let report = cmd_train(&cfg, &data, &out, |line| println!("{line}"))?;
            println!(
                "done: {} steps, total {:.6} -> {:.6}, checkpoint {}",
                report.steps.len(),
                report.initial_total(),
                report.final_total(),
                report.checkpoint.display()
            );
        }
        Command::Infer {
            config,
            checkpoint,
            input,
            output,
            emit_intermediates,
            emit_edge,
            use_last_stage,
        } => {
            let cfg = config.build()?;
            let opts = InferOptions { emit_intermediates, emit_edge, use_last_stage };
            let written = cmd_infer(&cfg.model, &checkpoint, &input, &output, opts)?;
            println!("wrote {written} map(s) to {}", output.display());
        }
        Command::Eval { pred, gt, report } => {
            let result = cmd_eval(&pred, &gt, report.as_deref())?;
            print!("{}", result.to_table());
            if let Some(path) = report {
                println!("csv report written to {}", path.display());
            }
        }
        Command::Gradcheck { scope, seed } => {
            let report = cmd_gradcheck(scope, seed)?;
            for row in &report.rows {
                let status = if row.max_error < row.threshold { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<24} max relative error {:.3e} (threshold {:.0e})",
                    row.name, row.max_error, row.threshold
                );
            }
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Synth { out, n, size, seed } => {
            let index = synth_dataset(&out, seed, n, size)
                .with_context(|| format!("generating {n} samples under {}", out.display()))?;
            println!("generated {} sample(s) under {}", index.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
