//! `dslab`: runs the depth-scene pipeline one stage at a time. Every stage
//! reads its inputs from, and writes its outputs under, one run directory.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dslab_core::align::Ablation;

use crate::commands::Ctx;
use crate::config::PipelineConfig;
use crate::layout::{Layout, MissingInput};

#[derive(Parser)]
#[command(name = "dslab", version, about = "Depth-scene benchmark, encoder and alignment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, eval and held-out scenes.
    GenScenes(Common),
    /// Build the four-task benchmark from the eval scenes.
    BuildBench(Common),
    /// Build depth-text-mask training pairs from the train scenes.
    BuildPairs {
        #[command(flatten)]
        common: Common,
        /// Mask replacement probability.
        #[arg(long)]
        ratio: Option<f64>,
        /// Choose captions with the trained encoder instead of the scene caption.
        #[arg(long)]
        rescore: bool,
    },
    /// Synthesise instruction-following samples from the train scenes.
    BuildInstructions(Common),
    /// Train the contrastive encoder.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Keep the text tower fixed.
        #[arg(long)]
        freeze_text: bool,
    },
    /// Zero-shot scene classification on the held-out scenes.
    EvalZeroshot(Common),
    /// Train one encoder per sample ratio and record zero-shot accuracy.
    RatioSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the projection with encoder and LM frozen.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune projection and LM on instructions.
    Sft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the fine-tuned model, or a responses file, on the benchmark.
    EvalBench {
        #[command(flatten)]
        common: Common,
        /// JSONL of {item_id, text} to score instead of generating.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Compare SFT variants that train the MLP, the LM, or both.
    AblateSft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// mlp_only, llm_only or both; all three when omitted.
        #[arg(long)]
        ablate: Option<Ablation>,
    },
    /// Collect every report into one summary.
    Report(Common),
}

fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("DSLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(available, |cap| cap.clamp(1, available))
}

fn context(common: &Common, tweak: impl FnOnce(&mut PipelineConfig)) -> anyhow::Result<Ctx> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    tweak(&mut cfg);
    cfg.validate()?;
    Ok(Ctx {
        cfg,
        layout: Layout::new(&common.out),
        threads: threads(),
    })
}

fn run(cmd: Command) -> anyhow::Result<()> {
    use commands::*;
    match cmd {
        Command::GenScenes(c) => gen_scenes(&context(&c, |_| {})?),
        Command::BuildBench(c) => build_bench(&context(&c, |_| {})?),
        Command::BuildPairs { common, ratio, rescore } => {
            let ctx = context(&common, |cfg| {
                if let Some(r) = ratio {
                    cfg.encoder.ratio = r;
                }
            })?;
            build_pairs_cmd(&ctx, rescore)
        }
        Command::BuildInstructions(c) => build_instructions(&context(&c, |_| {})?),
        Command::TrainEncoder {
            common,
            epochs,
            freeze_text,
        } => train_encoder_cmd(&context(&common, |cfg| {
            cfg.encoder.epochs = epochs.unwrap_or(cfg.encoder.epochs);
            cfg.encoder.freeze_text |= freeze_text;
        })?),
        Command::EvalZeroshot(c) => eval_zeroshot(&context(&c, |_| {})?),
        Command::RatioSearch { common, epochs } => ratio_search_cmd(&context(&common, |cfg| {
            cfg.encoder.epochs = epochs.unwrap_or(cfg.encoder.epochs);
        })?),
        Command::Align { common, epochs } => align(&context(&common, |cfg| {
            cfg.align.align_epochs = epochs.unwrap_or(cfg.align.align_epochs);
        })?),
        Command::Sft { common, epochs } => sft(&context(&common, |cfg| {
            cfg.align.sft_epochs = epochs.unwrap_or(cfg.align.sft_epochs);
        })?),
        Command::EvalBench { common, responses } => eval_bench(&context(&common, |_| {})?, responses.as_deref()),
        Command::AblateSft { common, epochs, ablate: which } => commands::ablate(
            &context(&common, |cfg| {
                cfg.align.sft_epochs = epochs.unwrap_or(cfg.align.sft_epochs);
            })?,
            which,
        ),
        Command::Report(c) => report(&context(&c, |_| {})?),
    }
}

/// One line: `error: <kind>: <message>`.
fn error_line(err: &anyhow::Error) -> String {
    let kind = if err.downcast_ref::<MissingInput>().is_some() {
        "missing-input"
    } else if let Some(core) = err.downcast_ref::<dslab_core::CoreError>() {
        match core {
            dslab_core::CoreError::Config(_) => "config",
            dslab_core::CoreError::Contract(_) => "contract",
            dslab_core::CoreError::Format { .. } => "format",
            dslab_core::CoreError::Resource { .. } => "resource",
            dslab_core::CoreError::Training { .. } => "training",
            _ => "io",
        }
    } else {
        "error"
    };
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error: {kind}: {msg}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::from(1)
        }
    }
}
