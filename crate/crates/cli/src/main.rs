mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slhoi_core::interaction::Variant;
use slhoi_core::probe::ProbeStage;
use slhoi_core::protocol::ProtocolName;
use slhoi_core::Error;

#[derive(Parser)]
#[command(name = "slhoi", version, about = "Open-vocabulary HOI detection on a frozen ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that build a model from a run config.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Run config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub protocol: Option<ProtocolName>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learnable modules; writes per-epoch checkpoints and a loss log.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Resume from a checkpoint directory (or a run directory with a `latest` marker).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report per-split mAP on an annotation file.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Annotation file; defaults to the config's eval (then train) annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Score these predictions (JSON, one triplet list per image) instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Render attention heatmaps for one patch (or every interaction query).
    ProbeAttention {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        col: usize,
        /// backbone_last, head_block_1, head_block_2 or refine_cross; repeatable.
        #[arg(long = "stage", required = true)]
        stages: Vec<ProbeStage>,
        /// Also write one map per attention head.
        #[arg(long)]
        per_head: bool,
    },
    /// Encode category prompts into a text-embedding bank.
    BuildTextBank {
        /// CSV with `id,action,object,seen,rarity` columns.
        #[arg(long)]
        categories: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::Encoder::Stub)]
        encoder: commands::Encoder,
        /// JSON array of vectors, one per CSV row (`--encoder file`).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Embedding width for the stub encoder.
        #[arg(long, default_value_t = 2048)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render seeded synthetic scenes with exact annotations.
    GenSynthetic {
        /// Scene spec (TOML); defaults to 8 images of 2 objects x 2 relations.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. })
        | Some(Error::InvalidInput(_))
        | Some(Error::ProtocolMismatch { .. })
        | Some(Error::VariantMismatch(_)) => 2,
        Some(Error::Numerical(_)) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { overrides, checkpoint } => commands::train(&overrides, checkpoint.as_deref()),
        Command::Eval {
            overrides,
            checkpoint,
            annotations,
            predictions,
        } => commands::eval(
            &overrides,
            checkpoint.as_deref(),
            annotations.as_deref(),
            predictions.as_deref(),
        ),
        Command::ProbeAttention {
            overrides,
            checkpoint,
            image,
            row,
            col,
            stages,
            per_head,
        } => commands::probe(
            &overrides,
            checkpoint.as_deref(),
            &image,
            (row, col),
            &stages,
            per_head,
        ),
        Command::BuildTextBank {
            categories,
            encoder,
            embeddings,
            dim,
            seed,
            out,
        } => commands::build_text_bank(&categories, encoder, embeddings.as_deref(), dim, seed, &out),
        Command::GenSynthetic { spec, seed, out } => commands::gen_synthetic(spec.as_deref(), seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
