//! Thin command-line wrapper over the library commands.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ivg::cli::{self, TrainOverrides};

#[derive(Parser)]
#[command(
    name = "ivg",
    about = "Interventional video grounding with dual contrastive learning on synthetic biased data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// JSON config file with optional "model" and "train" sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// QV contrastive loss weight
    #[arg(long)]
    alpha: Option<f64>,
    /// VV contrastive loss weight
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Evaluate on the held-out split every N epochs (0 = final epoch only)
    #[arg(long)]
    eval_every: Option<usize>,
    /// Disable the causal intervention head
    #[arg(long)]
    no_ivg: bool,
    /// Disable the query-video contrastive loss
    #[arg(long)]
    no_qv_cl: bool,
    /// Disable the boundary-video contrastive loss
    #[arg(long)]
    no_vv_cl: bool,
}

impl TrainFlags {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            alpha: self.alpha,
            beta: self.beta,
            epochs: self.epochs,
            seed: self.seed,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            no_ivg: self.no_ivg,
            no_qv_cl: self.no_qv_cl,
            no_vv_cl: self.no_vv_cl,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate biased train/test splits (shipped spec when --spec is absent)
    GenerateData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the confounder vocabulary from a split's queries
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model
    Train {
        /// Training manifest
        #[arg(long)]
        data: PathBuf,
        /// Confounder vocabulary JSON (required unless --no-ivg)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Held-out manifest for per-epoch / final evaluation
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on a manifest
    Eval {
        /// Checkpoint stem or one of its files (.ivgp / .json)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Cross-check this vocabulary file's hash against the checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write the report JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the six-row ablation table (or the loss-weight grid) and emit
    /// one comparison table
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sweep the five (alpha, beta) settings instead of the ablations
        #[arg(long)]
        sweep_alpha_beta: bool,
        #[command(flatten)]
        flags: TrainFlags,
    },
}

fn run(cmd: Cmd) -> ivg::Result<()> {
    match cmd {
        Cmd::GenerateData { spec, out } => cli::cmd_generate_data(spec.as_deref(), &out),
        Cmd::BuildVocab { manifest, out } => cli::cmd_build_vocab(&manifest, &out),
        Cmd::Train { data, vocab, eval_data, out, flags } => {
            let (model, cfg) = cli::resolve_configs(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_train(&data, vocab.as_deref(), eval_data.as_deref(), &out, &model, &cfg)
                .map(|_| ())
        }
        Cmd::Eval { checkpoint, manifest, vocab, out } => {
            cli::cmd_eval(&checkpoint, &manifest, vocab.as_deref(), out.as_deref()).map(|_| ())
        }
        Cmd::Ablate { data, vocab, eval_data, out, sweep_alpha_beta, flags } => {
            let (model, cfg) = cli::resolve_configs(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_ablate(&data, &vocab, &eval_data, &out, &model, &cfg, sweep_alpha_beta)
                .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
