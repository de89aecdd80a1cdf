//! `tse`: training, fine-tuning, extraction, evaluation and SDE diagnostics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tse_core::config::RunConfig;

/// Exit codes.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "tse", version, about = "Score-based target speaker extraction")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-utterance work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-family corpus with manifests and toy embeddings.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a general model from scratch.
    Train(TrainArgs),
    /// Fine-tune a trained model on one target speaker.
    Finetune {
        #[command(flatten)]
        common: TrainArgs,
        /// Base checkpoint (defaults to `paths.base_checkpoint`).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Keep only manifest rows whose target is this speaker.
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Extract the target speaker from one mixture or from every row of a manifest.
    Extract(ExtractArgs),
    /// Score estimates against references.
    Evaluate {
        /// Manifest of mixtures and references.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<id>.wav` estimates.
        #[arg(long)]
        estimates: PathBuf,
        /// Embeddings used for the similarity column.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Similarity threshold for stratified aggregates.
        #[arg(long)]
        threshold: Option<f64>,
        /// Report file (line-delimited JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form SDE quantities against Monte-Carlo simulation.
    SdeDiag {
        #[arg(long, default_value_t = 11)]
        points: usize,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Write rows as line-delimited JSON instead of printing a table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toy speaker embedding from reference recordings.
    Embed {
        #[arg(long)]
        speaker: String,
        /// Embedding file to create or extend.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Continue from the training state in the output directory.
    #[arg(long)]
    resume: bool,
    /// Output directory (defaults to `paths.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single mixture WAV.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    mixture: Option<PathBuf>,
    /// Manifest whose rows are all extracted into `--out` as `<id>.wav`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Target speaker id, looked up in `--embeddings` or `embeddings.path`.
    #[arg(long, conflicts_with = "embedding")]
    speaker: Option<String>,
    /// Embedding file holding exactly one speaker.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output WAV (single mixture) or directory (manifest).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<tse_core::Error>() {
        Some(tse_core::Error::Config(_)) => EXIT_CONFIG,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ if err.downcast_ref::<commands::DataFailure>().is_some() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let jobs = cli.jobs.max(1);
    let Some(command) = cli.command else {
        anyhow::bail!(tse_core::Error::Config("no command given (try --help)".into()));
    };
    match command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Train(a) => commands::train(&cfg, a.out, a.resume, None),
        Command::Finetune { common, base, speaker } => {
            commands::train(&cfg, common.out, common.resume, Some(commands::FinetuneArgs { base, speaker }))
        }
        Command::Extract(a) => commands::extract(
            &cfg,
            commands::ExtractRequest {
                checkpoint: a.checkpoint,
                mixture: a.mixture,
                manifest: a.manifest,
                speaker: a.speaker,
                embedding: a.embedding,
                embeddings: a.embeddings,
                out: a.out,
            },
            jobs,
        ),
        Command::Evaluate {
            manifest,
            estimates,
            embeddings,
            threshold,
            out,
        } => commands::evaluate(&cfg, &manifest, &estimates, embeddings, threshold, out, jobs),
        Command::SdeDiag { points, paths, steps, out } => commands::sde_diag(&cfg, points, paths, steps, out),
        Command::Embed { speaker, out, wavs } => commands::embed(&cfg, &speaker, &out, &wavs),
    }
}
