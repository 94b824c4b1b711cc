//! Command-line front end for the crosstalk toolkit.
//!
//! Every subcommand reads one TOML experiment configuration and stays
//! deterministic under its seed. Artifacts land below the configured
//! `output_dir` (see `--help` for the environment override).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crosstalk_core::experiment::{
    cmd_plot, cmd_score, cmd_synth, cmd_train, cmd_transcribe, config_hash, config_to_toml,
    load_config, ExperimentConfig, PlotKind, TrainStage, OUTPUT_ROOT_ENV,
};
use crosstalk_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crosstalk",
    version,
    about = "Desk-scale two-speaker conversation transcription toolkit",
    after_help = "Environment:\n  CROSSTALK_OUT_ROOT  when set, output_dir is re-rooted under this directory\n\n\
                  Exit codes:\n  0 success, 2 configuration error, 3 data/input error, 4 numeric divergence"
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(short, long, global = true, default_value = "crosstalk.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default configuration file to the --config path.
    Init {
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Synthesize the toy conversation corpus (WAV + sidecar + RTTM).
    Synth {
        /// Overwrite a non-empty corpus directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one pipeline stage, writing a checkpoint and loss curve.
    Train {
        /// Which stage to train.
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the stage's checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Decode the evaluation conversations into transcripts and RTTM.
    Transcribe {
        /// Condition on the reference speaker activity instead of running
        /// the trained diarizer.
        #[arg(long)]
        ground_truth_activity: bool,
    },
    /// Score a hypothesis directory against the reference corpus.
    Score {
        /// Reference corpus directory (default: the run's corpus).
        #[arg(long)]
        ref_dir: Option<PathBuf>,
        /// Hypothesis directory (default: the run's hyp-diar, then hyp-gts).
        #[arg(long)]
        hyp_dir: Option<PathBuf>,
    },
    /// Render SVG diagnostics from run artifacts.
    Plot {
        /// What to plot.
        #[arg(value_enum)]
        kind: PlotKindArg,
        /// Override the input directory (loss: models dir; senones:
        /// hypothesis dir).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    /// Speaker-activity diarizer.
    Diar,
    /// Acoustic model (the configured am_kind).
    Am,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKindArg {
    /// 2-D speaker-embedding scatter from held-out segments.
    Embeddings,
    /// Arg-max senone trajectories with activity overlaid.
    Senones,
    /// Training loss curves.
    Loss,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Init { force } = cli.command {
        return init(&cli.config, force);
    }
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Init { .. } => unreachable!("handled above"),
        Command::Synth { force } => {
            let s = cmd_synth(&cfg, force)?;
            println!(
                "wrote {} conversations ({:.1} s audio, speech {:.2}%, overlap {:.2}%)",
                s.conversations, s.total_duration_secs, s.speech_pct, s.overlap_pct
            );
            println!("corpus: {}", crosstalk_core::experiment::RunPaths::new(&cfg).corpus_dir().display());
            println!("config {} seed {}", s.meta.config_hash, s.meta.seed);
        }
        Command::Train { stage, resume } => {
            let stage = match stage {
                Stage::Diar => TrainStage::Diarizer,
                Stage::Am => TrainStage::Acoustic,
            };
            let mut print_epoch = |epoch: usize, loss: f64| {
                println!("epoch {epoch}: loss {loss:.6}");
            };
            let out = cmd_train(&cfg, stage, resume, Some(&mut print_epoch))?;
            if out.epochs_run == 0 {
                println!("{}: already trained for {} epochs", out.stage, out.losses.len());
            }
            println!("checkpoint: {}", out.checkpoint.display());
            println!("loss curve: {}", out.loss_csv.display());
        }
        Command::Transcribe { ground_truth_activity } => {
            let out = cmd_transcribe(&cfg, ground_truth_activity)?;
            let source = if out.used_ground_truth { "reference activity" } else { "diarizer" };
            for (id, decoded) in out.conversations.iter().zip(&out.decoded_speakers) {
                println!("{id}: {decoded} speaker(s) decoded");
            }
            println!("transcripts ({source}): {}", out.hyp_dir.display());
        }
        Command::Score { ref_dir, hyp_dir } => {
            let out = cmd_score(&cfg, ref_dir.as_deref(), hyp_dir.as_deref())?;
            print!("{}", out.tables);
            println!("wrote {}", out.der_csv.display());
            println!("wrote {}", out.wer_csv.display());
        }
        Command::Plot { kind, input } => {
            let kind = match kind {
                PlotKindArg::Embeddings => PlotKind::Embeddings,
                PlotKindArg::Senones => PlotKind::Senones,
                PlotKindArg::Loss => PlotKind::Loss,
            };
            let out = cmd_plot(&cfg, kind, input.as_deref())?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn init(path: &std::path::Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::RejectedInput(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    let cfg = ExperimentConfig::default();
    std::fs::write(path, config_to_toml(&cfg)?)?;
    println!("wrote {} (config {})", path.display(), config_hash(&cfg));
    println!("edit it, then run: crosstalk -c {} synth", path.display());
    println!("({OUTPUT_ROOT_ENV} re-roots output_dir when set)");
    Ok(())
}
