//! `gspc`: train, verify, and run the desk-scale speech-aware LLM stack.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error,
//! 3 mode/prompt error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use gspc_core::data::Task;
use gspc_core::filter::Metric;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gspc", version, about = "Speech-to-LLM modality alignment stack")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Check a single block (elementary, ctc, lora, conformer, qformer, llm).
        #[arg(long)]
        only: Option<String>,
        /// Negative control: verify that a corrupted gradient fails.
        #[arg(long)]
        corrupt: bool,
    },
    /// Generate a synthetic tone-sequence dataset manifest.
    SynthData {
        #[arg(long, default_value_t = 32)]
        n: usize,
        /// Output manifest path (.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Also write WAV files here and reference them from the manifest.
        #[arg(long)]
        wav_dir: Option<PathBuf>,
    },
    /// CTC-pretrain the conformer encoder.
    TrainEncoder {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the Q-former adapter and LoRA against the frozen stack.
    TrainAdapter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Decode speech (manifest or single file) or run text-mode generation.
    Decode {
        /// Manifest of utterances to decode and score.
        #[arg(long, conflicts_with_all = ["audio", "text"])]
        manifest: Option<PathBuf>,
        /// Single WAV file (or synth:<text> spec) to transcribe.
        #[arg(long, conflicts_with = "text")]
        audio: Option<PathBuf>,
        /// Task for --audio decoding.
        #[arg(long, value_enum, default_value = "asr")]
        task: CliTask,
        /// Target language for --audio with --task ast.
        #[arg(long)]
        tgt_lang: Option<String>,
        /// Text-mode prompt (no audio, base LLM only).
        #[arg(long)]
        text: Option<String>,
        /// Beam size override.
        #[arg(long)]
        beam: Option<usize>,
        /// Inference chunk size.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Ensemble-agreement filtering of translation pairs.
    FilterAst {
        /// Input .jsonl of translation pairs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also emit the threshold-sweep selection curve CSV.
        #[arg(long)]
        curve: bool,
        /// Base manifest to join kept pairs onto (emits ast records).
        #[arg(long)]
        base_manifest: Option<PathBuf>,
        /// Target language tag for emitted ast records.
        #[arg(long)]
        tgt_lang: Option<String>,
    },
    /// Sampling/batching plans as CSV.
    Plan {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated corpus sizes (alternative to --manifest).
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<u64>>,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,1")]
        alpha: Vec<f64>,
        /// Also emit the length-sorted epoch batch plan.
        #[arg(long)]
        batch_plan: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliTask {
    Asr,
    Ast,
}

impl From<CliTask> for Task {
    fn from(t: CliTask) -> Task {
        match t {
            CliTask::Asr => Task::Asr,
            CliTask::Ast => Task::Ast,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(run_dir) = cli.run_dir {
        cfg.run_dir = run_dir;
    }

    match cli.command {
        Command::Gradcheck { only, corrupt } => commands::cmd_gradcheck(&cfg, only.as_deref(), corrupt),
        Command::SynthData { n, out, wav_dir } => {
            commands::cmd_synth_data(&cfg, n, &out, wav_dir.as_deref())
        }
        Command::TrainEncoder { manifest, resume } => {
            commands::cmd_train_encoder(&cfg, &manifest, resume)
        }
        Command::TrainAdapter { manifest, resume } => {
            commands::cmd_train_adapter(&cfg, &manifest, resume)
        }
        Command::Decode { manifest, audio, task, tgt_lang, text, beam, batch } => {
            if let Some(beam) = beam {
                cfg.generation.beam_size = beam;
            }
            if let Some(batch) = batch {
                cfg.decode_batch = batch;
            }
            match (manifest, audio, text) {
                (Some(m), None, None) => commands::cmd_decode_manifest(&cfg, &m),
                (None, Some(a), None) => {
                    commands::cmd_decode_audio(&cfg, &a, task.into(), tgt_lang)
                }
                (None, None, Some(t)) => commands::cmd_decode_text(&cfg, &t),
                _ => anyhow::bail!(gspc_core::Error::Input(
                    "decode needs exactly one of --manifest, --audio, --text".into()
                )),
            }
        }
        Command::FilterAst { pairs, metric, threshold, curve, base_manifest, tgt_lang } => {
            let metric = metric.map(|m| m.parse::<Metric>()).transpose()?;
            commands::cmd_filter_ast(
                &cfg,
                &pairs,
                metric,
                threshold,
                curve,
                base_manifest.as_deref(),
                tgt_lang.as_deref(),
            )
        }
        Command::Plan { manifest, sizes, alpha, batch_plan } => {
            commands::cmd_plan(&cfg, manifest.as_deref(), sizes, &alpha, batch_plan)
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            std::process::exit(commands::exit_code_for(&err));
        }
    }
}
