use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlwa::corpus::dataset::{load_dataset, load_prediction_input};
use mlwa::decoders::AblationMode;
use mlwa::segmentation::{Backend, Segmenter, SegmenterConfig};
use mlwa::training::{
    gradcheck_config, gradcheck_corpus, gradient_check, train, ModelArtifact, Precision, TrainConfig,
};
use mlwa::{Error, Result};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "mlwa",
    version,
    about = "Joint intent detection and slot filling with multi-level word adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it to a directory.
    Train {
        /// TOML or JSON training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training data (block format, or JSON lines for .jsonl/.json).
        #[arg(long)]
        train: PathBuf,
        /// Development data used for model selection.
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        ablation: Option<AblationMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output model directory.
        #[arg(long, default_value = "model")]
        out: PathBuf,
        /// Also write the training report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a trained model on labeled data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Label utterances, one JSON object per line.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Plain text (one utterance per line), block format or JSON lines.
        #[arg(long)]
        input: PathBuf,
        /// Include the adapter gate values.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Segment utterances into words, one line each, words space-joined.
    Segment {
        #[arg(long, default_value = "dictionary")]
        backend: Backend,
        #[arg(long)]
        input: PathBuf,
        /// Word list, one per line (dictionary backend and remote fallback).
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        /// Fall back to the dictionary when the remote service fails.
        #[arg(long)]
        fallback: bool,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        /// Config whose dimensions and mode to check; without it, a tiny
        /// model is checked in every mode.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            train: train_path,
            dev,
            ablation,
            seed,
            out,
            report,
        } => {
            let mut config = match config {
                Some(p) => TrainConfig::from_file(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = ablation {
                config.ablation = m;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let train_data = load_dataset(&train_path)?;
            let dev_data = load_dataset(&dev)?;
            let outcome = train(&config, &train_data, &dev_data, Some(&out))?;
            let json = serde_json::to_string_pretty(&outcome.report)?;
            if let Some(p) = report {
                std::fs::write(&p, &json).map_err(|e| Error::Io { path: p, source: e })?;
            }
            let r = &outcome.report;
            eprintln!(
                "trained {} epochs ({:?}); best epoch {} with dev overall accuracy {:.4}; model in {}",
                r.epochs.len(),
                r.stop_reason,
                r.best_epoch,
                r.best_dev.overall_accuracy,
                out.display()
            );
            write_stdout(&format!("{json}\n"))?;
        }
        Command::Eval { model, data } => {
            let artifact = ModelArtifact::load(&model)?;
            let metrics = artifact.evaluate(&load_dataset(&data)?)?;
            write_stdout(&format!("{}{}\n", metrics.table(), serde_json::to_string(&metrics)?))?;
        }
        Command::Predict {
            model,
            input,
            diagnostics,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let utterances = load_prediction_input(&input)?;
            let mut text = String::new();
            for p in artifact.predict(&utterances, diagnostics)? {
                text.push_str(&serde_json::to_string(&p)?);
                text.push('\n');
            }
            write_stdout(&text)?;
        }
        Command::Segment {
            backend,
            input,
            dictionary,
            endpoint,
            timeout_ms,
            fallback,
        } => {
            let config = SegmenterConfig {
                backend,
                dictionary_path: dictionary,
                endpoint_url: endpoint,
                timeout_ms,
                fallback_to_dictionary: fallback,
            };
            let segmenter = Segmenter::from_config(&config, None)?;
            let mut text = String::new();
            for u in load_prediction_input(&input)? {
                text.push_str(&segmenter.segment(&u.chars)?.join(" "));
                text.push('\n');
            }
            write_stdout(&text)?;
        }
        Command::Gradcheck { config } => return gradcheck(config.as_deref()),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: Option<&Path>) -> Result<ExitCode> {
    let configs: Vec<TrainConfig> = match config {
        Some(p) => {
            let mut c = TrainConfig::from_file(p)?;
            c.precision = Precision::F64;
            vec![c]
        }
        None => AblationMode::ALL
            .into_iter()
            .map(|m| TrainConfig {
                ablation: m,
                ..gradcheck_config()
            })
            .collect(),
    };
    let corpus = gradcheck_corpus();
    let mut ok = true;
    let mut text = String::new();
    for c in &configs {
        let r = gradient_check(c, &corpus)?;
        let pass = r.max_relative_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        let (name, index) = r.worst.clone().unwrap_or_default();
        text.push_str(&format!(
            "{:<16} max relative error {:.3e} over {} coordinates (worst {name}[{index}]) {}\n",
            c.ablation.as_str(),
            r.max_relative_error,
            r.coordinates,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    write_stdout(&text)?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
