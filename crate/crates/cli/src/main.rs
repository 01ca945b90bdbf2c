//! `spaco`: data generation, training, evaluation and inspection for the
//! semantic-guided scene recognition model.
//!
//! Failures print one line to stderr,
//! `error\tkind=<kind>[\tkey=<key>][\toffset=<n>]\tmessage=<text>`,
//! and exit with status 1.

use clap::{Parser, Subcommand};
use spaco_core::io::RunConfig;
use spaco_core::pipeline;
use spaco_core::synth::SceneSpec;
use spaco_core::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "spaco", version, about = "Semantic-guided indoor scene recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus: tensor files, train/test manifests and the scene spec.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Scene spec (TOML). Defaults to the built-in confounded desk corpus.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Train both stages and write checkpoints, metrics.tsv and config.resolved.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse stage1_ifem.ckpt and stage1_ssrm.ckpt from this directory.
        #[arg(long)]
        stage1_from: Option<PathBuf>,
    },
    /// Print top-1 accuracy and write per-sample predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Finite-difference gradient checks; exits 1 if any module fails.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report and config.resolved here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump node sequences, F_o and attention matrices for one sample.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation configuration and print the four-row table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> spaco_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> spaco_core::Result<bool> {
    match cli.command {
        Command::GenData { out, spec, train, test } => {
            let spec = match spec {
                Some(p) => SceneSpec::read(&p)?,
                None => SceneSpec::desk_default(),
            };
            pipeline::gen_data(&spec, train, test, &out)?;
            println!("wrote {train} train and {test} test samples to {}", out.display());
        }
        Command::Train { config, manifest, out, stage1_from } => {
            let config = load_config(config.as_deref())?;
            let r = pipeline::train(&config, &manifest, &out, stage1_from.as_deref())?;
            print!("{}", r.metrics);
        }
        Command::Eval { checkpoint, manifest, predictions } => {
            let r = pipeline::eval(&checkpoint, &manifest, &predictions)?;
            println!("{:.6}", r.accuracy);
        }
        Command::GradCheck { config, out } => {
            let config = load_config(config.as_deref())?;
            let checks = pipeline::grad_check_suite(&config)?;
            let report = pipeline::render_grad_check(&checks);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                config.write_resolved(&dir)?;
                spaco_core::io::write_atomic(&dir.join("grad_check.tsv"), report.as_bytes())?;
            }
            print!("{report}");
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Inspect { checkpoint, manifest, sample, out } => {
            for p in pipeline::inspect(&checkpoint, &manifest, sample, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { config, train, test, out } => {
            let config = load_config(config.as_deref())?;
            print!("{}", pipeline::ablate(&config, &train, &test, &out)?.render());
        }
    }
    Ok(true)
}

fn error_line(e: &Error) -> String {
    let mut fields = vec!["error".to_string(), format!("kind={}", e.kind())];
    let message = match e {
        Error::Config { key, msg } => {
            fields.push(format!("key={key}"));
            msg.clone()
        }
        Error::Parse { offset, msg } => {
            fields.push(format!("offset={offset}"));
            msg.clone()
        }
        other => other.to_string(),
    };
    let flat: String = message.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    fields.push(format!("message={flat}"));
    fields.join("\t")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
