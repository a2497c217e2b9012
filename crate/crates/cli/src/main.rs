mod commands;
mod settings;

use asrlab::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Hybrid CTC/attention speech recognition with sememe knowledge.
#[derive(Debug, Parser)]
#[command(name = "asrlab", version)]
struct Cli {
    /// Run configuration (TOML). Flags override file values, which override defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// baseline, sp, se or sep.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// paper or desk.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with manifests, features and lexicon.
    GenData,
    /// Train a model and write the checkpoint average.
    Train,
    /// Decode a manifest into a hypothesis file.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Same as `eval --longtail`.
    LongtailReport(EvalArgs),
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// attention, ctc_greedy, ctc_prefix_beam or attention_rescoring.
    #[arg(long, default_value = "attention_rescoring")]
    method: String,
    /// Model checkpoint; defaults to the averaged model of the configured mode.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest to decode; defaults to the test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Hypothesis file to write.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference manifest.
    #[arg(long)]
    refs: PathBuf,
    /// Hypothesis file.
    #[arg(long)]
    hyps: PathBuf,
    /// Training manifest for the head/tail split.
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Add the 10-bin long-tail report.
    #[arg(long)]
    longtail: bool,
    /// Report directory; defaults to `<out>/reports/<hyps stem>`.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Load { .. } | Error::Format { .. } | Error::Parse { .. } | Error::Json(_) => 3,
            Error::TooShort { .. } => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = settings::Overrides {
        seed: cli.seed,
        out: cli.out,
        mode: cli.mode,
        profile: cli.profile,
    };
    let cfg = settings::load(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Decode(a) => commands::decode(
            &cfg,
            &commands::DecodeRequest {
                method: a.method,
                model: a.model,
                manifest: a.manifest,
                output: a.output,
            },
        ),
        Command::Eval(a) => commands::eval(&cfg, &eval_request(a, false)),
        Command::LongtailReport(a) => commands::eval(&cfg, &eval_request(a, true)),
    }
}

fn eval_request(a: EvalArgs, force_longtail: bool) -> commands::EvalRequest {
    commands::EvalRequest {
        refs: a.refs,
        hyps: a.hyps,
        train_manifest: a.train_manifest,
        longtail: a.longtail || force_longtail,
        report_dir: a.report_dir,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
