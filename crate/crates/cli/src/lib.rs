//! Command-line pipeline: synthetic data, frozen LM pretraining, encoder and
//! retriever training, indexing, entity-adapter training and evaluation.

pub mod commands;
pub mod config;
pub mod layout;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::RunConfig;
pub use layout::Layout;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<microcor_core::Error> for CliError {
    fn from(e: microcor_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "microcor", version, about = "Commented multimodal retrieval pipeline")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root (beats the config file and the environment).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NoRetrieval,
    Rag,
    Unicorn,
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::NoRetrieval, Mode::Rag, Mode::Unicorn, Mode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoRetrieval => "no-retrieval",
            Mode::Rag => "rag",
            Mode::Unicorn => "unicorn",
            Mode::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Datagen,
    /// Pretrain and freeze the toy language model.
    PretrainLm,
    /// Pretrain the dual encoder on document images and captions.
    TrainEncoders,
    /// Train the retriever (stage 1: adapter only; stage 2: everything).
    TrainRetriever {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage 2 with the fusion weight pinned to zero, from scratch.
        #[arg(long)]
        ablation: bool,
    },
    /// Embed every document with the trained retriever.
    BuildIndex,
    /// Recall@k for the zero-shot, ablation and fused retrievers.
    EvalRetrieval {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Train the entity adapter through the frozen LM.
    TrainEntityAdapter,
    /// Retrieve and comment for every query in a file.
    Generate {
        #[arg(long, value_name = "FILE")]
        query: PathBuf,
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
    },
    /// Commenting metrics for the chosen generation modes (default: all).
    EvalCommenting {
        #[arg(long, value_enum, value_delimiter = ',')]
        mode: Vec<Mode>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck,
    /// The whole pipeline end to end.
    ReproAll,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::PretrainLm => "pretrain-lm",
            Command::TrainEncoders => "train-encoders",
            Command::TrainRetriever { stage: 1, .. } => "train-retriever-stage1",
            Command::TrainRetriever { ablation: true, .. } => "train-retriever-ablation",
            Command::TrainRetriever { .. } => "train-retriever-stage2",
            Command::BuildIndex => "build-index",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::TrainEntityAdapter => "train-entity-adapter",
            Command::Generate { .. } => "generate",
            Command::EvalCommenting { .. } => "eval-commenting",
            Command::Gradcheck => "gradcheck",
            Command::ReproAll => "repro-all",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    command: &'a str,
    message: String,
}

/// Prints one JSON line to stderr and returns the exit code.
fn report_error(command: &str, e: &CliError) -> i32 {
    let line = ErrorLine {
        error: e.kind(),
        command,
        message: e.to_string().replace('\n', " "),
    };
    eprintln!("{}", serde_json::to_string(&line).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind())));
    e.exit_code()
}

/// Resolves the configuration from defaults, file, environment and flags.
pub fn resolve_config(cli: &Cli, env_out: Option<OsString>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(out) = env_out.filter(|o| !o.is_empty()) {
        cfg.out = PathBuf::from(out);
    }
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Command::EvalRetrieval { k: Some(ks) } = &cli.command {
        if ks.is_empty() || ks.contains(&0) {
            return Err(CliError::Config("--k needs positive integers".into()));
        }
        cfg.ks = ks.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            return report_error("args", &CliError::Config(first));
        }
    };
    let name = cli.command.name();
    let cfg = match resolve_config(&cli, std::env::var_os(config::OUT_ENV)) {
        Ok(c) => c,
        Err(e) => return report_error(name, &e),
    };
    match commands::execute(&cli.command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(name, &e),
    }
}
