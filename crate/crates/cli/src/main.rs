//! `sinkgp`: embed point clouds, fit and apply GP models, export Gram
//! matrices and time the MMD baseline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sinkgp::sinkhorn::SinkhornConfig;

#[derive(Parser, Debug)]
#[command(name = "sinkgp", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Entropic regularization.
    #[arg(long, global = true, default_value_t = 1e-2)]
    pub eps: f64,
    /// Sinkhorn marginal tolerance.
    #[arg(long, global = true, default_value_t = 1e-6)]
    pub tol: f64,
    /// Sinkhorn iteration limit.
    #[arg(long, global = true, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// sqexp, exp_norm, matern32 or matern52; `gram` also takes sinkhorn or mmd.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    /// Regression observation noise (default 1e-6 times the kernel variance).
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// Fail with exit code 4 if any Sinkhorn solve did not converge.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl GlobalOpts {
    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.eps,
            max_iter: self.max_iter,
            tol: self.tol,
            ..SinkhornConfig::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the synthetic toy dataset as CSV clouds plus a manifest.
    Toygen(commands::ToygenArgs),
    /// Embed every measure of a manifest against a reference.
    Embed(commands::EmbedArgs),
    /// Train a GP model on a manifest.
    Fit(commands::FitArgs),
    /// Predict with a saved model.
    Predict(commands::PredictArgs),
    /// Export a Gram matrix with a JSON sidecar.
    Gram(commands::GramArgs),
    /// Time Gram construction for the Sinkhorn and MMD kernels.
    Benchmark(commands::BenchmarkArgs),
}

#[derive(Debug)]
pub enum CliError {
    Lib(sinkgp::Error),
    NotConverged(String),
}

impl From<sinkgp::Error> for CliError {
    fn from(e: sinkgp::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numeric() => 3,
            CliError::Lib(_) => 2,
            CliError::NotConverged(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Lib(e) if e.is_numeric() => "numeric",
            CliError::Lib(_) => "validation",
            CliError::NotConverged(_) => "not_converged",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Lib(e) => e.to_string(),
            CliError::NotConverged(m) => m.clone(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| sinkgp::Error::Validation(format!("thread pool: {e}")))?;
    }
    cli.global.sinkhorn().validate()?;
    let g = &cli.global;
    match cli.command {
        Command::Toygen(a) => commands::toygen(g, &a),
        Command::Embed(a) => commands::embed(g, &a),
        Command::Fit(a) => commands::fit(g, &a),
        Command::Predict(a) => commands::predict(g, &a),
        Command::Gram(a) => commands::gram(g, &a),
        Command::Benchmark(a) => commands::benchmark(g, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({
                "error": e.kind(),
                "message": e.message(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}
