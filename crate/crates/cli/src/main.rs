//! `lossatlas` command-line interface.
//!
//! Exit status: 0 on success (including partial atlases), 1 on domain
//! errors, 2 on usage errors such as bad flags or an invalid manifest.

mod commands;
mod error;
mod export;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lossatlas_core::tda::Connectivity;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lossatlas", version, about = "Multi-scale loss-landscape analysis")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model of a manifest and write its record.
    Train(ModelArgs),
    /// Top Hessian eigenvalues of one trained model.
    Hessian(ModelArgs),
    /// 2D loss slice around one trained model.
    Landscape(ModelArgs),
    /// Mode connectivity between two seeds of one config.
    Mc(PairArgs),
    /// Layerwise CKA between two models.
    Cka(PairArgs),
    /// Merge tree and persistence pairs of a scalar field file.
    Tda(TdaArgs),
    /// Run every stage of a manifest and write the bundle.
    Atlas(AtlasArgs),
    /// Check a manifest or a bundle directory.
    Validate(ValidateArgs),
    /// Serve the experiment store over HTTP.
    Serve(ServeArgs),
    /// Flat CSV tables from a stored experiment or bundle directory.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Config id within the manifest.
    #[arg(long)]
    config: String,
    /// Initialization seed of the model.
    #[arg(long)]
    seed: u64,
    /// Use this trained record instead of training.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Output JSON file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: u64,
    /// Config of the second model (default: same as --config).
    #[arg(long)]
    other_config: Option<String>,
    #[arg(long)]
    other_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        }
    }
}

#[derive(Debug, Args)]
struct TdaArgs {
    /// JSON field: a grid of numbers (null for masked cells), a landscape
    /// object with `values`, or a landscape envelope.
    #[arg(long)]
    field: PathBuf,
    #[arg(long, value_enum, default_value = "4")]
    connectivity: ConnectivityArg,
    /// Directory for mergetree.json and persistence.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AtlasArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Bundle directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also save the bundle into this experiment store.
    #[arg(long, env = lossatlas_service::STORE_ENV)]
    store: Option<PathBuf>,
    /// Per-item cache (default: `.lossatlas-cache` next to --out, or the
    /// store's cache).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Replace an existing --out directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = lossatlas_service::STORE_ENV, default_value = "lossatlas-store")]
    store: PathBuf,
    #[arg(long, env = lossatlas_service::HOST_ENV, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = lossatlas_service::PORT_ENV, default_value_t = lossatlas_service::DEFAULT_PORT)]
    port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum View {
    Global,
    Landscape,
    Persistence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Experiment id in --store.
    #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
    experiment: Option<String>,
    #[arg(long, env = lossatlas_service::STORE_ENV, default_value = "lossatlas-store")]
    store: PathBuf,
    /// Read a bundle directory instead of the store.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    view: View,
    /// Model id, for the landscape and persistence views.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => commands::train(&a),
        Command::Hessian(a) => commands::hessian(&a),
        Command::Landscape(a) => commands::landscape(&a),
        Command::Mc(a) => commands::mc(&a),
        Command::Cka(a) => commands::cka(&a),
        Command::Tda(a) => commands::tda(&a),
        Command::Atlas(a) => commands::atlas(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Serve(a) => commands::serve(a),
        Command::Export(a) => export::export(&a),
    }
}
