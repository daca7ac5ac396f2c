mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use commands::{CliError, Context};
use config::ExperimentConfig;
use output::{sha256_hex, OutDir, Provenance};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "treelab", version, about = "Heat kernel and Green function experiments on metric trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Bottom of the spectrum by the resolvent and by Dirichlet eigenvalues.
    Spectrum,
    /// Green function, symmetry and λ-derivative routes.
    Green,
    /// Pressure of the Green potential against the critical exponent.
    Pressure,
    /// Patterson–Sullivan shadows, conformality and Gibbs cylinders.
    Measures,
    /// Local limit fit of the heat kernel.
    Llt,
    /// Monte Carlo hitting transforms and densities.
    Mc,
    /// Length spectrum, Ancona constants and annulus growth.
    Diagnostics,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Green => "green",
            Command::Pressure => "pressure",
            Command::Measures => "measures",
            Command::Llt => "llt",
            Command::Mc => "mc",
            Command::Diagnostics => "diagnostics",
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| {
        CliError::Config(config::ConfigError::Parse("--config is required".into()))
    })?;
    let (mut cfg, bytes) = ExperimentConfig::load(&path.to_string_lossy())?;
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    let graph = cfg.quotient()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Compute(e.to_string()))?;
    }
    let mut hashed = bytes;
    if let Some(s) = cli.seed {
        hashed.extend_from_slice(format!("\nseed={s}").as_bytes());
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let prov = Provenance {
        tool: "treelab",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().to_string(),
        config_hash: sha256_hex(&hashed),
        seed: cli.seed,
        threads: cli.threads,
    };
    let ctx = Context {
        cfg,
        graph,
        out: OutDir::create(&dir)?,
        prov,
    };
    match cli.command {
        Command::Spectrum => commands::spectrum(&ctx),
        Command::Green => commands::green(&ctx),
        Command::Pressure => commands::pressure(&ctx),
        Command::Measures => commands::measures(&ctx),
        Command::Llt => commands::llt(&ctx),
        Command::Mc => commands::mc(&ctx),
        Command::Diagnostics => commands::diagnostics(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: numeric check failed", cli.command.name());
            ExitCode::from(1)
        }
        Err(CliError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
