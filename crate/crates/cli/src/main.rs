use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sqr_cli::{run, RunConfig};

#[derive(Parser)]
#[command(name = "sqr", version, about = "Stock-conditioned price/yield quantile pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    Detrend(Common),
    Fit(Common),
    Sample(Common),
    Correlate(Common),
    Premium(Common),
    RatingGame(Common),
    Simstudy(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, args) = match cli.command {
        Command::Detrend(a) => ("detrend", a),
        Command::Fit(a) => ("fit", a),
        Command::Sample(a) => ("sample", a),
        Command::Correlate(a) => ("correlate", a),
        Command::Premium(a) => ("premium", a),
        Command::RatingGame(a) => ("rating-game", a),
        Command::Simstudy(a) => ("simstudy", a),
    };
    if let Some(w) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.set_seed(s);
        }
        run(name, &cfg, &args.out, args.workers)
    });
    match result {
        Ok(m) => {
            log::info!("{name}: wrote {} files to {}", m.outputs.len() + 1, args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
