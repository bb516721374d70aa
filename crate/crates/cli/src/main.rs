use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lefl_core::experiment::{compare_runs, run_experiment, ExperimentConfig, Sampler};
use lefl_core::Algorithm;

#[derive(Parser)]
#[command(name = "lefl", version, about = "Federated learning simulator with clustered client sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run(RunArgs),
    /// Compare communication cost to a target accuracy across runs.
    Compare {
        #[arg(long)]
        target: f64,
        /// Run directories; the first is the baseline.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    sample_ratio: Option<f64>,
    #[arg(long)]
    n_clients: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    prox_mu: Option<f64>,
    #[arg(long)]
    cluster_k: Option<usize>,
    #[arg(long)]
    target_accuracy: Option<f64>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &self.run_name {
            cfg.run_name = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.algorithm {
            cfg.algorithm = v;
        }
        if let Some(v) = self.sampler {
            cfg.sampler = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.sample_ratio {
            cfg.sample_ratio = v;
        }
        if let Some(v) = self.n_clients {
            cfg.n_clients = v;
        }
        if let Some(v) = self.local_epochs {
            cfg.local_epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.prox_mu {
            cfg.prox_mu = v;
        }
        if let Some(v) = self.cluster_k {
            cfg.cluster_k = Some(v);
        }
        if let Some(v) = self.target_accuracy {
            cfg.target_accuracy = Some(v);
        }
    }
}

fn run(cli: Cli) -> lefl_core::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = ExperimentConfig::from_file(&args.config)?;
            args.apply(&mut cfg);
            cfg.validate()?;
            let out = run_experiment(&cfg, args.workers)?;
            let s = &out.summary;
            println!("{}", out.dir.display());
            log::info!(
                "final accuracy {:.4}, total bytes {}, rounds to target {:?}",
                s.final_accuracy,
                s.total_bytes,
                s.rounds_to_target
            );
        }
        Command::Compare { target, dirs } => {
            let cmp = compare_runs(&dirs, target)?;
            println!("{}", serde_json::to_string_pretty(&cmp)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
