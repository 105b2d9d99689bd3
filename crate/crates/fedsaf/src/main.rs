use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsaf::config::{load_config, ExperimentConfig, Overrides};
use fedsaf::{experiment, selftest, CliError};
use fedsaf_core::fed::Scenario;

#[derive(Parser)]
#[command(name = "fedsaf", version, about = "Structural-alignment simulator for prototype-based heterogeneous federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run(Common),
    /// Grid over λ × γ against a λ = γ = 0 baseline.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 5.0])]
        lambdas: Vec<f64>,
        /// Comma-separated γ values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 5.0])]
        gammas: Vec<f64>,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// MSE, cosine, GCSA, RCSA and contrastive alignment on one scenario.
    CompareAlignments {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also run the λ = γ = 0 baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Effective dimensionality of Homo-Shared, Homo-Local and Hetero runs.
    Dimensionality {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write the generated dataset and client shards as CSV.
    ExportData(Common),
    /// Run the seeded property suites.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// TOML config file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// mse | cosine | gcsa | rcsa | contrastive
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// homo-shared | homo-local | hetero
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: fedsaf_core::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            loss: self.loss.clone(),
            lambda: self.lambda,
            gamma: self.gamma,
            rounds: self.rounds,
            clients: self.clients,
            alpha: self.alpha,
            scenario: self.scenario,
            out: self.out.clone(),
            threads: self.threads,
        };
        load_config(self.config.as_deref(), &overrides)
    }
}

fn seed_list(cfg: &ExperimentConfig, n: u64) -> Vec<u64> {
    (cfg.seed..cfg.seed + n).collect()
}

fn execute(command: Command) -> Result<bool, CliError> {
    match command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let (summary, _) = experiment::run_to_dir(&cfg, &cfg.output.dir)?;
            println!(
                "best mean accuracy {:.4} over {} rounds -> {}",
                summary.best_mean_accuracy,
                summary.rounds,
                cfg.output.dir.display()
            );
        }
        Command::Sweep { common, lambdas, gammas, seeds } => {
            let cfg = common.load()?;
            let r = experiment::sweep(&cfg, &lambdas, &gammas, &seed_list(&cfg, seeds), &cfg.output.dir)?;
            println!("baseline {:.4}", r.baseline_mean);
            for c in &r.cells {
                println!("lambda {:<6} gamma {:<6} {:.4} ({:+.4})", c.lambda, c.gamma, c.mean_best_accuracy, c.improvement);
            }
        }
        Command::CompareAlignments { common, seeds, baseline } => {
            let cfg = common.load()?;
            for r in experiment::compare_alignments(&cfg, &seed_list(&cfg, seeds), baseline, &cfg.output.dir)? {
                println!("{:<12} {:.4}", r.label, r.mean_best_accuracy);
            }
        }
        Command::Dimensionality { common, seeds } => {
            let cfg = common.load()?;
            for c in experiment::dimensionality(&cfg, &seed_list(&cfg, seeds), &cfg.output.dir)? {
                println!(
                    "seed {}: homo-shared {} homo-local {} hetero {}{}",
                    c.data_seed,
                    c.homo_shared.threshold_dim,
                    c.homo_local.threshold_dim,
                    c.hetero_local.threshold_dim,
                    if c.ordering_holds { "" } else { "  (ordering violated)" }
                );
            }
        }
        Command::ExportData(common) => {
            let cfg = common.load()?;
            experiment::export_data(&cfg, &cfg.output.dir)?;
            println!("wrote {}", cfg.output.dir.join("dataset").display());
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {:<32} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
