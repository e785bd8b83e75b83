use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latent_bandit::data::SyntheticRatingsConfig;
use latent_bandit::harness::{self, ExperimentConfig, PolicyList, RatingsConfig};
use latent_bandit::offline::estimate_rank;
use latent_bandit::online::PolicyId;
use latent_bandit::{Error, Result};

#[derive(Parser)]
#[command(name = "latent-bandit", version, about = "Offline subspace estimation and low-rank online bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate offline data, run SOLD and write the subspace estimate.
    Offline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all trials of one policy against a stored estimate.
    Online {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        policy: PolicyId,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Offline phase plus every configured policy, aggregated over trials.
    Suite {
        #[arg(long)]
        config: PathBuf,
    },
    /// Filter and factorize a ratings file into a factor model.
    Ingest {
        /// `ratings.dat`; required unless `--synthetic` is given.
        #[arg(long, required_unless_present = "synthetic")]
        ratings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the built-in low-rank ratings generator instead of a file.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 200)]
        d_a: usize,
        /// Latent rank; read off the singular values when omitted.
        #[arg(long)]
        d_k: Option<usize>,
        #[arg(long)]
        min_count: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        reg: f64,
        #[arg(long, default_value_t = 15)]
        sweeps: usize,
        #[arg(long, default_value_t = 0.5)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the eigenvalue profile of a subspace estimate.
    Rank {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Offline { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if out.is_some() {
                cfg.paths.subspace_out = out;
            }
            let world = harness::build_world(&cfg)?;
            let est = harness::run_offline_phase(&cfg, &world)?;
            if cfg.paths.subspace_out.is_none() {
                println!("{}", serde_json::to_string_pretty(&est)?);
            }
            eprintln!("delta_off = {}", est.delta_off);
        }
        Command::Online {
            config,
            subspace,
            policy,
            out_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.online.policy = PolicyList::One(policy);
            cfg.online.oracle_subspace = false;
            let world = harness::build_world(&cfg)?;
            let est = harness::read_estimate(&subspace)?;
            let outcome = harness::run_suite_in(&cfg, &world, est)?;
            match out_dir.or(cfg.paths.output_dir.clone()) {
                Some(dir) => harness::write_suite_outputs(&outcome, &dir)?,
                None => print!("{}", harness::csv_string(&outcome.summary)),
            }
        }
        Command::Suite { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = harness::run_suite(&cfg)?;
            match &cfg.paths.output_dir {
                Some(dir) => harness::write_suite_outputs(&outcome, dir)?,
                None => print!("{}", harness::csv_string(&outcome.summary)),
            }
            for p in &outcome.summary.policies {
                eprintln!(
                    "{:<12} final regret {:.3} +/- {:.3}",
                    p.policy.as_str(),
                    p.final_mean(),
                    p.final_se()
                );
            }
        }
        Command::Ingest {
            ratings,
            out,
            synthetic,
            d_a,
            d_k,
            min_count,
            reg,
            sweeps,
            noise_std,
            seed,
        } => {
            let mut rc = RatingsConfig {
                reg,
                sweeps,
                synthetic: SyntheticRatingsConfig {
                    seed,
                    ..Default::default()
                },
                ..Default::default()
            };
            if synthetic {
                rc.min_per_item = 20;
                rc.min_per_user = 20;
            }
            if let Some(m) = min_count {
                rc.min_per_item = m;
                rc.min_per_user = m;
            }
            let path = if synthetic { None } else { ratings.as_deref() };
            let model = harness::ingest(path, &rc, d_a, d_k, noise_std, seed)?;
            fs::write(&out, model.to_json()? + "\n")?;
            eprintln!(
                "{} users x {} items, d_A = {}, d_K = {}, final rmse {:.4}",
                model.n_users(),
                model.n_items(),
                model.d_a,
                model.d_k,
                model.rmse_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Rank { subspace, threshold } => {
            let est = harness::read_estimate(&subspace)?;
            for (i, v) in est.eigenvalues.iter().enumerate() {
                println!("{}\t{:.6e}", i + 1, v);
            }
            println!("estimated rank: {}", estimate_rank(&est.eigenvalues, threshold));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
