use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;

use inc_fedbandit::experiment::{execute, value_label, RawSpec};

/// Simulate incentivized federated linear bandits.
///
/// Values omitted on the command line come from `--config` (TOML, same key
/// names) and then from built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "inc-fedbandit", version)]
struct Cli {
    /// TOML file with any of the settings below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// run | ablate
    #[arg(long)]
    mode: Option<String>,
    /// synthetic | dataset:<path>
    #[arg(long)]
    env: Option<String>,
    #[arg(long = "N")]
    n_clients: Option<i64>,
    #[arg(long = "T")]
    horizon: Option<i64>,
    #[arg(long = "d")]
    dim: Option<i64>,
    #[arg(long = "K")]
    pool_size: Option<i64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// pf | pe | dislinucb | none
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// auto | <non-negative real>
    #[arg(long)]
    dc: Option<String>,
    /// One value for every client, or a comma list with one value per client.
    #[arg(long, allow_hyphen_values = true)]
    costs: Option<String>,
    /// First seed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long = "n-seeds")]
    n_seeds: Option<i64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "skip-zero-uploads")]
    skip_zero_uploads: bool,
}

impl Cli {
    fn raw(&self) -> RawSpec {
        RawSpec {
            mode: self.mode.clone(),
            env: self.env.clone(),
            n_clients: self.n_clients,
            horizon: self.horizon,
            d: self.dim,
            pool_size: self.pool_size,
            sigma: self.sigma,
            lambda: self.lambda,
            delta: self.delta,
            mechanism: self.mechanism.clone(),
            beta: self.beta,
            dc: self.dc.clone(),
            costs: self.costs.clone(),
            seeds: self.seeds,
            n_seeds: self.n_seeds,
            out: self.out.clone(),
            skip_zero_uploads: self.skip_zero_uploads.then_some(true),
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let base = match &cli.config {
        Some(path) => RawSpec::from_file(path)?,
        None => RawSpec::default(),
    };
    let spec = base.overlay(cli.raw()).resolve()?;
    let runs = execute(&spec).context("experiment failed")?;

    for v in &runs {
        let label = v
            .runs
            .first()
            .map_or("regret", |(_, m)| value_label(m.kind));
        let row = v.summary();
        println!(
            "{:<10} final {label} {:.4} (sd {:.4})  comm {:.0}  payment {:.4}  seeds {}",
            row.variant,
            row.mean_final,
            row.std_final,
            row.mean_comm,
            row.mean_payment,
            row.n_seeds
        );
    }
    println!("wrote {}", spec.output_dir.display());
    Ok(())
}
