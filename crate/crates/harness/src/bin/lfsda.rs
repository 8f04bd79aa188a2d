use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfsda_harness::{
    experiment::Condition, generate_pv_synthetic, run_experiment, ExperimentConfig, HarnessError, PvSource,
};

/// Prosumer market simulator: double auction, real-time pricing, no-trading
/// baseline and centralized optimum.
#[derive(Parser)]
#[command(name = "lfsda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults reproduce the reference experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for synthetic PV.
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration budget of the iterative mechanisms.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory (file path for gen-pv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run conditions and agents on a thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// All conditions.
    Run(Common),
    /// Double auction only.
    Lfsda(Common),
    /// Real-time pricing only.
    Rtp(Common),
    /// No regional market.
    Baseline(Common),
    /// Centralized optimum.
    Optimal(Common),
    /// Write the synthetic PV caps as CSV.
    GenPv(Common),
    /// Run the built-in invariant and oracle checks.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.rng_seed = seed;
    }
    if let Some(k) = common.iterations {
        cfg.iterations = k;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.parallel |= common.parallel;
    cfg.validate()?;
    Ok(cfg)
}

fn run(common: &Common, conditions: &[Condition]) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    let outcome = run_experiment(&cfg, conditions)?;
    for (condition, message) in &outcome.failures {
        eprintln!("{condition}: {message}");
    }
    if let Some(r) = outcome.lfsda.as_ref().and_then(|r| r.last()) {
        println!("lfsda            welfare {:.6}", r.social_welfare);
    }
    if let Some(r) = outcome.rtp.as_ref().and_then(|r| r.last()) {
        println!("rtp              welfare {:.6}", r.social_welfare);
        if let Some(w) = r.welfare_after_compensation {
            println!("rtp_compensated  welfare {w:.6}");
        }
    }
    if let Some(r) = outcome.without_trading.as_ref().and_then(|r| r.last()) {
        println!("without_trading  welfare {:.6}", r.social_welfare);
    }
    if let Some(o) = &outcome.optimal {
        println!(
            "optimal          welfare {:.6} (duality gap {:.3e})",
            o.welfare, o.duality_gap
        );
    }
    println!("outputs in {}", cfg.output_dir.display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Conditions {
            failed: outcome.failures.len(),
            total: conditions.len(),
        })
    }
}

fn gen_pv(common: &Common) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    let (mean, spread) = match cfg.pv {
        PvSource::Synthetic {
            peak_mean,
            peak_spread,
        } => (peak_mean, peak_spread),
        PvSource::Csv { .. } => {
            return Err(HarnessError::Config(
                "gen-pv needs a synthetic [pv] section".into(),
            ));
        }
    };
    let pv = generate_pv_synthetic(cfg.rng_seed, cfg.agents, cfg.slots, mean, spread);
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from("pv.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    pv.write_csv(Path::new(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn verify(seed: u64) -> ExitCode {
    let mut failed = 0;
    for c in lfsda_core::verify::run_checks(seed) {
        println!(
            "[{}] {}: {}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(6)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c, &Condition::ALL),
        Command::Lfsda(c) => run(c, &[Condition::Lfsda]),
        Command::Rtp(c) => run(c, &[Condition::Rtp]),
        Command::Baseline(c) => run(c, &[Condition::WithoutTrading]),
        Command::Optimal(c) => run(c, &[Condition::Optimal]),
        Command::GenPv(c) => gen_pv(c),
        Command::Verify { seed } => return verify(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
