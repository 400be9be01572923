//! Command-line entry point: single runs, controlled comparison suites,
//! config validation, and heatmap re-emission from stored server state.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{mnist_profile, RunConfig};
use crate::error::{Error, Result};
use crate::orchestrator::{self, RunReport};
use crate::sparsifiers::SparsifierKind;

#[derive(Parser)]
#[command(
    name = "ragek",
    about = "Federated-learning simulator with age-based gradient sparsification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a single experiment and write its artifacts.
    Run(RunArgs),
    /// Run each sparsifier variant over each seed and summarize.
    Compare(CompareArgs),
    /// Check a configuration without touching data or model.
    Validate(ValidateArgs),
    /// Re-emit similarity/distance CSVs from a finished run's state file.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Base configuration; variants replace only the sparsifier.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; one subdirectory per variant x seed.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants out of: r_age_k, r_top_k, top_k.
    #[arg(long, value_delimiter = ',', default_value = "r_age_k,r_top_k,top_k")]
    variants: Vec<String>,
    /// Comma-separated master seeds, one run per variant per seed.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Mean train accuracy defining "rounds to target".
    #[arg(long, default_value_t = 0.9)]
    target_accuracy: f64,
}

#[derive(Args)]
struct ValidateArgs {
    /// Configuration to check; the built-in MNIST profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// state.bin written by a previous `run`.
    #[arg(long)]
    state: PathBuf,
    /// Output directory for similarity.csv and distance.csv.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` and executes; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap distinguishes help/version (exit 0) from usage errors.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parameter(_) | Error::Validation(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Heatmap(args) => {
            orchestrator::emit_heatmaps(&args.state, &args.out)?;
            println!("wrote heatmaps to {}", args.out.display());
            Ok(())
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.resolve()?;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    let report = orchestrator::run(&config)?;
    orchestrator::write_run_artifacts(&report, &args.out)?;
    println!(
        "run complete: {} rounds, mean accuracy {:.4}, artifacts in {}",
        report.rounds.len(),
        report.final_mean_accuracy,
        args.out.display()
    );
    Ok(())
}

fn variant_of(name: &str, base: SparsifierKind) -> Result<SparsifierKind> {
    let (r, k) = (base.r(), base.k());
    match name {
        "r_age_k" => Ok(SparsifierKind::RAgeK { r, k }),
        "r_top_k" => Ok(SparsifierKind::RTopK { r, k }),
        "top_k" => Ok(SparsifierKind::TopK { k }),
        other => Err(Error::parameter(format!(
            "unknown variant '{other}' (expected r_age_k, r_top_k, or top_k)"
        ))),
    }
}

/// First global round index (1-based position) whose mean accuracy reaches
/// `target`, or `None` if the run never does.
fn rounds_to_target(report: &RunReport, target: f64) -> Option<usize> {
    report
        .rounds
        .iter()
        .position(|r| r.mean_accuracy >= target)
        .map(|p| p + 1)
}

fn median(values: &mut [u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let base = load_config(&args.config)?;
    if args.variants.is_empty() || args.seeds.is_empty() {
        return Err(Error::parameter("compare needs at least one variant and one seed"));
    }
    std::fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    for variant in &args.variants {
        let sparsifier = variant_of(variant, base.sparsifier)?;
        for &seed in &args.seeds {
            let mut config = base.clone();
            config.sparsifier = sparsifier;
            config.master_seed = seed;
            let report = orchestrator::run(&config)?;
            let dir = args.out.join(format!("{variant}_seed{seed}"));
            orchestrator::write_run_artifacts(&report, &dir)?;
            rows.push((
                variant.clone(),
                seed,
                rounds_to_target(&report, args.target_accuracy),
                report.final_mean_accuracy,
            ));
        }
    }

    let mut summary = String::from("variant,seed,rounds_to_target,final_mean_acc\n");
    for (variant, seed, rounds, acc) in &rows {
        let rounds = rounds.map_or("-".to_string(), |r| r.to_string());
        summary.push_str(&format!("{variant},{seed},{rounds},{acc}\n"));
    }
    summary.push_str("variant,median_rounds_to_target\n");
    for variant in &args.variants {
        let mut reached: Vec<u64> = rows
            .iter()
            .filter(|(v, _, r, _)| v == variant && r.is_some())
            .map(|(_, _, r, _)| r.unwrap() as u64)
            .collect();
        let med = median(&mut reached).map_or("-".to_string(), |m| format!("{m}"));
        summary.push_str(&format!("{variant},{med}\n"));
    }
    std::fs::write(args.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => mnist_profile(),
    };
    config.resolve()?;
    let spec = config.model_spec()?;
    println!(
        "config ok: d={} parameters, {} clients, {} rounds, sparsifier {} (r={}, k={})",
        spec.param_count(),
        config.num_clients,
        config.num_rounds(),
        config.sparsifier.name(),
        config.sparsifier.r(),
        config.sparsifier.k()
    );
    Ok(())
}
