use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ivps_core::experiment::ExperimentConfig;
use ivps_core::{emit_plot_data, generate_cohort_with_truth, run_experiment, save_cohort, GeneratorConfig};

#[derive(Parser)]
#[command(name = "ivps", version, about = "Propensity-score model experiments on plasmode-simulated cohorts")]
struct Cli {
    /// Worker threads for the parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (subjects.csv, covariates.csv, truth.json).
    Generate {
        /// Experiment config or bare generator config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment and write its report bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive plot-ready CSVs from a report bundle.
    Plots {
        /// Report directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_generator(path: &Path) -> Result<GeneratorConfig> {
    let text = read_json(path)?;
    if let Ok(cfg) = ExperimentConfig::from_json(&text) {
        return Ok(cfg.generator);
    }
    serde_json::from_str(&text).with_context(|| format!("{} is neither an experiment nor a generator config", path.display()))
}

fn generate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut generator = load_generator(config)?;
    if let Some(seed) = seed {
        generator.seed = seed;
    }
    let (cohort, truth) = generate_cohort_with_truth(&generator)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_cohort(&cohort, &out.join("subjects.csv"), &out.join("covariates.csv"))?;
    fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    fs::write(out.join("generator.json"), serde_json::to_string_pretty(&generator)?)?;
    println!(
        "wrote {} subjects ({} treated) with {} covariates to {}",
        cohort.n_subjects(),
        cohort.n_treated(),
        cohort.n_covariates(),
        out.display()
    );
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json(&read_json(config)?).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.seeds.master = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let report = run_experiment(&cfg)?;
    println!("report written to {} (config {})", report.output_dir.display(), &report.config_hash[..12]);
    for row in &report.bias {
        println!(
            "{:<40} HR {:<4} bias {:>8.4}  sd {:.4}  coverage {:.2}  ({} converged)",
            row.label, row.true_hr, row.summary.mean_bias, row.summary.sd, row.coverage, row.summary.n_converged
        );
    }
    for row in &report.nulls {
        println!("{:<40} null mu {:>8.4}  sigma {:.4}", row.label, row.null.mu, row.null.sigma);
    }
    if !report.errors.is_empty() {
        eprintln!("{} cells reported errors; see errors.csv", report.errors.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate { config, seed, out } => generate(&config, seed, &out),
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Plots { out } => {
            for path in emit_plot_data(&out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}
