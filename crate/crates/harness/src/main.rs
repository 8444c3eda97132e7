//! `clv` — backward and covariant Lyapunov vectors from exact, perturbed,
//! and filter-estimated trajectories.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clv_harness::config::ExperimentConfig;
use clv_harness::experiment::{
    angle_summaries, pa_summaries, push_angle_rows, push_pa_rows, Pipeline, ANGLE_COLUMNS,
    PA_COLUMNS,
};
use clv_harness::io::{self, Table, TableMeta};
use clv_harness::seeds::float_label;
use clv_harness::validate::run_invariant_suite;

#[derive(Parser)]
#[command(
    name = "clv",
    about = "Lyapunov exponents, backward and covariant Lyapunov vectors, and their sensitivity to trajectory noise",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid parallelism (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the reference trajectory (spin-up discarded) and store it.
    Trajectory {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the forward/backward sweeps on a stored trajectory.
    Lyapunov {
        #[command(flatten)]
        common: CommonArgs,
        /// Input trajectory container.
        #[arg(long)]
        traj: PathBuf,
        /// Output stem (defaults to the input file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate synthetic observations of a stored trajectory.
    Observe {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        traj: PathBuf,
        /// Observation noise standard deviation.
        #[arg(long)]
        mu: f64,
    },
    /// Assimilate stored observations and store the analysis-mean
    /// pseudo-trajectory.
    Assimilate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Observation noise level the observations were generated with
        /// (selects the filter seed stream).
        #[arg(long)]
        mu: f64,
    },
    /// Add Gaussian noise to every sample of a stored trajectory.
    Perturb {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        traj: PathBuf,
        /// Perturbation standard deviation.
        #[arg(long)]
        sigma: f64,
    },
    /// Angle and principal-angle tables between two stored Lyapunov sets.
    Angles {
        #[command(flatten)]
        common: CommonArgs,
        /// Reference Lyapunov set (the truth).
        #[arg(long)]
        truth: PathBuf,
        /// Lyapunov set to compare against the reference.
        #[arg(long)]
        other: PathBuf,
        /// Source label written into the tables (e.g. perturbed).
        #[arg(long)]
        source: String,
        /// Parameter value written into the tables (e.g. the noise level).
        #[arg(long)]
        param: f64,
    },
    /// Run the full config-driven pipeline and emit every result table.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the numerical invariant suite; exits nonzero on any failure.
    Validate,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config =
        ExperimentConfig::load(&common.config).map_err(|e| anyhow::anyhow!(e))?;
    if let Some(seed) = common.seed {
        config.experiment.master_seed = seed;
    }
    if let Some(threads) = common.threads {
        config.experiment.threads = threads;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs, config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn init_thread_pool(config: &ExperimentConfig) {
    let threads = config.experiment.threads;
    if threads > 0 {
        // Ignore the error if a pool already exists (e.g. repeated calls in
        // one process); rayon keeps the first configuration.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn pipeline(config: &ExperimentConfig) -> Result<Pipeline> {
    Pipeline::new(config.clone()).map_err(|e| anyhow::anyhow!(e.to_string()))
}

fn table_meta(config: &ExperimentConfig) -> TableMeta {
    TableMeta::new(
        &config.experiment.id,
        &config.canonical_hash(),
        config.experiment.master_seed,
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Trajectory { common } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let pipe = pipeline(&config)?;
            let truth_full = pipe.truth_full()?;
            let truth_window = pipe.truth_window(&truth_full)?;
            io::write_trajectory(&dir.join("truth_full.bin"), &truth_full)?;
            io::write_trajectory(&dir.join("truth_window.bin"), &truth_window)?;
            println!(
                "wrote truth_full.bin ({} samples) and truth_window.bin ({} samples) to {}",
                truth_full.len(),
                truth_window.len(),
                dir.display()
            );
        }
        Command::Lyapunov { common, traj, name } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let pipe = pipeline(&config)?;
            let input = io::read_trajectory(&traj)?;
            let lyap = pipe.lyapunov(&input)?;
            let stem = name.unwrap_or_else(|| {
                traj.file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "trajectory".into())
            });
            let path = dir.join(format!("{stem}_lyapunov.bin"));
            io::write_lyapunov_set(&path, &lyap)?;
            println!("wrote {} ({} window samples)", path.display(), lyap.num_samples());
            println!("exponents: {:?}", lyap.exponents);
        }
        Command::Observe { common, traj, mu } => {
            if !(mu > 0.0) {
                bail!("--mu must be positive, got {mu}");
            }
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let pipe = pipeline(&config)?;
            let input = io::read_trajectory(&traj)?;
            let obs = pipe.observations(&input, mu)?;
            let path = dir.join(format!("observations_mu{}.bin", float_label(mu)));
            io::write_observations(&path, &obs)?;
            println!("wrote {} ({} observations)", path.display(), obs.len());
        }
        Command::Assimilate {
            common,
            traj,
            obs,
            mu,
        } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let pipe = pipeline(&config)?;
            let truth = io::read_trajectory(&traj)?;
            let observations = io::read_observations(&obs)?;
            let run = pipe.assimilate(&truth, &observations, mu)?;
            if run.diverged {
                log::warn!("filter diverged (RMSE above 5x climatology for 100 steps)");
            }
            let pseudo = run.analysis_trajectory()?;
            let path = dir.join(format!("analysis_mu{}.bin", float_label(mu)));
            io::write_trajectory(&path, &pseudo)?;
            println!(
                "wrote {} ({} analysis samples, mean rmse {:.6})",
                path.display(),
                pseudo.len(),
                run.rmse_mean
            );
        }
        Command::Perturb {
            common,
            traj,
            sigma,
        } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let pipe = pipeline(&config)?;
            let input = io::read_trajectory(&traj)?;
            let noisy = pipe.perturbed(&input, sigma)?;
            let path = dir.join(format!("perturbed_sigma{}.bin", float_label(sigma)));
            io::write_trajectory(&path, &noisy)?;
            println!("wrote {}", path.display());
        }
        Command::Angles {
            common,
            truth,
            other,
            source,
            param,
        } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let reference = io::read_lyapunov_set(&truth)?;
            let candidate = io::read_lyapunov_set(&other)?;
            let id = config.experiment.id.clone();
            let meta = table_meta(&config);

            let mut angles = Table::new("angles", ANGLE_COLUMNS.to_vec());
            let rows = angle_summaries(&reference, &candidate, config.metrics.angle_step)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            push_angle_rows(&mut angles, &id, &source, param, &rows);
            io::write_table(&dir, &angles, &meta)?;

            if !config.metrics.k_grid.is_empty() {
                let mut pa = Table::new("pa", PA_COLUMNS.to_vec());
                let rows = pa_summaries(
                    &reference,
                    &candidate,
                    &config.metrics.k_grid,
                    config.metrics.angle_step,
                )
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
                push_pa_rows(&mut pa, &id, &source, param, &rows);
                io::write_table(&dir, &pa, &meta)?;
            }
            println!("wrote angle tables to {}", dir.display());
        }
        Command::Experiment { common } => {
            let config = load_config(&common)?;
            init_thread_pool(&config);
            let summary = clv_harness::run_experiment(&config, common.out.as_deref())
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            for diag in &summary.diagnostics {
                let mut line = format!(
                    "{} param={}: lambda1 = {:.4}",
                    diag.source,
                    diag.param_value,
                    diag.exponents.first().copied().unwrap_or(f64::NAN)
                );
                if let Some(rmse) = diag.rmse_mean {
                    line.push_str(&format!(", rmse = {rmse:.4}"));
                }
                if diag.diverged == Some(true) {
                    line.push_str(", DIVERGED");
                }
                println!("{line}");
            }
            println!(
                "wrote tables [{}] to {}",
                summary.tables.join(", "),
                summary.out_dir.display()
            );
        }
        Command::Validate => {
            let outcomes = run_invariant_suite();
            let mut failed = 0usize;
            for outcome in &outcomes {
                let tag = if outcome.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", outcome.name, outcome.detail);
                if !outcome.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} invariant check(s) failed");
            }
            println!("all {} invariant checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": format!("{e:#}") })
            );
            ExitCode::FAILURE
        }
    }
}
