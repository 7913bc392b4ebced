//! Command-line harness: `run` executes a Monte Carlo experiment from a JSON
//! config, `figures` aggregates record CSVs into plot-ready tables, and
//! `selftest` runs the oracle verification battery.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jce::harness::{
    self, run_experiment, write_figures, ExperimentConfig, Manifest, MetricRecord,
};
use jce::oracle;

#[derive(Parser)]
#[command(name = "jce", about = "Joint CFO and wideband channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment described by a JSON config.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's output_path).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Sweep one config key over several values, e.g. `Np=128,256,512`
        /// or `training=iid_qpsk,shifted_zc`. May be given multiple times
        /// (the sweeps form a product).
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Vec<String>,
        /// Also write the solver trace of trial 0 at each sweep point.
        #[arg(long)]
        trace: bool,
    },
    /// Aggregate one or more record CSVs into per-figure tables.
    Figures {
        /// Record CSVs produced by `run`.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Output directory for the figure CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Keep-fraction for trimmed means.
        #[arg(long, default_value_t = 0.95)]
        trim: f64,
        /// NSE success threshold.
        #[arg(long, default_value_t = 0.1)]
        nse_threshold: f64,
    },
    /// Run the oracle verification battery (tensor equivalence, quadrature
    /// moments, forward-model identity, CFO propagation).
    Selftest,
}

fn expand_sweeps(base: &ExperimentConfig, sweeps: &[String]) -> jce::Result<Vec<ExperimentConfig>> {
    let mut configs = vec![base.clone()];
    for sweep in sweeps {
        let (key, values) = sweep
            .split_once('=')
            .ok_or_else(|| jce::Error::Config(format!("bad sweep spec '{sweep}'")))?;
        let mut next = Vec::new();
        for cfg in &configs {
            for value in values.split(',') {
                next.push(cfg.with_override(key.trim(), value.trim())?);
            }
        }
        configs = next;
    }
    Ok(configs)
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trials: Option<usize>,
    sweeps: Vec<String>,
    trace: bool,
) -> jce::Result<bool> {
    let mut cfg = ExperimentConfig::from_path(&config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    let configs = expand_sweeps(&cfg, &sweeps)?;
    let out_dir = harness::output_dir(&cfg, out.as_deref());
    std::fs::create_dir_all(&out_dir)?;

    let records_path = out_dir.join("records.csv");
    let mut writer = csv::Writer::from_path(&records_path)?;
    let mut all_records: Vec<MetricRecord> = Vec::new();
    let mut diverged = 0usize;
    let mut channel_scale = None;
    for (idx, point) in configs.iter().enumerate() {
        let summary = run_experiment(point, |r| {
            writer.serialize(r)?;
            Ok(())
        })?;
        writer.flush()?;
        diverged += summary.diverged_trials;
        channel_scale = channel_scale.or(summary.channel_scale);
        if trace {
            let rows = harness::trace_first_trial(point)?;
            let mut tw = csv::Writer::from_path(out_dir.join(format!("trace_point{idx}.csv")))?;
            for row in rows {
                tw.serialize(row)?;
            }
            tw.flush()?;
        }
        all_records.extend(summary.records);
    }

    let manifest = Manifest {
        config: &cfg,
        git_describe: harness::git_describe(),
        channel_scale,
        records: records_path.display().to_string(),
        n_records: all_records.len(),
        diverged_trials: diverged,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_figures(&all_records, &out_dir.join("figures"), cfg.trim_keep_fraction, cfg.nse_success_threshold)?;

    eprintln!(
        "wrote {} records to {} ({} diverged trials)",
        all_records.len(),
        records_path.display(),
        diverged
    );
    Ok(diverged == 0)
}

fn cmd_figures(
    records: Vec<PathBuf>,
    out: PathBuf,
    trim: f64,
    nse_threshold: f64,
) -> jce::Result<()> {
    let mut all = Vec::new();
    for path in records {
        all.extend(harness::read_records(&path)?);
    }
    write_figures(&all, &out, trim, nse_threshold)?;
    eprintln!("aggregated {} records into {}", all.len(), out.display());
    Ok(())
}

fn cmd_selftest() -> bool {
    let results = oracle::run_selftest();
    let mut ok = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} - {}", r.name, r.detail);
        ok &= r.passed;
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, out, trials, sweep, trace } => {
            match cmd_run(config, seed, out, trials, sweep, trace) {
                Ok(true) => ExitCode::SUCCESS,
                // Completed, but some trials ended in divergence.
                Ok(false) => ExitCode::from(2),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Figures { records, out, trim, nse_threshold } => {
            match cmd_figures(records, out, trim, nse_threshold) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Selftest => {
            if cmd_selftest() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    };
    outcome
}
