//! `warmlab` — schedule inspection, crossover analysis, training runs,
//! policy sweeps, and divergence analysis from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 run classified as diverged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use warmlab::harness::{
    detect_divergence, init_state, metrics_from_csv, train_from, write_artifacts, DetectorConfig,
    RunConfig, RunStatus,
};
use warmlab::schedule::{
    self, crossovers, format_lr, schedule_table, CrossDirection, ScheduleConfig, ScheduleTable,
};
use warmlab::sweep::{run_sweep, SweepSpec};

#[derive(Parser)]
#[command(name = "warmlab", version, about = "Warmup-policy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one or more schedules into a CSV table.
    Schedule(ScheduleArgs),
    /// Find the steps where one schedule's LR overtakes another's.
    Crossover(CrossoverArgs),
    /// Train a run config and write metrics, verdict, and checkpoints.
    Train(TrainArgs),
    /// Train every schedule variant of a sweep spec and summarize.
    Sweep(SweepArgs),
    /// Classify an existing metrics log as converged/diverged/inconclusive.
    Detect(DetectArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule config JSON; repeat for a multi-column table.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// Add the four built-in default policies as columns.
    #[arg(long)]
    defaults: bool,
    /// Last step to sample (inclusive).
    #[arg(long)]
    max_step: u64,
    /// Sampling stride in steps.
    #[arg(long, default_value_t = 1)]
    stride: u64,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossoverArgs {
    /// First schedule: built-in policy name or config JSON path.
    a: String,
    /// Second schedule: built-in policy name or config JSON path.
    b: String,
    /// Scan range as LO:HI (inclusive); defaults to 1:warmup_steps.
    #[arg(long, value_name = "LO:HI")]
    range: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics, verdict, and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec JSON (base run config + schedule variants).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the spec's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variants to run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct DetectArgs {
    /// Metrics CSV produced by `train` (or any log with the same header).
    #[arg(long)]
    metrics: PathBuf,
    /// Spike threshold on the pre-clip gradient norm.
    #[arg(long, default_value_t = 100.0)]
    spike: f64,
    /// Baseline threshold a healthy run stays under.
    #[arg(long, default_value_t = 25.0)]
    baseline: f64,
    /// Ignore spikes at or before this step; defaults to last step / 10.
    #[arg(long)]
    burn_in: Option<u64>,
    /// Spikes needed to call the run diverged.
    #[arg(long, default_value_t = 1)]
    min_spikes: usize,
    /// Write the verdict JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures with their exit codes: usage/config problems exit 2,
/// everything else 1. A diverged verdict is not an error; commands
/// signal it by returning exit code 3 directly.
enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            CliError::Failure(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

const EXIT_DIVERGED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Schedule(args) => cmd_schedule(args),
        Command::Crossover(args) => cmd_crossover(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Detect(args) => cmd_detect(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, content)
            .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- schedule

fn cmd_schedule(args: ScheduleArgs) -> Result<ExitCode, CliError> {
    let mut columns: Vec<(String, ScheduleConfig)> = Vec::new();
    if args.defaults {
        for config in ScheduleConfig::all_defaults() {
            columns.push((config.policy.name().to_string(), config));
        }
    }
    for path in &args.configs {
        let config = schedule::deserialize(&read_file(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "schedule".to_string());
        columns.push((label, config));
    }
    if columns.is_empty() {
        return Err(CliError::Usage(
            "nothing to sample: pass --config <path> and/or --defaults".to_string(),
        ));
    }

    let labels = uniquify(columns.iter().map(|(l, _)| l.clone()).collect());
    let tables: Vec<ScheduleTable> = columns
        .iter()
        .map(|(_, config)| schedule_table(config, args.max_step, args.stride))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut csv = String::from("step");
    for label in &labels {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    for i in 0..tables[0].rows.len() {
        csv.push_str(&tables[0].rows[i].0.to_string());
        for table in &tables {
            csv.push(',');
            csv.push_str(&format_lr(table.rows[i].1));
        }
        csv.push('\n');
    }
    write_output(args.out.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}

/// Make duplicate column labels unique by appending `_2`, `_3`, ...
fn uniquify(labels: Vec<String>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    labels
        .into_iter()
        .map(|label| {
            let count = seen.iter().filter(|s| **s == label).count();
            seen.push(label.clone());
            if count == 0 {
                label
            } else {
                format!("{label}_{}", count + 1)
            }
        })
        .collect()
}

// --------------------------------------------------------------- crossover

fn resolve_schedule(spec: &str) -> Result<(String, ScheduleConfig), CliError> {
    let builtin = match spec {
        "inverse_sqrt" => Some(ScheduleConfig::default_inverse_sqrt()),
        "piecewise_linear" => Some(ScheduleConfig::default_piecewise_linear()),
        "polynomial" => Some(ScheduleConfig::default_polynomial()),
        "exponential" => Some(ScheduleConfig::default_exponential()),
        _ => None,
    };
    if let Some(config) = builtin {
        return Ok((spec.to_string(), config));
    }
    let path = Path::new(spec);
    let config = schedule::deserialize(&read_file(path)?)
        .map_err(|e| CliError::Usage(format!("{spec}: {e}")))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok((label, config))
}

fn parse_range(spec: &str) -> Result<(u64, u64), CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let err = || CliError::Usage(format!("--range must be LO:HI, got `{spec}`"));
    if parts.len() != 2 {
        return Err(err());
    }
    let lo = parts[0].parse().map_err(|_| err())?;
    let hi = parts[1].parse().map_err(|_| err())?;
    Ok((lo, hi))
}

fn cmd_crossover(args: CrossoverArgs) -> Result<ExitCode, CliError> {
    let (label_a, config_a) = resolve_schedule(&args.a)?;
    let (label_b, config_b) = resolve_schedule(&args.b)?;
    let (lo, hi) = match &args.range {
        Some(spec) => parse_range(spec)?,
        None => (1, config_a.warmup_steps),
    };
    let found =
        crossovers(&config_a, &config_b, lo, hi).map_err(|e| CliError::Usage(e.to_string()))?;
    if found.is_empty() {
        println!("no crossovers in [{lo}, {hi}]");
        return Ok(ExitCode::SUCCESS);
    }
    for crossover in &found {
        let (before, after) = match crossover.direction {
            CrossDirection::AOvertakesB => (&label_b, &label_a),
            CrossDirection::BOvertakesA => (&label_a, &label_b),
        };
        println!(
            "crossover at step {}: {before} leads before, {after} leads after",
            crossover.step
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- train

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let run: RunConfig = serde_json::from_str(&read_file(path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    run.validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(run)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, CliError> {
    let run = load_run_config(&args.config)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", args.out.display())))?;

    let state = init_state(&run).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = train_from(&run, state, Some(&args.out))
        .map_err(|e| CliError::Failure(e.to_string()))?;
    write_artifacts(&args.out, &run, &outcome).map_err(|e| CliError::Failure(e.to_string()))?;

    let last_step = outcome.metrics.last().map(|r| r.step).unwrap_or(0);
    println!(
        "status: {}  final_loss: {:.6e}  steps: {last_step}  artifacts: {}",
        outcome.verdict.status.as_str(),
        outcome.verdict.final_loss,
        args.out.display()
    );
    Ok(if outcome.verdict.status == RunStatus::Diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    })
}

// ------------------------------------------------------------------- sweep

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, CliError> {
    let spec: SweepSpec = serde_json::from_str(&read_file(&args.config)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    spec.validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| spec.out_dir.clone())
        .ok_or_else(|| {
            CliError::Usage("no output directory: pass --out or set out_dir in the spec".to_string())
        })?;

    let rows = run_sweep(&spec, &out_dir, args.jobs).map_err(|e| CliError::Failure(e.to_string()))?;
    for row in &rows {
        match &row.error {
            Some(e) => println!("{}: error ({e})", row.variant),
            None => println!(
                "{}: {}  final_loss: {:.6e}",
                row.variant, row.status, row.final_loss
            ),
        }
    }
    println!("summary: {}", out_dir.join("summary.csv").display());
    if rows.iter().any(|r| r.error.is_some()) {
        return Err(CliError::Failure(
            "one or more variants failed; see summary".to_string(),
        ));
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------ detect

fn cmd_detect(args: DetectArgs) -> Result<ExitCode, CliError> {
    let rows = metrics_from_csv(&read_file(&args.metrics)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.metrics.display())))?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no data rows",
            args.metrics.display()
        )));
    }
    let last_step = rows.last().map(|r| r.step).unwrap_or(0);
    let config = DetectorConfig {
        spike_threshold: args.spike,
        baseline_threshold: args.baseline,
        burn_in_steps: args.burn_in.unwrap_or(last_step / 10),
        min_spikes: args.min_spikes,
    };
    let verdict =
        detect_divergence(&rows, &config).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&verdict)
        .map_err(|e| CliError::Failure(e.to_string()))?;
    write_output(args.out.as_deref(), &format!("{json}\n"))?;
    Ok(if verdict.status == RunStatus::Diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    })
}
