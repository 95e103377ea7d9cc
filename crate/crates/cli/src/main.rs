//! `cellgrow`: growing architecture search, baselines, parameter counts and
//! gradient checks from the command line.

mod config;
mod trial;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use cellgrow::analysis::{aggregate, count_table, preset_columns, read_metrics_csv, render_count_table, write_aggregate_csv, MetricRecord, TableColumn};
use cellgrow::gradcheck::{standard_suite, PRIMITIVES};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "cellgrow", version, about = "Growing differentiable architecture search for recurrent cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the growing search once per seed.
    Search(RunArgs),
    /// Train a fixed cell (LSTM, GRU, RNN or a fixed backbone) once per seed.
    Baseline(RunArgs),
    /// Print closed-form parameter counts.
    Count(CountArgs),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Average the metrics of every trial in a run directory.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Trials run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    G7,
    Brics,
}

#[derive(Args)]
struct CountArgs {
    /// Table columns; both presets when neither this nor --n-x/--n-h is given.
    #[arg(long, value_enum)]
    preset: Vec<Preset>,
    #[arg(long, requires = "n_h")]
    n_x: Option<usize>,
    #[arg(long, requires = "n_x")]
    n_h: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_nodes: usize,
    #[arg(long, default_value_t = 7)]
    max_nodes: usize,
    /// Count LSTM/GRU bias vectors.
    #[arg(long)]
    bias: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Unrolled steps for the cell checks.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Corrupt one named check's analytic gradient (negative control).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory holding `trial-*/metrics.csv`.
    run: PathBuf,
    /// Output file; defaults to `<run>/aggregate.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error with its exit code.
struct Failure(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        Failure(exit_code(&e), e)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(err) = cause.downcast_ref::<cellgrow::Error>() {
            use cellgrow::Error as E;
            return match err {
                E::Config(_) | E::Parse { .. } | E::Io(_) | E::Format(_) | E::Spec(_) => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_CONFIG;
        }
    }
    EXIT_NUMERIC
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => cmd_run(&a, true),
        Command::Baseline(a) => cmd_run(&a, false),
        Command::Count(a) => cmd_count(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Export(a) => cmd_export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn cmd_run(args: &RunArgs, search: bool) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if args.jobs == 0 {
        return Err(Failure(EXIT_CONFIG, ConfigError::new("--jobs must be >= 1").into()));
    }
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("resolved_config.toml"), cfg.to_toml()?).context("writing resolved_config.toml")?;

    let outcomes = trial::for_each_seed(&cfg.seeds, args.jobs, |seed| {
        let o = if search { trial::search_trial(&cfg, &out, seed) } else { trial::baseline_trial(&cfg, &out, seed) };
        eprintln!("{}", o.line);
        o
    });
    let records: Vec<MetricRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    write_aggregate(&out.join("aggregate.csv"), &records)?;
    let summary: String = outcomes.iter().map(|o| o.line.clone() + "\n").collect();
    std::fs::write(out.join("summary.txt"), &summary).context("writing summary.txt")?;
    print!("{summary}");

    let mut worst: Option<Failure> = None;
    for o in outcomes {
        if let Some(e) = o.error {
            let f = Failure::from(e.context(format!("trial {}", o.seed)));
            // a config problem outranks a numeric one
            if worst.as_ref().is_none_or(|w| f.0 < w.0) {
                worst = Some(f);
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn cmd_count(args: &CountArgs) -> Result<(), Failure> {
    let mut columns: Vec<TableColumn> = Vec::new();
    let presets = preset_columns();
    for p in &args.preset {
        columns.push(presets[*p as usize].clone());
    }
    if let (Some(n_x), Some(n_h)) = (args.n_x, args.n_h) {
        columns.push(TableColumn { label: format!("{n_x}x{n_h}"), n_x, n_h });
    }
    if columns.is_empty() {
        columns = presets;
    }
    if args.min_nodes == 0 || args.min_nodes > args.max_nodes {
        return Err(Failure(EXIT_CONFIG, ConfigError::new("need 1 <= --min-nodes <= --max-nodes").into()));
    }
    let rows = count_table(&columns, args.min_nodes..=args.max_nodes, args.bias)?;
    print!("{}", render_count_table(&columns, &rows));
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    if let Some(f) = &args.fault {
        let known = PRIMITIVES.iter().any(|p| p == f) || f == "random_graph" || cellgrow::gradcheck::suite_cells().iter().any(|(n, _)| n == f);
        if !known {
            return Err(Failure(EXIT_CONFIG, ConfigError::new(format!("unknown check {f:?}")).into()));
        }
    }
    let results = standard_suite(args.seeds, args.steps, args.fault.as_deref())?;
    println!("{:<20}{:>7}{:>14}{:>10}  status", "check", "seeds", "max_rel_err", "tol");
    for r in &results {
        println!(
            "{:<20}{:>7}{:>14.3e}{:>10.0e}  {}",
            r.name,
            r.seeds,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure(EXIT_CHECK, anyhow::anyhow!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_export(args: &ExportArgs) -> Result<(), Failure> {
    let mut records = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&args.run)
        .with_context(|| format!("reading {}", args.run.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure(EXIT_CONFIG, ConfigError::new(format!("no trial metrics under {}", args.run.display())).into()));
    }
    for d in &dirs {
        let path = d.join("metrics.csv");
        let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        records.extend(read_metrics_csv(file).with_context(|| format!("reading {}", path.display()))?);
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join("aggregate.csv"));
    write_aggregate(&out, &records)?;
    println!("{} trials, {} records -> {}", dirs.len(), records.len(), out.display());
    Ok(())
}

fn write_aggregate(path: &Path, records: &[MetricRecord]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_aggregate_csv(&aggregate(records), &mut buf)?;
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
