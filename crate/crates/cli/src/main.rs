//! `tsrr` — estimate on a CSV, run one simulated replication, or replicate a
//! simulation panel.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 invalid
//! arguments or configuration, 3 unreadable or malformed data, 4 estimation
//! failure (weak identification, singular systems, ...).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tsrr::dgp::PRESET_NAMES;
use tsrr::io::write_atomic;
use tsrr::mc::{run_estimator, BIAS_VAR_NOTE};
use tsrr::{
    generate, load_dataset_csv, rjive, run_panel, split_indices, tsrr as two_step, CsvSchema, EstimateResult,
    Estimator, PenaltyPlan, RjiveConfig, SimConfig,
};

const SCHEMA_VERSION: u32 = 1;
const THREADS_ENV: &str = "TSRR_THREADS";

#[derive(Parser)]
#[command(name = "tsrr", version, about = "Two-step ridge IV estimation and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the treatment effect on a CSV file.
    Estimate(EstimateArgs),
    /// Generate one replication of a simulation design and estimate on it.
    Simulate(SimulateArgs),
    /// Run every replication of a simulation panel.
    Replicate(ReplicateArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Tsrr,
    Rjive,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Tsrr => Estimator::Tsrr,
            EstimatorArg::Rjive => Estimator::Rjive,
        }
    }
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    y: String,
    /// Treatment column.
    #[arg(long)]
    d: String,
    /// Control columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    x: Vec<String>,
    /// Excluded instrument columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    z: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    cx: f64,
    #[arg(long, default_value_t = 0.1)]
    cz: f64,
    /// Null value of the Wald test.
    #[arg(long = "null", default_value_t = 0.0, allow_negative_numbers = true)]
    null: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Tsrr)]
    estimator: EstimatorArg,
    /// JSON result document.
    #[arg(long, default_value = "estimate.json")]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Design {
    /// Shipped panel preset.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
    panel: Option<String>,
    /// TOML or JSON simulation config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: Design,
    #[arg(long, default_value_t = 0)]
    rep: usize,
    /// Overrides the design's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimators to run; both when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    estimator: Vec<EstimatorArg>,
    /// Also write the generated dataset as CSV.
    #[arg(long)]
    data_out: Option<PathBuf>,
    #[arg(long, default_value = "simulate.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    #[command(flatten)]
    design: Design,
    /// Overrides the design's replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Overrides the design's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "replicate-out")]
    out: PathBuf,
}

#[derive(Serialize)]
#[serde(rename_all = "lowercase")]
enum CommandName {
    Estimate,
    Simulate,
    Replicate,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: CommandName,
    config_path: Option<&'a Path>,
    output_path: &'a Path,
    seed: u64,
    threads: usize,
    build: &'static str,
}

#[derive(Serialize)]
struct EstimateDocument<'a> {
    schema_version: u32,
    manifest: Manifest<'a>,
    inputs: &'a EstimateArgs,
    #[serde(flatten)]
    result: &'a EstimateResult,
}

#[derive(Serialize)]
struct SimulateDocument<'a> {
    schema_version: u32,
    manifest: Manifest<'a>,
    config: &'a SimConfig,
    rep: usize,
    c_applied_x: f64,
    c_applied_z: f64,
    results: Vec<EstimateResult>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    schema_version: u32,
    manifest: Manifest<'a>,
    panel: Option<&'a str>,
    /// Resolved configuration, every default materialized.
    config: &'a SimConfig,
    config_toml: String,
    bias_var_definition: &'static str,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn args(e: impl std::fmt::Display) -> Self {
        Failure { code: 2, message: e.to_string() }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Failure { code: 3, message: e.to_string() }
    }

    fn estimation(e: impl std::fmt::Display) -> Self {
        Failure { code: 4, message: e.to_string() }
    }

    fn output(e: impl std::fmt::Display) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

const BUILD: &str = concat!("tsrr ", env!("CARGO_PKG_VERSION"));

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Replicate(a) => replicate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(doc).map_err(Failure::output)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(Failure::output)
}

fn print_result(r: &EstimateResult) {
    println!("estimator   {}", r.estimator);
    println!("alpha_hat   {:.6}", r.alpha_hat);
    println!("{:.0}% CI     [{:.6}, {:.6}]", r.level * 100.0, r.ci_low, r.ci_high);
    println!("Wald (r={})  {:.6}", r.null_value, r.wald);
    println!("p-value     {:.6}", r.p_value);
}

fn estimate(args: EstimateArgs) -> Result<(), Failure> {
    let schema = CsvSchema {
        y: args.y.clone(),
        d: args.d.clone(),
        x: args.x.clone(),
        z1: args.z.clone(),
    };
    let dataset = load_dataset_csv(&args.data, &schema).map_err(Failure::data)?;
    let result = match args.estimator {
        EstimatorArg::Tsrr => {
            let split = split_indices(dataset.n(), args.split_fraction, args.seed).map_err(Failure::args)?;
            two_step(&dataset, &PenaltyPlan::tuned(args.cx, args.cz), &split, args.null, args.level)
        }
        EstimatorArg::Rjive => {
            let cfg = RjiveConfig {
                c_x: args.cx,
                ..Default::default()
            };
            rjive(&dataset, &cfg, args.null, args.level)
        }
    }
    .map_err(Failure::estimation)?;

    print_result(&result);
    let doc = EstimateDocument {
        schema_version: SCHEMA_VERSION,
        manifest: Manifest {
            command: CommandName::Estimate,
            config_path: None,
            output_path: &args.out,
            seed: args.seed,
            threads: 1,
            build: BUILD,
        },
        inputs: &args,
        result: &result,
    };
    write_json(&args.out, &doc)
}

fn load_design(design: &Design) -> Result<SimConfig, Failure> {
    match (&design.panel, &design.config) {
        (Some(name), _) => SimConfig::preset(name).map_err(Failure::args),
        (None, Some(path)) => SimConfig::from_path(path).map_err(Failure::args),
        (None, None) => Err(Failure::args("one of --panel or --config is required")),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_design(&args.design)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (dataset, coef) = generate(&config, args.rep).map_err(Failure::args)?;
    let estimators: Vec<Estimator> = if args.estimator.is_empty() {
        vec![Estimator::Tsrr, Estimator::Rjive]
    } else {
        args.estimator.iter().map(|&e| e.into()).collect()
    };
    let mut results = Vec::with_capacity(estimators.len());
    for est in estimators {
        let r = run_estimator(&config, est, &dataset, args.rep).map_err(Failure::estimation)?;
        print_result(&r);
        results.push(r);
    }
    if let Some(path) = &args.data_out {
        let tmp = path.with_extension("csv.partial");
        dataset.write_csv(&tmp).map_err(Failure::output)?;
        std::fs::rename(&tmp, path).map_err(Failure::output)?;
    }
    let doc = SimulateDocument {
        schema_version: SCHEMA_VERSION,
        manifest: Manifest {
            command: CommandName::Simulate,
            config_path: args.design.config.as_deref(),
            output_path: &args.out,
            seed: config.seed,
            threads: 1,
            build: BUILD,
        },
        config: &config,
        rep: args.rep,
        c_applied_x: coef.c_applied_x,
        c_applied_z: coef.c_applied_z,
        results,
    };
    write_json(&args.out, &doc)
}

fn replicate(args: ReplicateArgs) -> Result<(), Failure> {
    let mut config = load_design(&args.design)?;
    if let Some(reps) = args.reps {
        config.n_reps = reps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(Failure::args)?;
    let threads = match args.threads {
        Some(0) => return Err(Failure::args("--threads must be at least 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };

    let panel = run_panel(&config, &[Estimator::Tsrr, Estimator::Rjive], threads).map_err(Failure::estimation)?;
    let title = args.design.panel.clone().unwrap_or_else(|| "custom design".into());
    print!("{}", panel.to_table(&title));

    std::fs::create_dir_all(&args.out).map_err(Failure::output)?;
    write_atomic(&args.out.join("panel.csv"), panel.to_csv().as_bytes()).map_err(Failure::output)?;
    write_atomic(&args.out.join("records.csv"), panel.records_csv().as_bytes()).map_err(Failure::output)?;
    write_atomic(&args.out.join("table.txt"), panel.to_table(&title).as_bytes()).map_err(Failure::output)?;
    let provenance = Provenance {
        schema_version: SCHEMA_VERSION,
        manifest: Manifest {
            command: CommandName::Replicate,
            config_path: args.design.config.as_deref(),
            output_path: &args.out,
            seed: config.seed,
            threads,
            build: BUILD,
        },
        panel: args.design.panel.as_deref(),
        config: &config,
        config_toml: config.to_toml(),
        bias_var_definition: BIAS_VAR_NOTE,
    };
    write_json(&args.out.join("provenance.json"), &provenance)
}
