//! `semivary`: fit, simulate, validate and run Monte Carlo studies.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use semivary_core::harness::{self, ReportFormat};
use semivary_core::pipeline::{efficient_fit, write_result};
use semivary_core::simulate::{save_truth, simulate_dataset, CovariateSpec};
use semivary_core::{
    load_csv, save_csv, validate, CsvSchema, Error, LongitudinalDataset, PipelineConfig, Scenario, SimConfig, Variant,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "semivary", version, about = "Efficient estimation for semivarying coefficient models")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a long-format CSV.
    Fit(FitArgs),
    /// Generate a synthetic dataset and its truth sidecar.
    Simulate(SimArgs),
    /// Run a Monte Carlo study over estimator variants.
    Mc(McArgs),
    /// Check a CSV against the data invariants.
    Validate(DataArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV, one row per observation.
    data: PathBuf,
    #[arg(long, default_value = "subject")]
    subject_col: String,
    #[arg(long, default_value = "t")]
    time_col: String,
    #[arg(long, default_value = "y")]
    response_col: String,
    /// Comma-separated constant-coefficient columns (default: x1, x2, ...).
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<String>>,
    /// Comma-separated varying-coefficient columns (default: z1, z2, ...).
    #[arg(long, value_delimiter = ',')]
    z: Option<Vec<String>>,
    /// Prepend an intercept to the varying-coefficient columns.
    #[arg(long)]
    add_intercept: bool,
    /// Map observed times affinely onto [0, 1].
    #[arg(long)]
    rescale_time: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Bounded,
    Diverging,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovariateArg {
    Truncated,
    Normal,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    m0: usize,
    #[arg(long, default_value_t = 6)]
    mr: usize,
    #[arg(long, default_value_t = 0.65)]
    binom_p: f64,
    #[arg(long, default_value_t = 0.4)]
    rho: f64,
    #[arg(long, default_value_t = 4.95)]
    omega: f64,
    #[arg(long, value_enum, default_value = "bounded")]
    scenario: ScenarioArg,
    #[arg(long = "B", default_value_t = 1.5)]
    b: f64,
    #[arg(long = "C", default_value_t = 4.0)]
    c: f64,
    #[arg(long, value_enum, default_value = "truncated")]
    covariates: CovariateArg,
    /// Random seed; generated and printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct McArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.4)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "independent,efficient,oracle")]
    variants: Vec<Variant>,
    /// Random seed; generated and printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        log::warn!("thread pool: {e}");
    }
    let res = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mc(a) => cmd_mc(a, workers),
        Command::Validate(a) => cmd_validate(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> semivary_core::Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::from_kv(&fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn load(args: &DataArgs) -> semivary_core::Result<LongitudinalDataset> {
    let header = {
        let mut rdr = csv::Reader::from_path(&args.data)?;
        rdr.headers()?.iter().map(|h| h.trim().to_string()).collect::<Vec<_>>()
    };
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut schema = CsvSchema::from_header(&refs);
    schema.subject = args.subject_col.clone();
    schema.time = args.time_col.clone();
    schema.response = args.response_col.clone();
    if let Some(x) = &args.x {
        schema.x = x.clone();
    }
    if let Some(z) = &args.z {
        schema.z = z.clone();
    }
    schema.add_intercept = args.add_intercept;
    schema.rescale_time = args.rescale_time;
    load_csv(&args.data, Some(&schema))
}

fn seed_or_generate(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        println!("seed: {s}");
        s
    })
}

fn cmd_validate(args: DataArgs) -> semivary_core::Result<ExitCode> {
    let ds = load(&args)?;
    let violations = validate(&ds);
    if violations.is_empty() {
        println!("ok: {} subjects, {} observations, p = {}, q = {}", ds.n(), ds.n1(), ds.p(), ds.q());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{v}");
    }
    Ok(ExitCode::from(1))
}

fn cmd_fit(args: FitArgs) -> semivary_core::Result<ExitCode> {
    let cfg = resolve_config(&args.config)?;
    let ds = load(&args.data)?;
    info!("fitting {} subjects, {} observations", ds.n(), ds.n1());
    let result = efficient_fit(&ds, &cfg)?;
    let mut extra = vec![
        ("version".to_string(), VERSION.to_string()),
        ("data".to_string(), args.data.data.display().to_string()),
        ("rescale_time".to_string(), args.data.rescale_time.to_string()),
        ("subjects".to_string(), ds.n().to_string()),
        ("observations".to_string(), ds.n1().to_string()),
    ];
    extra.extend(config_pairs(&cfg));
    write_result(&ds, &result, &args.out_dir, &extra)?;
    println!("{:<8} {:>12} {:>12} {:>12} {:>12}", "coef", "indep", "se", "efficient", "se");
    for k in 0..result.beta_eff.len() {
        println!(
            "{:<8} {:>12} {:>12} {:>12} {:>12}",
            format!("beta{}", k + 1),
            harness::sig6(result.beta_init[k]),
            harness::sig6(result.se_init[k]),
            harness::sig6(result.beta_eff[k]),
            harness::sig6(result.se_eff[k]),
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Resolved configuration as manifest entries prefixed with `config.`.
fn config_pairs(cfg: &PipelineConfig) -> Vec<(String, String)> {
    cfg.to_kv()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (format!("config.{k}"), v.to_string()))
        .collect()
}

fn cmd_simulate(args: SimArgs) -> semivary_core::Result<ExitCode> {
    let seed = seed_or_generate(args.seed);
    let cfg = SimConfig {
        m0: args.m0,
        mr: args.mr,
        binom_p: args.binom_p,
        omega: args.omega,
        covariates: match args.covariates {
            CovariateArg::Truncated => CovariateSpec::Truncated { bound: 2.5 },
            CovariateArg::Normal => CovariateSpec::StandardNormal,
        },
        scenario: match args.scenario {
            ScenarioArg::Bounded => Scenario::Bounded,
            ScenarioArg::Diverging => Scenario::Diverging { b: args.b, c: args.c },
        },
        ..SimConfig::standard(args.n, args.rho, seed)
    };
    let (ds, truth) = simulate_dataset(&cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    save_csv(&ds, args.out_dir.join("data.csv"))?;
    save_truth(&ds, &truth, args.out_dir.join("truth.csv"))?;
    let mut m = String::new();
    let _ = writeln!(m, "version={VERSION}");
    let _ = writeln!(m, "seed={seed}");
    let _ = writeln!(m, "n={}", cfg.n);
    let _ = writeln!(m, "m0={}", cfg.m0);
    let _ = writeln!(m, "mr={}", cfg.mr);
    let _ = writeln!(m, "binom_p={}", cfg.binom_p);
    let _ = writeln!(m, "rho={}", cfg.rho);
    let _ = writeln!(m, "omega={}", cfg.omega);
    let _ = writeln!(m, "covariates={:?}", cfg.covariates);
    let _ = writeln!(m, "scenario={:?}", cfg.scenario);
    fs::write(args.out_dir.join("manifest.txt"), m)?;
    println!("wrote {} subjects, {} observations to {}", ds.n(), ds.n1(), args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_mc(args: McArgs, workers: usize) -> semivary_core::Result<ExitCode> {
    let cfg = resolve_config(&args.config)?;
    let seed = seed_or_generate(args.seed);
    let sim = SimConfig::standard(args.n, args.rho, seed);
    let started = SystemTime::now();
    let summary = harness::mc_study(&sim, args.reps, &args.variants, &cfg, workers)?;
    let out = &args.out_dir;
    fs::create_dir_all(out)?;
    write_text(out, "summary.csv", &harness::report(&summary, ReportFormat::Csv))?;
    let md = harness::report(&summary, ReportFormat::Markdown);
    write_text(out, "summary.md", &md)?;
    harness::write_raw(&summary, fs::File::create(out.join("raw.csv"))?)?;

    let mut m = String::new();
    let _ = writeln!(m, "version={VERSION}");
    let _ = writeln!(m, "seed={seed}");
    let _ = writeln!(m, "n={}", args.n);
    let _ = writeln!(m, "rho={}", args.rho);
    let _ = writeln!(m, "reps={}", args.reps);
    let names: Vec<&str> = args.variants.iter().map(|v| v.name()).collect();
    let _ = writeln!(m, "variants={}", names.join(","));
    let _ = writeln!(m, "failures={}", summary.failures);
    let _ = writeln!(m, "runtime_secs={:.3}", summary.runtime_secs);
    if let Ok(d) = started.duration_since(UNIX_EPOCH) {
        let _ = writeln!(m, "started_unix={}", d.as_secs());
    }
    for (k, v) in config_pairs(&cfg) {
        let _ = writeln!(m, "{k}={v}");
    }
    fs::write(out.join("manifest.txt"), m)?;
    print!("{md}");
    Ok(ExitCode::SUCCESS)
}

fn write_text(dir: &Path, name: &str, body: &str) -> semivary_core::Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}
