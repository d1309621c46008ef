//! Command-line verbs: `segment`, `init-only`, `bench`, `spectrum`, `phantom`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::{
    add_gaussian_noise, make_phantom, solve_and_score, write_bench_csv, BenchRow, PhantomKind,
};
use crate::config::{read_json, BenchConfig, RunConfig};
use crate::error::{Result, SegError};
use crate::fidelity::{FidelityModel, MeanEstimator};
use crate::iglim::multi_iglim;
use crate::image::{lift_dimensions, load_image, overlay_contours, save_image, save_labels, ImageField};
use crate::kernel::{circulant_spectrum_1d, circulant_spectrum_2d, lemma_lower_bound};
use crate::solver::{solve, EnergyBreakdown, StopRule};

pub const THREADS_ENV: &str = "ICTMSEG_THREADS";
pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Parser, Debug)]
#[command(name = "ictmseg", version, about = "Multi-phase segmentation with a local variance force")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Initialize, solve, and write labels, overlay, energy trace and run.json.
    Segment(RunArgs),
    /// Run only the edge-clustering initialization and write init_labels.png.
    InitOnly(RunArgs),
    /// Run the plain vs. local-variance benchmark grid.
    Bench(BenchArgs),
    /// Print the Gaussian circulant spectrum for size n (or m x n) as JSON.
    Spectrum(SpectrumArgs),
    /// Write a synthetic phantom image and its ground-truth labels.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON run configuration (a previous run.json also works); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    pub model: Option<FidelityModel>,
    #[arg(long)]
    pub phases: Option<usize>,
    /// Comma-separated per-phase fidelity weights.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Local variance force weight.
    #[arg(long = "p")]
    pub p: Option<f64>,
    #[arg(long)]
    pub lvf_radius: Option<usize>,
    #[arg(long, value_parser = parse_estimator)]
    pub mean_estimator: Option<MeanEstimator>,
    #[arg(long)]
    pub iglim_lambda: Option<f64>,
    #[arg(long)]
    pub iglim_alpha: Option<f64>,
    #[arg(long)]
    pub iglim_rounds: Option<usize>,
    /// Append CIELAB channels to RGB input.
    #[arg(long)]
    pub lift: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// `no-pixel-change` or `energy-rel-tol:EPS`.
    #[arg(long, value_parser = parse_stop_rule)]
    pub stop_rule: Option<StopRule>,
    /// Record wall time per iteration in energy.csv.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug, Default)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub n: usize,
    /// Second dimension for the 2D spectrum.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma: f64,
    /// Include every eigenvalue in the output.
    #[arg(long)]
    pub full: bool,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, value_parser = parse_phantom)]
    pub kind: PhantomKind,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian noise variance on the 0-255 scale.
    #[arg(long, default_value_t = 0.0)]
    pub variance: f64,
    #[arg(long)]
    pub output: PathBuf,
}

fn parse_model(s: &str) -> std::result::Result<FidelityModel, String> {
    match s {
        "cv" => Ok(FidelityModel::Cv),
        "lif" => Ok(FidelityModel::Lif),
        _ => Err(format!("expected cv or lif, got {s:?}")),
    }
}

fn parse_estimator(s: &str) -> std::result::Result<MeanEstimator, String> {
    match s {
        "global" | "global-mean" | "global_mean" => Ok(MeanEstimator::GlobalMean),
        "local" | "local-gaussian-mean" | "local_gaussian_mean" => Ok(MeanEstimator::LocalGaussianMean),
        _ => Err(format!("expected global-mean or local-gaussian-mean, got {s:?}")),
    }
}

fn parse_stop_rule(s: &str) -> std::result::Result<StopRule, String> {
    if s == "no-pixel-change" || s == "no_pixel_change" {
        return Ok(StopRule::NoPixelChange);
    }
    let tol = s
        .strip_prefix("energy-rel-tol:")
        .or_else(|| s.strip_prefix("energy_rel_tol:"))
        .ok_or_else(|| format!("expected no-pixel-change or energy-rel-tol:EPS, got {s:?}"))?;
    let tolerance = tol.parse::<f64>().map_err(|e| format!("bad tolerance {tol:?}: {e}"))?;
    Ok(StopRule::EnergyRelTol { tolerance })
}

fn parse_phantom(s: &str) -> std::result::Result<PhantomKind, String> {
    s.parse().map_err(|e: SegError| e.to_string())
}

/// Loads the optional config file, applies flag overrides and validates.
pub fn resolve_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<RunConfig>(path)?,
        None => RunConfig::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &args.$flag { cfg.$field = v.clone(); })*
        };
    }
    apply!(model => model, phases => phases, lambdas => lambdas, mu => mu, tau => tau,
        sigma => sigma, p => p, lvf_radius => lvf_radius, mean_estimator => mean_estimator,
        seed => seed, max_iters => max_iters, stop_rule => stop_rule);
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.output {
        cfg.output = Some(v.clone());
    }
    if let Some(v) = args.iglim_lambda {
        cfg.iglim.lambda = v;
    }
    if let Some(v) = args.iglim_alpha {
        cfg.iglim.alpha = v;
    }
    if let Some(v) = args.iglim_rounds {
        cfg.iglim.rounds = v;
    }
    cfg.lift |= args.lift;
    cfg.timing |= args.timing;
    cfg.validate()?;
    cfg.input_path()?;
    cfg.output_dir()?;
    Ok(cfg)
}

pub fn resolve_bench_config(args: &BenchArgs) -> Result<BenchConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<BenchConfig>(path)?,
        None => BenchConfig::default(),
    };
    if let Some(v) = &args.output {
        cfg.output = Some(v.clone());
    }
    cfg.validate()?;
    if cfg.output.is_none() {
        return Err(SegError::Config("no output directory given (use --output or \"output\")".into()));
    }
    Ok(cfg)
}

/// Summary written to `run.json` next to the resolved configuration.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub decay_guaranteed: bool,
    pub iterations: usize,
    pub converged: bool,
    pub wall_seconds: f64,
    pub final_energy: EnergyBreakdown,
    pub phase_sizes: Vec<usize>,
    pub version: &'static str,
}

fn working_image(cfg: &RunConfig) -> Result<(ImageField, ImageField)> {
    let img = load_image(cfg.input_path()?)?;
    let work = if cfg.lift {
        if img.channels() != 3 {
            return Err(SegError::Config(format!(
                "lift needs an RGB image, input has {} channel(s)",
                img.channels()
            )));
        }
        lift_dimensions(&img)?
    } else {
        img.clone()
    };
    Ok((img, work))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SegError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SegError::Contract(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| SegError::io(path, e))
}

pub fn run_segment(cfg: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let (original, work) = working_image(cfg)?;
    let out_dir = cfg.output_dir()?;
    let scfg = cfg.solver_config();
    let init = multi_iglim(&work, &cfg.iglim_config(), cfg.seed)?;
    create_dir(out_dir)?;
    save_labels(&init, out_dir.join("init_labels.png"))?;
    let out = solve(&work, &init, &scfg)?;
    save_labels(&out.partition, out_dir.join("labels.png"))?;
    save_image(&overlay_contours(&original, &out.partition, OVERLAY_COLOR)?, out_dir.join("overlay.png"))?;
    out.trace.write_csv(out_dir.join("energy.csv"), cfg.timing)?;
    let summary = RunSummary {
        config: cfg.clone(),
        decay_guaranteed: scfg.decay_guaranteed(),
        iterations: out.iterations,
        converged: out.converged,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_energy: out.trace.records.last().expect("trace has the initial row").energy,
        phase_sizes: out.partition.phase_sizes(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&out_dir.join("run.json"), &summary)?;
    Ok(summary)
}

pub fn run_init_only(cfg: &RunConfig) -> Result<()> {
    let (_, work) = working_image(cfg)?;
    let init = multi_iglim(&work, &cfg.iglim_config(), cfg.seed)?;
    let out_dir = cfg.output_dir()?;
    create_dir(out_dir)?;
    save_labels(&init, out_dir.join("init_labels.png"))
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<String>,
}

fn bench_cell(cfg: &BenchConfig, kind: PhantomKind, variance: f64, dir: &Path) -> Result<Vec<BenchRow>> {
    let phantom = make_phantom(kind, cfg.size, cfg.seed)?;
    let noisy = add_gaussian_noise(&phantom.image, variance, cfg.seed)?;
    create_dir(dir)?;
    save_image(&noisy, dir.join("noisy.png"))?;
    save_labels(&phantom.truth, dir.join("truth.png"))?;
    let init = multi_iglim(&noisy, &cfg.iglim.to_config(kind.phases()), cfg.seed)?;
    save_labels(&init, dir.join("init_labels.png"))?;
    cfg.p_values
        .iter()
        .map(|&p| {
            let run = solve_and_score(&noisy, &init, &phantom.truth, &cfg.solver_config(p))?;
            save_labels(&run.partition, dir.join(format!("labels_p{p}.png")))?;
            run.trace.write_csv(dir.join(format!("energy_p{p}.csv")), false)?;
            write_json(&dir.join(format!("metrics_p{p}.json")), &run.metrics)?;
            Ok(BenchRow {
                case: kind.name().to_string(),
                variance,
                p,
                accuracy: run.metrics.accuracy,
                iters: run.iterations,
                seconds: run.seconds,
            })
        })
        .collect()
}

/// Runs every (phantom, variance) cell; failed cells become NaN rows.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    let out_dir = cfg.output.as_deref().ok_or_else(|| SegError::Config("no output directory".into()))?;
    create_dir(out_dir)?;
    let cells: Vec<(PhantomKind, f64)> = cfg
        .phantoms
        .iter()
        .flat_map(|&k| cfg.variances.iter().map(move |&v| (k, v)))
        .collect();
    let results: Vec<(PhantomKind, f64, Result<Vec<BenchRow>>)> = cells
        .par_iter()
        .map(|&(kind, variance)| {
            let dir = out_dir.join(format!("{}_var{variance}", kind.name()));
            (kind, variance, bench_cell(cfg, kind, variance, &dir))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (kind, variance, result) in results {
        match result {
            Ok(r) => rows.extend(r),
            Err(e) => {
                failures.push(format!("{} variance {variance}: {e}", kind.name()));
                rows.extend(cfg.p_values.iter().map(|&p| BenchRow {
                    case: kind.name().to_string(),
                    variance,
                    p,
                    accuracy: f64::NAN,
                    iters: 0,
                    seconds: 0.0,
                }));
            }
        }
    }
    write_bench_csv(&rows, out_dir.join("bench.csv"))?;
    write_json(&out_dir.join("bench_config.json"), cfg)?;
    Ok(BenchOutcome { rows, failures })
}

#[derive(Serialize)]
struct SpectrumOutput {
    size: (usize, usize),
    sigma: f64,
    min_eigenvalue: f64,
    all_positive: bool,
    lower_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
}

fn run_spectrum(args: &SpectrumArgs) -> Result<String> {
    let report = match args.m {
        Some(m) => circulant_spectrum_2d(m, args.n, args.sigma),
        None => circulant_spectrum_1d(args.n, args.sigma),
    }
    .map_err(|e| SegError::Config(e.to_string()))?;
    let out = SpectrumOutput {
        size: report.size,
        sigma: report.sigma,
        min_eigenvalue: report.min_eigenvalue,
        all_positive: report.all_positive,
        lower_bound: lemma_lower_bound(),
        eigenvalues: args.full.then_some(report.eigenvalues),
    };
    serde_json::to_string_pretty(&out).map_err(|e| SegError::Contract(e.to_string()))
}

fn run_phantom(args: &PhantomArgs) -> Result<()> {
    let phantom = make_phantom(args.kind, args.size, args.seed)?;
    let image = add_gaussian_noise(&phantom.image, args.variance, args.seed)?;
    create_dir(&args.output)?;
    save_image(&image, args.output.join("image.png"))?;
    save_labels(&phantom.truth, args.output.join("truth.png"))?;
    write_json(&args.output.join("phantom.json"), &phantom.description)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| SegError::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: &Command) -> Result<i32> {
    configure_threads()?;
    match command {
        Command::Segment(args) => {
            let cfg = resolve_run_config(args)?;
            let summary = run_segment(&cfg)?;
            log::info!("converged={} after {} iterations", summary.converged, summary.iterations);
            Ok(0)
        }
        Command::InitOnly(args) => {
            run_init_only(&resolve_run_config(args)?)?;
            Ok(0)
        }
        Command::Bench(args) => {
            let outcome = run_bench(&resolve_bench_config(args)?)?;
            for f in &outcome.failures {
                eprintln!("ictmseg: bench cell failed: {f}");
            }
            Ok(if outcome.failures.is_empty() { 0 } else { 1 })
        }
        Command::Spectrum(args) => {
            println!("{}", run_spectrum(args)?);
            Ok(0)
        }
        Command::Phantom(args) => {
            run_phantom(args)?;
            Ok(0)
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ictmseg: {e}");
            e.exit_code()
        }
    }
}
