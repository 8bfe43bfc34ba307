//! `relaxo`: simulate, fit and map spin relaxometry data.

mod config;
mod units;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use relaxo::curve::DecayCurve;
use relaxo::fit::{normalize_curve, LmOptions, ModelKind};
use relaxo::particles::{analyze_particles, detect_particles, ParticleList, ParticleRef};
use relaxo::pipeline::{characterize_eta, fit_rate_map, fit_rate_map_stretched, PipelineConfig};
use relaxo::render::{render_map, RangePolicy};
use relaxo::sim::{simulate_curve, simulate_ensemble_curve, simulate_widefield};
use relaxo::{load_stack, ScalarMap};

use config::{SimConfig, SCHEMA_VERSION};

const EXIT_USAGE: u8 = 2;
const EXIT_ANALYTIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] relaxo::Error),
    #[error("{0}")]
    Analytic(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Analytic(_) => EXIT_ANALYTIC,
            CliError::Core(e) => match e {
                relaxo::Error::EmptyMap | relaxo::Error::ZeroDenominator => EXIT_ANALYTIC,
                _ => EXIT_USAGE,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "relaxo", version, about = "Two-state spin relaxometry toolkit")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic curve, ensemble curve or widefield scene from a JSON config.
    Simulate {
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a decay model to a curve CSV.
    Fit(FitArgs),
    /// Per-pixel η map from a reference stack with Γ₁ held fixed.
    Characterize {
        manifest: PathBuf,
        /// Assumed relaxation rate of the reference sample (s⁻¹, or with Hz/kHz suffix).
        #[arg(long, default_value = "180", value_parser = units::parse_rate)]
        gamma1: f64,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Per-pixel Γ₁ map, two-state with a characterized η map or stretched exponential.
    Map {
        manifest: PathBuf,
        /// η map sidecar from `characterize`.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        eta: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<MapModel>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// ROI and background statistics over a rate map.
    Particles {
        map: PathBuf,
        /// Particle list JSON. Without it (and without --detect) only the background is reported.
        #[arg(long, conflicts_with = "detect")]
        particles: Option<PathBuf>,
        /// Detect particles as pixels this many robust SDs above the median.
        #[arg(long)]
        detect: Option<f64>,
        #[arg(long, default_value_t = 5)]
        roi_half_size: usize,
        /// Intrinsic rate subtracted from particle means (s⁻¹ or with unit).
        #[arg(long, value_parser = units::parse_rate)]
        intrinsic: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a map as a 16-bit PGM with a JSON sidecar.
    Render {
        map: PathBuf,
        /// Lower display percentile.
        #[arg(long, default_value_t = 1.0)]
        lo: f64,
        /// Upper display percentile.
        #[arg(long, default_value_t = 99.0)]
        hi: f64,
        /// Explicit lower display value; overrides --lo.
        #[arg(long)]
        lo_value: Option<f64>,
        /// Explicit upper display value; overrides --hi.
        #[arg(long)]
        hi_value: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MapModel {
    Stretched,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitModel {
    Single,
    Stretched,
    TwoState,
}

impl From<FitModel> for ModelKind {
    fn from(m: FitModel) -> Self {
        match m {
            FitModel::Single => ModelKind::Single,
            FitModel::Stretched => ModelKind::Stretched,
            FitModel::TwoState => ModelKind::TwoState,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    curve: PathBuf,
    #[arg(long, value_enum)]
    model: FitModel,
    /// Hold a parameter fixed, e.g. `--fix eta=0.36` or `--fix gamma1=0.5kHz`. Repeatable.
    #[arg(long = "fix", value_name = "NAME=VALUE", value_parser = parse_fix)]
    fixes: Vec<(String, f64)>,
    /// Fit the signal column as given instead of normalizing raw counts.
    #[arg(long)]
    no_normalize: bool,
    /// Write the fit result JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a one-row CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Minimum first-dark-time contrast in shot-noise standard deviations.
    #[arg(long)]
    snr: Option<f64>,
    /// Sum k×k pixel blocks before fitting.
    #[arg(long)]
    binning: Option<usize>,
    #[arg(long, env = "RELAXO_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_fix(text: &str) -> Result<(String, f64), String> {
    let (name, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got {text:?}"))?;
    let name = name.trim().to_string();
    let value = if name == "gamma1" {
        units::parse_rate(value)?
    } else {
        value.trim().parse().map_err(|_| format!("cannot read {value:?} as a number"))?
    };
    Ok((name, value))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::SUCCESS
        }
        Err((e, summary)) => {
            if let Some(s) = summary {
                print_summary(&s);
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_summary(summary: &Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(summary).unwrap_or_default();
    // a closed pipe on stdout is not an error for the run itself
    let _ = writeln!(std::io::stdout(), "{text}");
}

/// A failure, optionally with the summary of partial output already written.
type RunError = (CliError, Option<Value>);

fn run(command: Command) -> Result<Value, RunError> {
    let plain = |e: CliError| (e, None);
    match command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out).map_err(plain),
        Command::Fit(args) => cmd_fit(&args),
        Command::Characterize {
            manifest,
            gamma1,
            pipeline,
        } => cmd_characterize(&manifest, gamma1, &pipeline),
        Command::Map {
            manifest,
            eta,
            model,
            pipeline,
        } => cmd_map(&manifest, eta.as_deref(), model, &pipeline),
        Command::Particles {
            map,
            particles,
            detect,
            roi_half_size,
            intrinsic,
            out,
        } => cmd_particles(&map, particles.as_deref(), detect, roi_half_size, intrinsic, &out).map_err(plain),
        Command::Render {
            map,
            lo,
            hi,
            lo_value,
            hi_value,
            out,
        } => {
            let policy = RangePolicy {
                lo_percentile: lo,
                hi_percentile: hi,
                lo: lo_value,
                hi: hi_value,
            };
            cmd_render(&map, &policy, &out).map_err(plain)
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_simulate(config_path: &Path, out: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", config_path.display())))?;
    let config: SimConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", config_path.display())))?;
    if config.version() != SCHEMA_VERSION {
        return Err(CliError::Usage(format!(
            "{}: unsupported version {} (expected {SCHEMA_VERSION})",
            config_path.display(),
            config.version()
        )));
    }
    create_dir(out)?;
    let bad = |e: String| CliError::Usage(format!("{}: {e}", config_path.display()));
    match config {
        SimConfig::Curve(c) => {
            let cfg = c.to_config().map_err(bad)?;
            let curve = simulate_curve(&cfg)?;
            let path = out.join("curve.csv");
            curve.write_csv(&path)?;
            Ok(json!({
                "kind": "curve",
                "seed": cfg.seed,
                "points": curve.len(),
                "outputs": [path_str(&path)],
            }))
        }
        SimConfig::Ensemble(e) => {
            let cfg = e.curve.to_config().map_err(bad)?;
            let result = simulate_ensemble_curve(&cfg, &e.spec())?;
            let path = out.join("curve.csv");
            result.curve.write_csv(&path)?;
            Ok(json!({
                "kind": "ensemble",
                "seed": cfg.seed,
                "points": result.curve.len(),
                "members": result.member_rates.len(),
                "member_mean_rate": result.mean_rate(),
                "outputs": [path_str(&path)],
            }))
        }
        SimConfig::Scene(s) => {
            let scene = s.to_config().map_err(bad)?;
            let sim = simulate_widefield(&scene)?;
            let manifest = sim.stack.write(out)?;
            let eta = sim.eta_truth.write(out, "truth_eta")?;
            let gamma = sim.gamma1_truth.write(out, "truth_gamma1")?;
            let list = ParticleList {
                roi_half_size: scene
                    .particles
                    .iter()
                    .map(|p| p.radius.round() as usize)
                    .min()
                    .unwrap_or(5)
                    .max(1),
                particles: scene
                    .particles
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ParticleRef {
                        id: format!("p{}", i + 1),
                        x: p.x.round() as i64,
                        y: p.y.round() as i64,
                    })
                    .collect(),
            };
            let plist = out.join("particles.json");
            let text = serde_json::to_string_pretty(&list).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&plist, text + "\n")
                .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", plist.display())))?;
            Ok(json!({
                "kind": "scene",
                "seed": scene.seed,
                "width": scene.width,
                "height": scene.height,
                "taus": scene.tau_grid.len(),
                "particles": scene.particles.len(),
                "outputs": [path_str(&manifest), path_str(&eta), path_str(&gamma), path_str(&plist)],
            }))
        }
    }
}

fn cmd_fit(args: &FitArgs) -> Result<Value, RunError> {
    let plain = |e: CliError| (e, None);
    let raw = DecayCurve::read_csv(&args.curve).map_err(|e| plain(e.into()))?;
    let curve = if args.no_normalize {
        raw
    } else {
        normalize_curve(&raw).map_err(|e| plain(e.into()))?
    };
    let model: ModelKind = args.model.into();
    let fit = model
        .fit_with_fixes(&curve, &args.fixes, &LmOptions::default())
        .map_err(|e| match e {
            relaxo::Error::Precondition(m) => plain(CliError::Usage(m)),
            other => plain(other.into()),
        })?;
    let result = serde_json::to_value(&fit).map_err(|e| plain(CliError::Usage(e.to_string())))?;
    if let Some(path) = &args.csv {
        let text = format!("{}\n{}\n", fit.csv_header(), fit.csv_row());
        std::fs::write(path, text)
            .map_err(|e| plain(CliError::Usage(format!("cannot write {}: {e}", path.display()))))?;
    }
    let summary = match &args.out {
        Some(path) => {
            let text = serde_json::to_string_pretty(&result).unwrap_or_default() + "\n";
            std::fs::write(path, text)
                .map_err(|e| plain(CliError::Usage(format!("cannot write {}: {e}", path.display()))))?;
            json!({"model": fit.model, "converged": fit.converged, "outputs": [path_str(path)]})
        }
        None => result,
    };
    if fit.converged {
        Ok(summary)
    } else {
        Err((
            CliError::Analytic(format!("fit did not converge ({:?})", fit.termination)),
            Some(summary),
        ))
    }
}

fn pipeline_config(args: &PipelineArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.snr {
        cfg.snr_threshold = s;
    }
    if let Some(b) = args.binning {
        cfg.binning = b;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Summary for written maps; a map with no valid pixel becomes an analytic failure.
fn map_outcome(kind: &str, written: Vec<(PathBuf, &ScalarMap)>) -> Result<Value, RunError> {
    let first = written[0].1;
    let summary = json!({
        "kind": kind,
        "width": first.width,
        "height": first.height,
        "valid_pixels": first.n_valid(),
        "outputs": written.iter().map(|(p, _)| path_str(p)).collect::<Vec<_>>(),
    });
    if first.n_valid() == 0 {
        Err((CliError::Analytic("no pixel produced a valid fit".into()), Some(summary)))
    } else {
        Ok(summary)
    }
}

fn cmd_characterize(manifest: &Path, gamma1: f64, args: &PipelineArgs) -> Result<Value, RunError> {
    let plain = |e: CliError| (e, None);
    let mut cfg = pipeline_config(args).map_err(plain)?;
    cfg.fixed_gamma1 = gamma1;
    cfg.validate().map_err(|e| plain(e.into()))?;
    let stack = load_stack(manifest, 1).map_err(|e| plain(e.into()))?;
    let eta = characterize_eta(&stack, &cfg).map_err(|e| plain(e.into()))?;
    let path = eta.write(&args.out, "eta").map_err(|e| plain(e.into()))?;
    map_outcome("eta", vec![(path, &eta)])
}

fn cmd_map(manifest: &Path, eta: Option<&Path>, model: Option<MapModel>, args: &PipelineArgs) -> Result<Value, RunError> {
    let plain = |e: CliError| (e, None);
    let core = |e: relaxo::Error| (CliError::Core(e), None);
    let cfg = pipeline_config(args).map_err(plain)?;
    let stack = load_stack(manifest, 1).map_err(core)?;
    match (eta, model) {
        (Some(eta_path), None) => {
            let eta_map = ScalarMap::read(eta_path).map_err(core)?;
            let maps = fit_rate_map(&stack, &eta_map, &cfg).map_err(core)?;
            let out = &args.out;
            let written = vec![
                (maps.gamma1.write(out, "gamma1").map_err(core)?, &maps.gamma1),
                (maps.amplitude.write(out, "amplitude").map_err(core)?, &maps.amplitude),
                (maps.offset.write(out, "offset").map_err(core)?, &maps.offset),
                (maps.reduced_chi2.write(out, "chi2").map_err(core)?, &maps.reduced_chi2),
            ];
            map_outcome("two-state", written)
        }
        (None, Some(MapModel::Stretched)) => {
            let maps = fit_rate_map_stretched(&stack, &cfg).map_err(core)?;
            let out = &args.out;
            let written = vec![
                (maps.gamma1.write(out, "gamma1_stretched").map_err(core)?, &maps.gamma1),
                (maps.stretch.write(out, "stretch").map_err(core)?, &maps.stretch),
                (maps.reduced_chi2.write(out, "chi2_stretched").map_err(core)?, &maps.reduced_chi2),
            ];
            map_outcome("stretched", written)
        }
        _ => Err(plain(CliError::Usage("give exactly one of --eta or --model stretched".into()))),
    }
}

fn cmd_particles(
    map_path: &Path,
    particles: Option<&Path>,
    detect: Option<f64>,
    roi_half_size: usize,
    intrinsic: Option<f64>,
    out: &Path,
) -> CliResult<Value> {
    let map = ScalarMap::read(map_path)?;
    let list = match (particles, detect) {
        (Some(p), _) => ParticleList::read(p)?,
        (None, Some(n_sd)) => detect_particles(&map, n_sd, roi_half_size)?,
        (None, None) => ParticleList {
            roi_half_size,
            particles: Vec::new(),
        },
    };
    let report = analyze_particles(&map, &list, intrinsic).map_err(|e| match e {
        relaxo::Error::Precondition(m) | relaxo::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    create_dir(out)?;
    let json_path = out.join("report.json");
    let csv_path = out.join("particles.csv");
    let hist_path = out.join("histogram.csv");
    report.write_json(&json_path)?;
    report.write_particles_csv(&csv_path)?;
    report.write_histogram_csv(&hist_path)?;
    Ok(json!({
        "particles": report.particles.len(),
        "background": report.background,
        "outputs": [path_str(&json_path), path_str(&csv_path), path_str(&hist_path)],
    }))
}

fn cmd_render(map_path: &Path, policy: &RangePolicy, out: &Path) -> CliResult<Value> {
    let map = ScalarMap::read(map_path)?;
    let image = render_map(&map, policy)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    image.write(out)?;
    Ok(json!({
        "lo": image.info.lo,
        "hi": image.info.hi,
        "outputs": [path_str(out), format!("{}.json", out.display())],
    }))
}
