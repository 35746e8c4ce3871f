//! Command-line front end: one binary, one subcommand per pipeline stage.
//!
//! Every command that writes artifacts also writes `manifest.json` next to
//! them, recording the resolved configuration, the digests of its inputs and
//! outputs, the master seed and the elapsed time.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    aggregate_runs, attack_rate_tables, curve_features, export_choropleth, estimate_r0, linear_fit, log_space,
    pairwise_synchrony_by_distance, scaled_thresholds, seeding_scan, synchrony_by_size, write_aggregate,
    write_attack_rates, write_choropleth, write_r0_curve, write_seeding_scan, write_synchrony, AttackRates,
    CurveFeatures, PeakMode, ScanSettings, DEFAULT_CHOROPLETH_DAYS,
};
use crate::census::{generate_fixture, parse_bundle, write_bundle, BundlePaths, CensusBundle, FixtureSpec};
use crate::disease::calibrate::{
    calibrate_infectious_duration, calibrate_rho, RhoSearch, SettingTargets, GENERATION_TIME_TARGET,
};
use crate::disease::DiseaseModel;
use crate::engine::{run, write_outputs, SeedSpec, SimConfig, SimOutput};
use crate::popgen::{build_population, Population};
use crate::rng::{Purpose, Stream};

/// Exit code for usage, validation and missing-input errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while computing.
pub const EXIT_RUNTIME: i32 = 1;

const SOURCE_FILE: &str = "source.json";
const OUTPUT_FILE: &str = "sim_output.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "epiforge", version, about = "Agent-based influenza epidemic simulator")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic census bundle.
    Fixture(FixtureArgs),
    /// Synthesise a population from a census bundle.
    Build(BuildArgs),
    /// Fit the infectious window and the contact scaling factor rho.
    Calibrate(CalibrateArgs),
    /// Run one or more epidemics.
    Simulate(SimulateArgs),
    /// Estimate R0 for a list of kappa values.
    R0(R0Args),
    /// Curve features, attack rates, synchrony and choropleth data from
    /// simulate output.
    Analyze(AnalyzeArgs),
    /// Synchrony over a grid of seeded SLA counts and seeding proportions.
    Scan(ScanArgs),
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub slas: u64,
    /// CDs per SLA.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub cds: u64,
    /// Residents per CD.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub pop: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory holding the seven census CSV files.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Threads {
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "EPIFORGE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Preset name or path to a disease_model.json.
    #[arg(long, default_value = crate::disease::PRESET_H1N1_2009)]
    pub disease_model: String,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Directory written by `build`.
    #[arg(long)]
    pub population: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Epidemics pooled to check the fitted rho.
    #[arg(long, default_value_t = 20)]
    pub epidemics: usize,
    /// Epidemics per bisection step.
    #[arg(long, default_value_t = 4)]
    pub epidemics_per_step: usize,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 180)]
    pub days: u32,
    /// Keep the model's infectious window instead of refitting it.
    #[arg(long)]
    pub keep_duration: bool,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// scenario.json; built-in defaults when absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub population: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's kappa.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Overrides the scenario's duration.
    #[arg(long)]
    pub days: Option<u32>,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct R0Args {
    #[arg(long)]
    pub population: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0, 4.0])]
    pub kappas: Vec<f64>,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PeakArg {
    Smoothed,
    Raw,
}

impl From<PeakArg> for PeakMode {
    fn from(p: PeakArg) -> Self {
        match p {
            PeakArg::Smoothed => PeakMode::Smoothed,
            PeakArg::Raw => PeakMode::Raw,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub population: PathBuf,
    /// Output directory of `simulate`.
    #[arg(long)]
    pub runs_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CHOROPLETH_DAYS)]
    pub choropleth_days: Vec<u32>,
    /// Run whose prevalence feeds the choropleth.
    #[arg(long, default_value_t = 0)]
    pub choropleth_run: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = PeakArg::Smoothed)]
    pub peak_mode: PeakArg,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub population: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Numbers of initially seeded SLAs; 0 stands for every SLA.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 0])]
    pub sla_counts: Vec<usize>,
    /// Number of log-spaced proportions between 1e-5 and 1.
    #[arg(long, default_value_t = 6)]
    pub proportions: usize,
    #[arg(long, default_value_t = 10)]
    pub runs_per_cell: usize,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long, default_value_t = 180)]
    pub days: u32,
    #[arg(long, value_enum, default_value_t = PeakArg::Smoothed)]
    pub peak_mode: PeakArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    pub outputs: Vec<FileDigest>,
}

/// Where a population directory came from; `load_population` rebuilds from
/// the bundle and checks the digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSource {
    pub bundle_dir: PathBuf,
    pub seed: u64,
    pub digest: String,
    pub agents: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Atomic write: a temporary sibling renamed into place.
fn write_atomic(path: &Path, text: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Collects what a command read and wrote, then writes the manifest.
struct Provenance {
    command: &'static str,
    arguments: Vec<String>,
    started: Instant,
    started_unix: u64,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Provenance {
    fn new(command: &'static str, arguments: Vec<String>) -> Self {
        Provenance {
            command,
            arguments,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            seed: None,
        }
    }

    fn finish(self, dir: &Path, config: serde_json::Value, outputs: &[PathBuf]) -> CliResult<RunManifest> {
        let inputs = self.inputs.iter().map(|p| file_digest(p)).collect::<CliResult<Vec<_>>>()?;
        let outputs = outputs
            .iter()
            .map(|p| file_digest(p).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}"))))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            arguments: self.arguments,
            config_digest: sha256_hex(config.to_string().as_bytes()),
            config,
            inputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_atomic(&dir.join(MANIFEST_FILE), &text)?;
        Ok(manifest)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)?;
    Ok(path.to_path_buf())
}

fn read_bundle(dir: &Path) -> CliResult<(CensusBundle, Vec<PathBuf>)> {
    let paths = BundlePaths::in_dir(dir);
    let files: Vec<PathBuf> = paths.all().iter().map(|p| (*p).clone()).collect();
    for f in &files {
        if !f.is_file() {
            return Err(usage(format!("missing bundle file {}", f.display())));
        }
    }
    let bundle = parse_bundle(&paths).map_err(usage)?;
    Ok((bundle, files))
}

/// A population directory reloaded for a command.
pub struct LoadedPopulation {
    pub bundle: CensusBundle,
    pub population: Population,
    pub inputs: Vec<PathBuf>,
}

pub fn load_population(dir: &Path) -> CliResult<LoadedPopulation> {
    let source_path = dir.join(SOURCE_FILE);
    let text = fs::read_to_string(&source_path)
        .map_err(|e| usage(format!("--population {}: {e}", source_path.display())))?;
    let source: PopulationSource =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", source_path.display())))?;
    let (bundle, mut inputs) = read_bundle(&source.bundle_dir)?;
    let population = build_population(&bundle, source.seed)
        .context("rebuilding population")
        .map_err(CliError::Runtime)?;
    let digest = population.digest();
    if digest != source.digest {
        return Err(usage(format!(
            "{}: population digest {} does not match the rebuilt population {}",
            source_path.display(),
            source.digest,
            digest
        )));
    }
    inputs.insert(0, source_path);
    Ok(LoadedPopulation {
        bundle,
        population,
        inputs,
    })
}

fn load_model(spec: &str, prov: &mut Provenance) -> CliResult<DiseaseModel> {
    let model = DiseaseModel::resolve(spec).map_err(|e| usage(format!("--disease-model: {e}")))?;
    let path = Path::new(spec);
    if path.is_file() {
        prov.inputs.push(path.to_path_buf());
    }
    Ok(model)
}

fn list_files(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).filter(|p| p.is_file()).collect()
}

/// Runs `f` on a rayon pool capped at `threads` (0 or absent: every core).
fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("building thread pool")
        .map_err(CliError::Runtime)?;
    pool.install(f)
}

pub fn cmd_fixture(args: &FixtureArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("fixture", arguments);
    prov.seed = Some(args.seed);
    let spec = FixtureSpec {
        n_slas: args.slas as usize,
        n_cds_per_sla: args.cds as usize,
        population_per_cd: args.pop,
        seed: args.seed,
    };
    let bundle = generate_fixture(spec).map_err(usage)?;
    create_dir(&args.out)?;
    let paths = write_bundle(&bundle, &args.out)
        .context("writing bundle")
        .map_err(CliError::Runtime)?;
    let outputs: Vec<PathBuf> = paths.all().iter().map(|p| (*p).clone()).collect();
    log::info!("fixture: {} residents in {}", bundle.population(), args.out.display());
    prov.finish(&args.out, serde_json::to_value(spec).expect("json"), &outputs)
}

pub fn cmd_build(args: &BuildArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("build", arguments);
    prov.seed = Some(args.seed);
    let (bundle, inputs) = read_bundle(&args.bundle)?;
    prov.inputs = inputs;
    let population = build_population(&bundle, args.seed)
        .context("building population")
        .map_err(CliError::Runtime)?;
    let csvset = args.out.join("population.csvset");
    population
        .export_csvset(&csvset)
        .context("exporting population")
        .map_err(CliError::Runtime)?;
    let bundle_dir = fs::canonicalize(&args.bundle).unwrap_or_else(|_| args.bundle.clone());
    let source = PopulationSource {
        bundle_dir,
        seed: args.seed,
        digest: population.digest(),
        agents: population.len(),
    };
    let mut outputs = vec![write_json(&args.out.join(SOURCE_FILE), &source)?];
    outputs.extend(list_files(&csvset, &["agents.csv", "groups.csv", "members.csv", "synthesis_report.json"]));
    log::info!("build: {} agents, {} groups", population.len(), population.groups.len());
    let config = serde_json::json!({"seed": args.seed, "bundle_dir": source.bundle_dir});
    prov.finish(&args.out, config, &outputs)
}

#[derive(Serialize)]
struct CalibrationReport {
    duration: Option<crate::disease::calibrate::DurationFit>,
    rho: crate::disease::calibrate::RhoFit,
    targets: SettingTargets,
}

pub fn cmd_calibrate(args: &CalibrateArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("calibrate", arguments);
    prov.seed = Some(args.seed);
    let loaded = load_population(&args.population)?;
    prov.inputs.extend(loaded.inputs.iter().cloned());
    let mut model = load_model(&args.model.disease_model, &mut prov)?;
    let search = RhoSearch {
        iterations: args.iterations,
        epidemics_per_iteration: args.epidemics_per_step,
        verification_epidemics: args.epidemics,
        days: args.days,
        threads: args.threads.threads.unwrap_or(0),
        ..RhoSearch::default()
    };
    let targets = SettingTargets::default();
    let duration = if args.keep_duration {
        None
    } else {
        let mut rng = Stream::new(args.seed, 0, 0, Purpose::Calibration);
        let fit = calibrate_infectious_duration(&model.natural_history, GENERATION_TIME_TARGET, &mut rng);
        model.natural_history.infectious_days = fit.infectious_days;
        Some(fit)
    };
    let fit = calibrate_rho(&loaded.population, &model, &targets, &search, args.seed)
        .context("calibrating rho")
        .map_err(CliError::Runtime)?;
    if !fit.converged {
        log::warn!("rho fit misses the setting targets: {:?}", fit.fractions);
    }
    let model = model.with_rho(fit.rho);
    create_dir(&args.out_dir)?;
    let model_path = args.out_dir.join("disease_model.json");
    model
        .save(&model_path)
        .context("saving model")
        .map_err(CliError::Runtime)?;
    let report = CalibrationReport {
        duration,
        rho: fit,
        targets,
    };
    let outputs = vec![model_path, write_json(&args.out_dir.join("calibration.json"), &report)?];
    let config = serde_json::json!({
        "seed": args.seed,
        "search": search,
        "keep_duration": args.keep_duration,
        "disease_model": args.model.disease_model,
    });
    prov.finish(&args.out_dir, config, &outputs)
}

/// Scenario with command-line overrides applied and an empty airport list
/// filled from the bundle.
pub fn resolve_scenario(args: &SimulateArgs, bundle: &CensusBundle) -> CliResult<SimConfig> {
    let mut config = match &args.scenario {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("--scenario {}: no such file", p.display())));
            }
            SimConfig::load(p).map_err(usage)?
        }
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(k) = args.kappa {
        config.kappa = k;
    }
    if let Some(d) = args.days {
        config.duration_days = d;
    }
    if let Some(t) = args.threads.threads {
        config.threads = t;
    }
    if let SeedSpec::Airports { airports, .. } = &mut config.seeding {
        if airports.is_empty() {
            *airports = bundle.airports.rows.clone();
        }
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

pub fn cmd_simulate(args: &SimulateArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("simulate", arguments);
    let loaded = load_population(&args.population)?;
    prov.inputs.extend(loaded.inputs.iter().cloned());
    if let Some(p) = &args.scenario {
        prov.inputs.push(p.clone());
    }
    let model = load_model(&args.model.disease_model, &mut prov)?;
    let config = resolve_scenario(args, &loaded.bundle)?;
    prov.seed = Some(config.seed);
    let pop = &loaded.population;
    create_dir(&args.out_dir)?;
    let mut outputs = Vec::new();
    let mut runs = Vec::with_capacity(args.runs as usize);
    for r in 0..args.runs {
        let c = SimConfig {
            seed: config.seed.wrapping_add(r),
            ..config.clone()
        };
        let out = run(pop, &model, &c)
            .with_context(|| format!("run {r}"))
            .map_err(CliError::Runtime)?;
        let dir = if args.runs == 1 {
            args.out_dir.clone()
        } else {
            args.out_dir.join(format!("run_{r:03}"))
        };
        let names = write_outputs(&out, pop, &dir)
            .context("writing outputs")
            .map_err(CliError::Runtime)?;
        outputs.extend(names.iter().map(|n| dir.join(n)));
        outputs.push(write_json(&dir.join(OUTPUT_FILE), &out)?);
        log::info!(
            "run {r}: seed {} cumulative ill {} peak incidence {}",
            c.seed,
            out.cumulative_ill(),
            out.national.iter().map(|d| d.incidence).max().unwrap_or(0)
        );
        runs.push(out);
    }
    if args.runs > 1 {
        let path = args.out_dir.join("aggregate.csv");
        write_aggregate(&aggregate_runs(&runs), &path)
            .context("writing aggregate")
            .map_err(CliError::Runtime)?;
        outputs.push(path);
    }
    let value = serde_json::json!({
        "scenario": config,
        "runs": args.runs,
        "disease_model": model,
    });
    prov.finish(&args.out_dir, value, &outputs)
}

#[derive(Serialize)]
struct R0Report {
    estimates: Vec<crate::analysis::R0Estimate>,
    fit: Option<crate::analysis::LinearFit>,
}

pub fn cmd_r0(args: &R0Args, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("r0", arguments);
    prov.seed = Some(args.seed);
    if let Some(k) = args.kappas.iter().find(|k| !(**k >= 0.0) || !k.is_finite()) {
        return Err(usage(format!("--kappas: {k} is not a non-negative number")));
    }
    let loaded = load_population(&args.population)?;
    prov.inputs.extend(loaded.inputs.iter().cloned());
    let model = load_model(&args.model.disease_model, &mut prov)?;
    let pop = &loaded.population;
    let estimates = with_threads(args.threads.threads, || {
        Ok(args
            .kappas
            .iter()
            .map(|&k| {
                let e = estimate_r0(pop, &model, k, args.samples as usize, args.seed);
                log::info!("kappa {k}: R0 {:.3} ± {:.3}", e.r0, e.stderr);
                e
            })
            .collect::<Vec<_>>())
    })?;
    let fit = (estimates.len() >= 2).then(|| {
        let xs: Vec<f64> = estimates.iter().map(|e| e.kappa).collect();
        let ys: Vec<f64> = estimates.iter().map(|e| e.r0).collect();
        linear_fit(&xs, &ys)
    });
    create_dir(&args.out_dir)?;
    let curve = args.out_dir.join("r0_curve.csv");
    write_r0_curve(&estimates, &curve)
        .context("writing r0 curve")
        .map_err(CliError::Runtime)?;
    let report = write_json(&args.out_dir.join("r0_fit.json"), &R0Report { estimates, fit })?;
    let config = serde_json::json!({
        "kappas": args.kappas,
        "samples": args.samples,
        "seed": args.seed,
        "disease_model": model,
    });
    prov.finish(&args.out_dir, config, &[curve, report])
}

/// `sim_output.json` files under a simulate output directory, in run order.
pub fn find_run_outputs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let single = dir.join(OUTPUT_FILE);
    if single.is_file() {
        return Ok(vec![single]);
    }
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("--runs-dir {}: {e}", dir.display())))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run_")))
        .map(|p| p.join(OUTPUT_FILE))
        .filter(|p| p.is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(usage(format!("--runs-dir {}: no simulate output found", dir.display())));
    }
    Ok(runs)
}

#[derive(Serialize)]
struct CurveReport {
    runs: Vec<CurveFeatures>,
    mean_peak_day: Option<f64>,
    mean_peak_incidence: f64,
    mean_cumulative_ill: f64,
}

fn mean_attack_rates(all: &[AttackRates]) -> AttackRates {
    let n = all.len().max(1) as f64;
    let mut m = AttackRates {
        national: [0.0; 5],
        community: [0.0; 5],
        national_overall: 0.0,
        community_overall: 0.0,
    };
    for r in all {
        for b in 0..5 {
            m.national[b] += r.national[b] / n;
            m.community[b] += r.community[b] / n;
        }
        m.national_overall += r.national_overall / n;
        m.community_overall += r.community_overall / n;
    }
    m
}

pub fn cmd_analyze(args: &AnalyzeArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("analyze", arguments);
    let loaded = load_population(&args.population)?;
    prov.inputs.extend(loaded.inputs.iter().cloned());
    let pop = &loaded.population;
    let files = find_run_outputs(&args.runs_dir)?;
    let mut outputs_in = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| usage(format!("{}: {e}", f.display())))?;
        let out: SimOutput = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", f.display())))?;
        if out.ill_by_sla_band.len() != pop.regions.slas.len() {
            return Err(usage(format!("{}: output does not match the population", f.display())));
        }
        outputs_in.push(out);
    }
    prov.inputs.extend(files.iter().cloned());
    prov.seed = outputs_in.first().map(|o| o.seed);
    let chosen = outputs_in
        .get(args.choropleth_run)
        .ok_or_else(|| usage(format!("--choropleth-run {} but only {} runs", args.choropleth_run, outputs_in.len())))?;
    if let Some(d) = args.choropleth_days.iter().find(|&&d| d >= chosen.days) {
        return Err(usage(format!(
            "--choropleth-days: day {d} outside the simulated {} days",
            chosen.days
        )));
    }
    let mode: PeakMode = args.peak_mode.into();
    let (thresholds, prev_threshold) = scaled_thresholds(pop.len());
    create_dir(&args.out_dir)?;
    let mut written = Vec::new();

    let features: Vec<CurveFeatures> = outputs_in
        .iter()
        .map(|o| curve_features(o, &thresholds, prev_threshold, mode))
        .collect();
    let n = features.len() as f64;
    let peaks: Vec<f64> = features.iter().filter_map(|f| f.peak_day).map(f64::from).collect();
    let report = CurveReport {
        mean_peak_day: (!peaks.is_empty()).then(|| peaks.iter().sum::<f64>() / peaks.len() as f64),
        mean_peak_incidence: features.iter().map(|f| f.peak_incidence as f64).sum::<f64>() / n,
        mean_cumulative_ill: features.iter().map(|f| f.cumulative_ill as f64).sum::<f64>() / n,
        runs: features,
    };
    written.push(write_json(&args.out_dir.join("curve_features.json"), &report)?);

    let rates: Vec<AttackRates> = outputs_in.iter().map(|o| attack_rate_tables(o, pop)).collect();
    let path = args.out_dir.join("attack_rates.csv");
    write_attack_rates(&mean_attack_rates(&rates), &path)
        .context("writing attack rates")
        .map_err(CliError::Runtime)?;
    written.push(path);

    let sizes: Vec<usize> = pop.sla_agents.iter().map(|v| v.len()).collect();
    let ids: Vec<String> = pop.regions.slas.iter().map(|s| s.id.clone()).collect();
    let by_size = synchrony_by_size(&outputs_in, &sizes, &ids, args.bins, mode).map_err(usage)?;
    let path = args.out_dir.join("synchrony_size.csv");
    write_synchrony(&by_size, &path)
        .context("writing synchrony")
        .map_err(CliError::Runtime)?;
    written.push(path);
    let by_distance = pairwise_synchrony_by_distance(&outputs_in, &pop.regions, args.bins, mode).map_err(usage)?;
    let path = args.out_dir.join("synchrony_distance.csv");
    write_synchrony(&by_distance, &path)
        .context("writing synchrony")
        .map_err(CliError::Runtime)?;
    written.push(path);

    let rows = export_choropleth(chosen, pop, &args.choropleth_days).map_err(usage)?;
    write_choropleth(&rows, &args.out_dir)
        .context("writing choropleth")
        .map_err(CliError::Runtime)?;
    written.push(args.out_dir.join("choropleth.csv"));
    written.push(args.out_dir.join("choropleth_meta.json"));

    let config = serde_json::json!({
        "runs": files.len(),
        "choropleth_days": args.choropleth_days,
        "choropleth_run": args.choropleth_run,
        "bins": args.bins,
        "peak_mode": format!("{:?}", mode),
    });
    prov.finish(&args.out_dir, config, &written)
}

pub fn cmd_scan(args: &ScanArgs, arguments: Vec<String>) -> CliResult<RunManifest> {
    let mut prov = Provenance::new("scan", arguments);
    prov.seed = Some(args.seed);
    if args.proportions == 0 || args.sla_counts.is_empty() {
        return Err(usage("--proportions and --sla-counts must be non-empty"));
    }
    let loaded = load_population(&args.population)?;
    prov.inputs.extend(loaded.inputs.iter().cloned());
    let model = load_model(&args.model.disease_model, &mut prov)?;
    let pop = &loaded.population;
    let n_sla = pop.regions.slas.len();
    let counts: Vec<usize> = args
        .sla_counts
        .iter()
        .map(|&c| if c == 0 { n_sla } else { c.min(n_sla) })
        .collect();
    let proportions = log_space(1e-5, 1.0, args.proportions);
    let settings = ScanSettings {
        duration_days: args.days,
        kappa: args.kappa.unwrap_or(model.kappa()),
        runs_per_cell: args.runs_per_cell,
        peak_mode: args.peak_mode.into(),
        ..ScanSettings::default()
    };
    let cells = with_threads(args.threads.threads, || {
        seeding_scan(pop, &model, &counts, &proportions, &settings, args.seed)
            .context("seeding scan")
            .map_err(CliError::Runtime)
    })?;
    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("seeding_scan.csv");
    write_seeding_scan(&cells, &path)
        .context("writing scan")
        .map_err(CliError::Runtime)?;
    let config = serde_json::json!({
        "sla_counts": counts,
        "proportions": proportions,
        "settings": settings,
        "seed": args.seed,
        "disease_model": model,
    });
    prov.finish(&args.out_dir, config, &[path])
}

fn dispatch(cli: &Cli, arguments: Vec<String>) -> CliResult<RunManifest> {
    match &cli.command {
        Command::Fixture(a) => cmd_fixture(a, arguments),
        Command::Build(a) => cmd_build(a, arguments),
        Command::Calibrate(a) => cmd_calibrate(a, arguments),
        Command::Simulate(a) => cmd_simulate(a, arguments),
        Command::R0(a) => cmd_r0(a, arguments),
        Command::Analyze(a) => cmd_analyze(a, arguments),
        Command::Scan(a) => cmd_scan(a, arguments),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let arguments: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, arguments) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
