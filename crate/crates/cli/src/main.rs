use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tactoform_core::policy::{ManualPlan, PolicyRegistry};
use tactoform_core::prior::{fit_prior, read_prior, write_prior, ShapePrior};
use tactoform_core::shapes::{generate_corpus, Family, ShapeCorpusSpec};
use tactoform_core::sim::{
    run_policy_episode, run_suite, EpisodeOptions, Scene, SceneConfig, SensorConfig, SuiteConfig, SuiteResult,
    SuiteRow, CALIBRATION_PRESSES, CALIBRATION_RADIUS_MM, CALIBRATION_SEED,
};
use tactoform_core::tactile::{SensorSpec, TactileSensor};
use tactoform_core::voxel::{decode_grid, encode_grid};
use tactoform_service::AppState;

const SEED_ENV: &str = "TACTOFORM_SEED";

#[derive(Debug, Parser)]
#[command(name = "tactoform", version, about = "Visuo-tactile voxel shape reconstruction with active touch")]
struct Cli {
    /// Worker threads for parallel work (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Voxelize a procedural shape corpus into a directory of VXG1 files.
    GenCorpus(GenCorpusArgs),
    /// Fit a linear eigenshape prior to a corpus and write it as SPR1.
    TrainPrior(TrainPriorArgs),
    /// Calibrate the simulated sensor's reflectance lookup table.
    Calibrate(CalibrateArgs),
    /// Run one touch episode on a scene.
    Run(RunArgs),
    /// Run every scene, policy and seed of a suite config.
    Suite(SuiteArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
    /// Chamfer distance between a predicted grid and a scene's ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    /// Corpus spec JSON (resolution, seed, per-family counts).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory; gets one .vxg per shape and index.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainPriorArgs {
    /// Corpus spec JSON.
    #[arg(long)]
    corpus: PathBuf,
    /// Latent dimension D.
    #[arg(long, default_value_t = 200)]
    dim: usize,
    /// Keep only these families, comma separated (box, cylinder, sphere, bottle, cone).
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Sensor config JSON; the default sensor when omitted.
    #[arg(long)]
    sensor: Option<PathBuf>,
    #[arg(long, default_value_t = CALIBRATION_PRESSES)]
    presses: usize,
    /// Calibration ball radius, mm.
    #[arg(long, default_value_t = CALIBRATION_RADIUS_MM)]
    radius: f64,
    #[arg(long, default_value_t = CALIBRATION_SEED)]
    seed: u64,
    /// Lookup table output (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EpisodeFlags {
    /// Record per-step wall time in the ms column.
    #[arg(long)]
    timing: bool,
    /// Optimizer overrides as JSON (same fields as the suite's options).
    #[arg(long)]
    options: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scene config JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Prior file (SPR1).
    #[arg(long)]
    prior: PathBuf,
    #[arg(long, default_value = "active")]
    policy: String,
    #[arg(long, default_value_t = 10)]
    touches: usize,
    /// Run seed (random policy draws and depth noise).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Touch script for the human policy: JSON array of {center, yaw_deg, pitch_deg}.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Per-touch CD table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Constraint log with the executed plans.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Final prediction grid (VXG1).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    /// Suite config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Prior file; trained from the config's prior section when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Per-touch CD table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Mean and median over seeds (CSV).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Prior to offer, as ID=PATH or PATH (ID is the file stem). Repeatable.
    #[arg(long = "prior", required = true)]
    priors: Vec<String>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, default_value_t = 7333)]
    port: u16,
    #[arg(long)]
    options: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Scene config JSON providing the ground truth.
    #[arg(long)]
    scene: PathBuf,
    /// Predicted grid (VXG1) at the scene's resolution.
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Debug)]
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::TrainPrior(a) => train_prior(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Run(a) => run(a),
        Command::Suite(a) => suite(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn corpus_spec(path: &Path) -> Result<ShapeCorpusSpec, Failure> {
    let mut spec: ShapeCorpusSpec = read_json(path)?;
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    Ok(spec)
}

fn episode_options(flags: &EpisodeFlags) -> Result<EpisodeOptions, Failure> {
    let mut options = match &flags.options {
        Some(p) => read_json(p)?,
        None => EpisodeOptions::default(),
    };
    options.timing |= flags.timing;
    Ok(options)
}

fn gen_corpus(a: GenCorpusArgs) -> Outcome {
    let spec = corpus_spec(&a.corpus)?;
    let shapes = generate_corpus(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure(format!("{}: {e}", a.out.display())))?;
    let mut index = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        let name = format!("shape_{i:04}.vxg");
        write_file(&a.out.join(&name), encode_grid(&s.grid))?;
        index.push(serde_json::json!({ "file": name, "params": s.params }));
    }
    let refs: Vec<_> = shapes.iter().map(|s| &s.grid).collect();
    let doc = serde_json::json!({
        "spec": spec,
        "hash": tactoform_core::prior::corpus_hash(&refs),
        "shapes": index,
    });
    write_file(&a.out.join("index.json"), serde_json::to_string_pretty(&doc)?)?;
    eprintln!("wrote {} shapes to {}", shapes.len(), a.out.display());
    Ok(())
}

fn parse_families(names: &[String]) -> Result<Vec<Family>, Failure> {
    names
        .iter()
        .map(|n| Family::parse(n.trim()).ok_or_else(|| Failure(format!("unknown family {n:?}"))))
        .collect()
}

fn train(spec: &ShapeCorpusSpec, dim: usize) -> Result<ShapePrior, Failure> {
    let shapes = generate_corpus(spec)?;
    let refs: Vec<_> = shapes.iter().map(|s| &s.grid).collect();
    let prior = fit_prior(&refs, dim)?;
    if prior.is_rank_deficient() {
        log::warn!("corpus rank {} is below the requested dimension {dim}", prior.rank());
    }
    Ok(prior)
}

fn train_prior(a: TrainPriorArgs) -> Outcome {
    let mut spec = corpus_spec(&a.corpus)?;
    if !a.families.is_empty() {
        spec = spec.filtered(&parse_families(&a.families)?);
    }
    let prior = train(&spec, a.dim)?;
    write_prior(&prior, &a.out)?;
    eprintln!(
        "prior D={} rank={} over {:?} written to {}",
        prior.latent_dim(),
        prior.rank(),
        prior.dims(),
        a.out.display()
    );
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Outcome {
    let spec = match &a.sensor {
        Some(p) => SensorSpec::from(read_json::<SensorConfig>(p)?),
        None => SensorSpec::default(),
    };
    let seed = env_seed()?.unwrap_or(a.seed);
    let sensor = TactileSensor::calibrated(spec, a.radius, a.presses, seed)?;
    write_file(&a.out, sensor.lut.to_json())?;
    eprintln!("{} occupied bins written to {}", sensor.lut.occupied_bins(), a.out.display());
    Ok(())
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

fn run(a: RunArgs) -> Outcome {
    let mut config = SceneConfig::from_json(&read_text(&a.scene)?)?;
    let mut seed = a.seed;
    if let Some(s) = env_seed()? {
        config.seed = s;
        seed = s;
    }
    let script: Vec<ManualPlan> = match &a.script {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let options = episode_options(&a.episode)?;
    let prior = read_prior(&a.prior)?;
    let registry = PolicyRegistry::default();
    registry.create(&a.policy, &Default::default())?;
    let scene = Scene::build(config)?;
    let episode = run_policy_episode(&scene, &prior, &registry, &a.policy, script, seed, a.touches, options)?;
    if let Some(reason) = &episode.stopped {
        eprintln!("stopped after {} touches: {reason}", episode.steps.len() - 1);
    }
    let name = scene_name(&a.scene);
    let table = SuiteResult {
        rows: episode
            .steps
            .iter()
            .map(|s| SuiteRow {
                scene: name.clone(),
                policy: episode.policy.clone(),
                seed,
                touch_index: s.touch_index,
                cd_sum: s.cd_sum,
                cd_norm: s.cd_norm,
                ms: s.ms,
            })
            .collect(),
        failures: Vec::new(),
    };
    write_file(&a.out, table.to_csv())?;
    if let Some(path) = &a.log {
        let mut log = String::new();
        for s in &episode.steps {
            if let (Some(plan), Some(record)) = (&s.plan, &s.record) {
                let _ = writeln!(log, "{}", plan.to_log_line());
                let _ = writeln!(log, "{}", record.to_log_line());
            }
        }
        write_file(path, log)?;
    }
    if let (Some(path), Some(grid)) = (&a.grid, &episode.final_grid) {
        write_file(path, encode_grid(grid))?;
    }
    Ok(())
}

fn suite(a: SuiteArgs) -> Outcome {
    let mut config = SuiteConfig::from_json(&read_text(&a.config)?)?;
    if let Some(s) = env_seed()? {
        config.override_seed(s);
    }
    let options = episode_options(&a.episode)?;
    let prior = match (&a.prior, &config.prior) {
        (Some(p), _) => read_prior(p)?,
        (None, Some(t)) => {
            let mut spec = t.corpus.clone();
            if let Some(s) = env_seed()? {
                spec.seed = s;
            }
            train(&spec, t.latent_dim)?
        }
        (None, None) => return Err(Failure("no --prior given and the config has no prior section".into())),
    };
    let result = run_suite(&config, &prior, &PolicyRegistry::default(), options)?;
    for f in &result.failures {
        eprintln!("episode failed: scene {} policy {} seed {}: {}", f.scene, f.policy, f.seed, f.error);
    }
    write_file(&a.out, result.to_csv())?;
    if let Some(path) = &a.summary {
        write_file(path, result.summary_csv())?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let options = match &a.options {
        Some(p) => read_json(p)?,
        None => EpisodeOptions::default(),
    };
    let mut priors = HashMap::new();
    for entry in &a.priors {
        let (id, path) = match entry.split_once('=') {
            Some((id, path)) => (id.to_string(), PathBuf::from(path)),
            None => (scene_name(Path::new(entry)), PathBuf::from(entry)),
        };
        priors.insert(id, Arc::new(read_prior(&path)?));
    }
    let app = AppState::new(priors, options);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(tactoform_service::serve(SocketAddr::new(a.bind, a.port), app))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let config = SceneConfig::from_json(&read_text(&a.scene)?)?;
    let scene = Scene::build(config)?;
    let bytes = fs::read(&a.grid).map_err(|e| Failure(format!("{}: {e}", a.grid.display())))?;
    let grid = decode_grid(&bytes, scene.frame)?;
    let cd = scene.chamfer(&grid)?;
    println!("{}", serde_json::json!({ "cd_sum": cd.sum, "cd_norm": cd.normalized }));
    Ok(())
}
