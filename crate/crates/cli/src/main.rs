//! `synapse`: data preparation, training, evaluation, sweeps, figure-data
//! export and the device emulator for domain-wall stochastic synapse
//! networks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 transport error.

mod dataset;
mod error;
mod fetch;
mod jobs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use stochsyn_core::learning::{default_learning_rate, CacheMode, SweepConfig, SweepSplit};
use stochsyn_core::{PassingProbabilityModel, Rule, TrainConfig};

use crate::dataset::DataSource;
use crate::error::{CliError, CliResult};
use crate::jobs::{
    read_calibration, AnalyzeJob, BackendSpec, DataJob, EvalJob, Job, ServeJob, SweepJob, TrainJob,
};
use crate::manifest::{diverging_outputs, FileDigest, RunManifest};

const SAMPLE_LADDER: &str = "1,2,4,8,16,32,64,128";

#[derive(Debug, Parser)]
#[command(name = "synapse", version, about = "Domain-wall stochastic synapse networks", long_about = None)]
struct Cli {
    /// Directory with the MNIST IDX files (raw or .gz).
    #[arg(long, global = true, env = "SYNAPSE_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,

    /// Where the binarized dataset cache lives [default: the data directory].
    #[arg(long, global = true, env = "SYNAPSE_CACHE_DIR")]
    cache_dir: Option<PathBuf>,

    /// Seed of the train/validation split.
    #[arg(long, global = true, default_value_t = 0)]
    split_seed: u64,

    /// Master seed; every random stream of the run is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify (or download) the MNIST files and build the binarized cache.
    Data(DataArgs),
    /// Train one network and write its best-validation checkpoint.
    Train(TrainArgs),
    /// Measure test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate over a K_train × K_test grid.
    Sweep(SweepArgs),
    /// Export field histograms, output distributions and output spread.
    Analyze(AnalyzeArgs),
    /// Run the device emulator.
    Serve(ServeArgs),
    /// Re-run a recorded manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    Stochastic,
    MeanField,
}

impl From<RuleArg> for Rule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Stochastic => Rule::Stochastic,
            RuleArg::MeanField => Rule::MeanField,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Download missing files from the public mirrors.
    #[arg(long)]
    fetch: bool,
    /// Rebuild the cache even if it exists.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "stochastic")]
    rule: RuleArg,
    /// Samples per synapse during training (K_train).
    #[arg(short = 'k', long = "k-train", default_value_t = 1)]
    k_train: u32,
    /// Learning rate [default: 0.01 for K_train = 1, else 0.001].
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    /// Calibration JSON (or a checkpoint to copy it from).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    /// In-process sampling.
    Local,
    /// In-process replica of a fresh device server seeded with --seed.
    Replica,
    /// A running device server (see --addr).
    Remote,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Samples per synapse at test time; a comma-separated list.
    #[arg(short = 'k', long = "k-test", value_delimiter = ',', default_value = "1")]
    k_test: Vec<u32>,
    /// Independent passes per K_test.
    #[arg(long, default_value_t = 5)]
    repeats: u32,
    /// Only the first 600 test images.
    #[arg(long)]
    subset: bool,
    #[arg(long, value_enum, default_value = "local")]
    backend: BackendArg,
    /// Device server address for --backend remote.
    #[arg(long, required_if_eq("backend", "remote"))]
    addr: Option<String>,
    /// Per-request timeout for --backend remote.
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Also report the deterministic mean-forward accuracy.
    #[arg(long)]
    mean_field: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "stochastic")]
    rule: RuleArg,
    #[arg(long, value_delimiter = ',', default_value = SAMPLE_LADDER)]
    k_train: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = SAMPLE_LADDER)]
    k_test: Vec<u32>,
    /// Training seeds; one model per seed and K_train.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    repeats: u32,
    #[arg(long)]
    subset: bool,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    /// Checkpoint directory [default: OUT/models].
    #[arg(long)]
    models: Option<PathBuf>,
    /// reuse: load cached models; retrain: always train; require: fail on a missing model.
    #[arg(long, default_value = "reuse")]
    cache: CacheMode,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Checkpoints to analyze (repeatable).
    #[arg(short, long)]
    checkpoint: Vec<PathBuf>,
    /// Also analyze the untrained f = 0.5 network.
    #[arg(long)]
    untrained: bool,
    #[arg(long, default_value_t = 140)]
    bins: usize,
    /// Histogram range in mT.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [-2.0, 12.0])]
    range: Vec<f64>,
    /// Test-set position of the repeatedly shown image [default: first zero].
    #[arg(long)]
    image: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    presentations: usize,
    /// Samples per synapse for the output distribution.
    #[arg(long, default_value_t = 1)]
    distribution_k: u32,
    /// Sample counts for the output-spread curve.
    #[arg(long, value_delimiter = ',', default_value = SAMPLE_LADDER)]
    std_k: Vec<u32>,
    /// Test images used for the output spread.
    #[arg(long, default_value_t = 100)]
    spread_images: usize,
    /// Presentations per image for the output spread.
    #[arg(long, default_value_t = 100)]
    spread_repeats: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Calibration JSON (or a checkpoint to copy it from).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Produce bits by synthesizing and classifying Kerr traces.
    #[arg(long)]
    traces: bool,
    /// Noise amplitude of synthesized traces.
    #[arg(long, default_value_t = 0.03)]
    trace_noise: f64,
    /// Fixed delay per request line.
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    /// Extra uniform random delay per request line.
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    /// Standard deviation of a random field-setting error in mT.
    #[arg(long, default_value_t = 0.0)]
    drift_mt: f64,
    /// Directory for the run manifest.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write outputs here instead of the recorded locations.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Fail unless every output is byte-identical to the recorded one.
    #[arg(long)]
    check: bool,
}

fn calibration(path: Option<&PathBuf>) -> CliResult<PassingProbabilityModel> {
    path.map_or_else(|| Ok(PassingProbabilityModel::default()), |p| read_calibration(p))
}

fn build_job(cli: &Cli) -> CliResult<Job> {
    let source = DataSource {
        data_dir: cli.data_dir.clone(),
        cache_dir: cli.cache_dir.clone().unwrap_or_else(|| cli.data_dir.clone()),
        split_seed: cli.split_seed,
    };
    let job = match &cli.command {
        Command::Data(a) => Job::Data(DataJob {
            source,
            fetch: a.fetch,
            force: a.force,
        }),
        Command::Train(a) => {
            let mut train = TrainConfig::new(a.rule.into(), a.k_train, cli.seed);
            train.learning_rate = a.lr.unwrap_or_else(|| default_learning_rate(a.k_train));
            train.batch_size = a.batch_size;
            train.patience = a.patience;
            train.max_epochs = a.max_epochs;
            Job::Train(TrainJob {
                source,
                calibration: calibration(a.calibration.as_ref())?,
                train,
                out: a.out.clone(),
            })
        }
        Command::Eval(a) => Job::Eval(EvalJob {
            source,
            checkpoint: a.checkpoint.clone(),
            k_test: a.k_test.clone(),
            repeats: a.repeats,
            subset: a.subset,
            backend: match a.backend {
                BackendArg::Local => BackendSpec::Local,
                BackendArg::Replica => BackendSpec::Replica,
                BackendArg::Remote => BackendSpec::Remote {
                    addr: a.addr.clone().expect("required by clap"),
                    timeout_ms: a.timeout_ms,
                },
            },
            seed: cli.seed,
            mean_field: a.mean_field,
            out: a.out.clone(),
        }),
        Command::Sweep(a) => Job::Sweep(SweepJob {
            source,
            sweep: SweepConfig {
                k_train: a.k_train.clone(),
                k_test: a.k_test.clone(),
                seeds: a.seeds.clone(),
                rule: a.rule.into(),
                repeats: a.repeats,
                split: if a.subset { SweepSplit::TestSubset } else { SweepSplit::Test },
                patience: a.patience,
                max_epochs: a.max_epochs,
                cache_dir: Some(a.models.clone().unwrap_or_else(|| a.out.join("models"))),
                cache: a.cache,
                jobs: cli.jobs,
            },
            out: a.out.clone(),
        }),
        Command::Analyze(a) => Job::Analyze(AnalyzeJob {
            source,
            checkpoints: a.checkpoint.clone(),
            untrained: a.untrained,
            bins: a.bins,
            range_mt: (a.range[0], a.range[1]),
            image: a.image,
            presentations: a.presentations,
            distribution_k: a.distribution_k,
            std_k: a.std_k.clone(),
            spread_images: a.spread_images,
            spread_repeats: a.spread_repeats,
            seed: cli.seed,
            out: a.out.clone(),
        }),
        Command::Serve(a) => Job::Serve(ServeJob {
            addr: a.addr.clone(),
            seed: cli.seed,
            calibration: calibration(a.calibration.as_ref())?,
            traces: a.traces,
            trace_noise: a.trace_noise,
            latency_ms: a.latency_ms,
            jitter_ms: a.jitter_ms,
            drift_mt: a.drift_mt,
            out: a.out.clone(),
        }),
        Command::Replay(_) => unreachable!("replay is handled separately"),
    };
    Ok(job)
}

/// Runs `job` and writes its manifest.
fn execute(job: Job, argv: Vec<String>) -> CliResult<RunManifest> {
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let produced = job.run()?;
    let digest = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<CliResult<Vec<_>>>();
    let manifest = RunManifest {
        seeds: job.seeds(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        argv,
        inputs: digest(&produced.inputs)?,
        outputs: digest(&produced.outputs)?,
        started_unix,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        job,
    };
    if let Some(path) = manifest.job.manifest_path() {
        manifest.save(&path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(manifest)
}

fn replay(args: &ReplayArgs, argv: Vec<String>) -> CliResult<()> {
    let recorded = RunManifest::load(&args.manifest)?;
    if recorded.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest was written by version {}, this is {}",
            recorded.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let mut job = recorded.job.clone();
    if let Some(dir) = &args.out {
        job.redirect(dir.clone());
    }
    println!("replaying {} from {}", job.name(), args.manifest.display());
    let replayed = execute(job, argv)?;
    if args.check {
        let bad = diverging_outputs(&recorded, &replayed);
        if !bad.is_empty() {
            return Err(CliError::Data(format!("replay diverged: {}", bad.join("; "))));
        }
        println!("all {} outputs identical", recorded.outputs.len());
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let argv: Vec<String> = std::env::args().collect();
    match &cli.command {
        Command::Replay(args) => replay(args, argv),
        _ => execute(build_job(cli)?, argv).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
