//! Fully resolved command configurations and their execution.
//!
//! A [`Job`] is what a manifest records; replaying a manifest runs the same
//! job again.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use stochsyn_core::analysis::{
    active_input_mask, field_histogram, median_probability_spread, neuron_distribution,
    output_spread,
};
use stochsyn_core::learning::{evaluate_mean_field, grid_means, sweep, write_sweep_csv, SweepConfig};
use stochsyn_core::{
    evaluate, evaluate_with, train, Checkpoint, EvalReport, LocalBackend, PassingProbabilityModel,
    SamplingMode, Split, SynapseFieldNetwork, TrainConfig,
};
use stochsyn_device::{connection_stream, serve, LatencyModel, RemoteBackend, RetryPolicy, ServerConfig, TraceConfig};

use crate::dataset::DataSource;
use crate::error::{CliError, CliResult};
use crate::fetch::fetch_missing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "snake_case")]
pub enum Job {
    Data(DataJob),
    Train(TrainJob),
    Eval(EvalJob),
    Sweep(SweepJob),
    Analyze(AnalyzeJob),
    Serve(ServeJob),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataJob {
    pub source: DataSource,
    pub fetch: bool,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub source: DataSource,
    pub calibration: PassingProbabilityModel,
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// In-process binomial sampling.
    Local,
    /// In-process copy of a freshly started device server with the same
    /// seed: pass `n` reproduces the server's `n`-th connection bit for bit.
    Replica,
    Remote { addr: String, timeout_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub source: DataSource,
    pub checkpoint: PathBuf,
    pub k_test: Vec<u32>,
    pub repeats: u32,
    /// Restrict to the first 600 test images.
    pub subset: bool,
    pub backend: BackendSpec,
    pub seed: u64,
    /// Also report the accuracy of the deterministic mean forward.
    pub mean_field: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub source: DataSource,
    pub sweep: SweepConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeJob {
    pub source: DataSource,
    pub checkpoints: Vec<PathBuf>,
    /// Include the untrained `f = 0.5` initialization as an extra network.
    pub untrained: bool,
    pub bins: usize,
    pub range_mt: (f64, f64),
    /// Test-set position of the image shown repeatedly; defaults to the
    /// first zero.
    pub image: Option<usize>,
    pub presentations: usize,
    pub distribution_k: u32,
    pub std_k: Vec<u32>,
    pub spread_images: usize,
    pub spread_repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeJob {
    pub addr: String,
    pub seed: u64,
    pub calibration: PassingProbabilityModel,
    pub traces: bool,
    pub trace_noise: f64,
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub drift_mt: f64,
    pub out: Option<PathBuf>,
}

/// Files a job read and wrote.
#[derive(Debug, Default)]
pub struct Produced {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Data(_) => "data",
            Job::Train(_) => "train",
            Job::Eval(_) => "eval",
            Job::Sweep(_) => "sweep",
            Job::Analyze(_) => "analyze",
            Job::Serve(_) => "serve",
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Job::Data(j) => vec![j.source.split_seed],
            Job::Train(j) => vec![j.train.seed, j.source.split_seed],
            Job::Eval(j) => vec![j.seed, j.source.split_seed],
            Job::Sweep(j) => {
                let mut s = j.sweep.seeds.clone();
                s.push(j.source.split_seed);
                s
            }
            Job::Analyze(j) => vec![j.seed, j.source.split_seed],
            Job::Serve(j) => vec![j.seed],
        }
    }

    /// Where the manifest goes; `None` for runs that keep no record.
    pub fn manifest_path(&self) -> Option<PathBuf> {
        match self {
            Job::Data(j) => Some(
                j.source
                    .cache_dir
                    .join(format!("binarized-s{}.manifest.json", j.source.split_seed)),
            ),
            Job::Train(j) => Some(j.out.join("manifest.json")),
            Job::Eval(j) => Some(j.out.join("manifest.json")),
            Job::Sweep(j) => Some(j.out.join("manifest.json")),
            Job::Analyze(j) => Some(j.out.join("manifest.json")),
            Job::Serve(j) => j.out.as_ref().map(|d| d.join("manifest.json")),
        }
    }

    /// Redirects every output of the job into `dir`.
    pub fn redirect(&mut self, dir: PathBuf) {
        match self {
            Job::Data(j) => j.source.cache_dir = dir,
            Job::Train(j) => j.out = dir,
            Job::Eval(j) => j.out = dir,
            Job::Sweep(j) => {
                if j.sweep.cache_dir.as_deref() == Some(j.out.join("models").as_path()) {
                    j.sweep.cache_dir = Some(dir.join("models"));
                }
                j.out = dir;
            }
            Job::Analyze(j) => j.out = dir,
            Job::Serve(j) => j.out = Some(dir),
        }
    }

    pub fn run(&self) -> CliResult<Produced> {
        match self {
            Job::Data(j) => run_data(j),
            Job::Train(j) => run_train(j),
            Job::Eval(j) => run_eval(j),
            Job::Sweep(j) => run_sweep(j),
            Job::Analyze(j) => run_analyze(j),
            Job::Serve(j) => run_serve(j),
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

/// Reads a calibration from either a bare model file or a checkpoint.
pub fn read_calibration(path: &Path) -> CliResult<PassingProbabilityModel> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let model = serde_json::from_str::<PassingProbabilityModel>(&text)
        .or_else(|_| serde_json::from_str::<Checkpoint>(&text).map(|c| c.calibration))
        .map_err(|e| CliError::Data(format!("{}: not a calibration or checkpoint: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

fn run_data(job: &DataJob) -> CliResult<Produced> {
    if job.fetch {
        let fetched = fetch_missing(&job.source.data_dir)?;
        if !fetched.is_empty() {
            println!("fetched {}", fetched.join(", "));
        }
    }
    let loaded = job.source.load(job.force)?;
    if loaded.cache_hit {
        println!("cache hit: {}", job.source.cache_path().display());
    } else {
        println!("built {}", job.source.cache_path().display());
    }
    let d = &loaded.data;
    println!(
        "{} images ({} train, {} validation, {} test), {} inputs, {} classes",
        d.len(),
        d.indices(Split::Train).len(),
        d.indices(Split::Validation).len(),
        d.indices(Split::Test).len(),
        d.inputs(),
        d.classes()
    );
    let mut inputs = loaded.inputs;
    if loaded.cache_hit {
        if let Ok(raw) = stochsyn_core::data::locate_mnist(&job.source.data_dir) {
            inputs = raw;
        }
    }
    Ok(Produced {
        inputs,
        outputs: vec![job.source.cache_path()],
    })
}

fn run_train(job: &TrainJob) -> CliResult<Produced> {
    let loaded = job.source.load(false)?;
    create_dir(&job.out)?;
    log::info!(
        "training {} rule, K = {}, seed {}",
        job.train.rule,
        job.train.samples,
        job.train.seed
    );
    let (net, history) = train(&job.train, &loaded.data, &job.calibration)?;
    let ckpt = Checkpoint::from_training(job.calibration, net, &job.train, &history);
    let ckpt_path = job.out.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;
    let hist_path = job.out.join("history.csv");
    history.write_csv(create(&hist_path)?)?;
    if let Some(best) = history.epochs.iter().find(|e| e.epoch == history.best_epoch) {
        println!(
            "best epoch {} of {}: val_loss {:.4}, val_acc {:.4}",
            best.epoch,
            history.epochs.len(),
            best.val_loss,
            best.val_acc
        );
    }
    Ok(Produced {
        inputs: loaded.inputs,
        outputs: vec![ckpt_path, hist_path],
    })
}

#[derive(Debug, Serialize)]
struct EvalRow {
    #[serde(rename = "K_test")]
    k_test: u32,
    repeats: usize,
    mean: f64,
    std: f64,
    stderr: f64,
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    split: &'static str,
    images: usize,
    backend: &'a BackendSpec,
    results: &'a [EvalReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_field_accuracy: Option<f64>,
}

fn evaluate_backend(
    job: &EvalJob,
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &stochsyn_core::BinarizedDataset,
    split: Split,
    position: usize,
    samples: u32,
) -> CliResult<EvalReport> {
    let report = match &job.backend {
        BackendSpec::Local => evaluate(net, model, data, split, samples, job.repeats, job.seed)?,
        BackendSpec::Replica => {
            let first = (position as u64) * u64::from(job.repeats);
            evaluate_with(net, model, data, split, samples, job.repeats, |pass| {
                Ok(LocalBackend::with_mode(
                    connection_stream(job.seed, first + u64::from(pass)),
                    SamplingMode::Bernoulli,
                ))
            })?
        }
        BackendSpec::Remote { addr, timeout_ms } => {
            let timeout = Duration::from_millis(*timeout_ms);
            evaluate_with(net, model, data, split, samples, job.repeats, |_| {
                Ok(RemoteBackend::connect(addr.as_str(), timeout, RetryPolicy::default())?)
            })?
        }
    };
    Ok(report)
}

fn run_eval(job: &EvalJob) -> CliResult<Produced> {
    if job.k_test.is_empty() {
        return Err(CliError::Usage("--k-test needs at least one value".into()));
    }
    let loaded = job.source.load(false)?;
    let ckpt = Checkpoint::load(&job.checkpoint)?;
    let net = ckpt.network()?;
    let data = &loaded.data;
    if net.inputs() != data.inputs() || net.classes() < data.classes() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} inputs and {} classes; dataset has {} and {}",
            net.inputs(),
            net.classes(),
            data.inputs(),
            data.classes()
        )));
    }
    let split = if job.subset { Split::TestSubset } else { Split::Test };
    let mut results = Vec::new();
    for (position, &k) in job.k_test.iter().enumerate() {
        let report = evaluate_backend(job, &net, &ckpt.calibration, data, split, position, k)?;
        println!(
            "K_test = {k}: accuracy {:.4} ± {:.4} (mini-batch stderr {:.4})",
            report.mean, report.std, report.stderr
        );
        results.push(report);
    }
    let mean_field_accuracy = if job.mean_field {
        let acc = evaluate_mean_field(&net, &ckpt.calibration, data, split)?;
        println!("mean forward: accuracy {acc:.4}");
        Some(acc)
    } else {
        None
    };

    create_dir(&job.out)?;
    let json_path = job.out.join("eval.json");
    write_json(
        &json_path,
        &EvalOutput {
            checkpoint: &job.checkpoint,
            split: if job.subset { "test_subset" } else { "test" },
            images: data.indices(split).len(),
            backend: &job.backend,
            results: &results,
            mean_field_accuracy,
        },
    )?;
    let csv_path = job.out.join("eval.csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    for r in &results {
        w.serialize(EvalRow {
            k_test: r.samples,
            repeats: r.accuracies.len(),
            mean: r.mean,
            std: r.std,
            stderr: r.stderr,
        })?;
    }
    w.flush().map_err(CliError::io(&csv_path))?;
    let mut inputs = loaded.inputs;
    inputs.push(job.checkpoint.clone());
    Ok(Produced {
        inputs,
        outputs: vec![json_path, csv_path],
    })
}

#[derive(Debug, Serialize)]
struct GridRow {
    #[serde(rename = "K_train")]
    k_train: u32,
    #[serde(rename = "K_test")]
    k_test: u32,
    mean_accuracy: f64,
    seed_std: f64,
}

fn run_sweep(job: &SweepJob) -> CliResult<Produced> {
    let loaded = job.source.load(false)?;
    create_dir(&job.out)?;
    let rows = sweep(&job.sweep, &loaded.data, &PassingProbabilityModel::default())?;
    let sweep_path = job.out.join("sweep.csv");
    write_sweep_csv(&rows, create(&sweep_path)?)?;
    let grid_path = job.out.join("grid.csv");
    let mut w = csv::Writer::from_writer(create(&grid_path)?);
    for (k_train, k_test, mean, std) in grid_means(&rows) {
        println!("K_train {k_train:>4} K_test {k_test:>4}: {mean:.4} ± {std:.4}");
        w.serialize(GridRow {
            k_train,
            k_test,
            mean_accuracy: mean,
            seed_std: std,
        })?;
    }
    w.flush().map_err(CliError::io(&grid_path))?;
    Ok(Produced {
        inputs: loaded.inputs,
        outputs: vec![sweep_path, grid_path],
    })
}

#[derive(Debug, Serialize)]
struct HistogramRow<'a> {
    network: &'a str,
    #[serde(rename = "lo_mT")]
    lo_mt: f64,
    #[serde(rename = "hi_mT")]
    hi_mt: f64,
    density: f64,
    count: usize,
    probability_at_centre: f64,
}

#[derive(Debug, Serialize)]
struct DistributionRow<'a> {
    network: &'a str,
    presentation: usize,
    class: usize,
    y: f64,
}

#[derive(Debug, Serialize)]
struct SpreadRow<'a> {
    network: &'a str,
    #[serde(rename = "K_test")]
    k_test: u32,
    empirical_std: f64,
    analytic_std: f64,
}

#[derive(Debug, Serialize)]
struct NetworkSummary {
    network: String,
    median_probability_spread: f64,
    fields_below_range: usize,
    fields_above_range: usize,
}

fn run_analyze(job: &AnalyzeJob) -> CliResult<Produced> {
    let loaded = job.source.load(false)?;
    let data = &loaded.data;
    let mut nets: Vec<(String, PassingProbabilityModel, SynapseFieldNetwork)> = Vec::new();
    if job.untrained {
        let model = PassingProbabilityModel::default();
        let ckpt = Checkpoint::untrained(model, data.classes(), data.inputs())?;
        nets.push(("untrained".into(), model, ckpt.network()?));
    }
    for path in &job.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        nets.push((path.display().to_string(), ckpt.calibration, ckpt.network()?));
    }
    if nets.is_empty() {
        return Err(CliError::Usage("nothing to analyze: pass --checkpoint or --untrained".into()));
    }
    let test = data.indices(Split::Test);
    let image = match job.image {
        Some(i) => *test
            .get(i)
            .ok_or_else(|| CliError::Usage(format!("test image {i} does not exist")))?,
        None => *test
            .iter()
            .find(|&&i| data.label(i as usize) == 0)
            .ok_or_else(|| CliError::Data("test set has no zero".into()))?,
    } as usize;
    let mask = active_input_mask(data, Split::Train);
    create_dir(&job.out)?;

    let hist_path = job.out.join("field_histogram.csv");
    let dist_path = job.out.join("neuron_distribution.csv");
    let spread_path = job.out.join("std_vs_k.csv");
    let summary_path = job.out.join("summary.json");
    let mut hist_w = csv::Writer::from_writer(create(&hist_path)?);
    let mut dist_w = csv::Writer::from_writer(create(&dist_path)?);
    let mut spread_w = csv::Writer::from_writer(create(&spread_path)?);
    let mut summaries = Vec::new();
    for (name, model, net) in &nets {
        let hist = field_histogram(&[net], model, job.range_mt.0, job.range_mt.1, job.bins)?;
        for b in &hist.bins {
            hist_w.serialize(HistogramRow {
                network: name,
                lo_mt: b.lo_mt,
                hi_mt: b.hi_mt,
                density: b.density,
                count: b.count,
                probability_at_centre: b.probability_at_centre,
            })?;
        }
        let outputs = neuron_distribution(
            net,
            model,
            data.image(image),
            job.distribution_k,
            job.presentations,
            job.seed,
        )?;
        for (presentation, y) in outputs.iter().enumerate() {
            for (class, &value) in y.iter().enumerate() {
                dist_w.serialize(DistributionRow {
                    network: name,
                    presentation,
                    class,
                    y: value,
                })?;
            }
        }
        for &k in &job.std_k {
            let spread = output_spread(
                net,
                model,
                data,
                Split::Test,
                job.spread_images,
                k,
                job.spread_repeats,
                job.seed,
            )?;
            spread_w.serialize(SpreadRow {
                network: name,
                k_test: k,
                empirical_std: spread.empirical,
                analytic_std: spread.analytic,
            })?;
        }
        let median = median_probability_spread(net, model, &mask);
        println!("{name}: median |f - 0.5| over active synapses {median:.4}");
        summaries.push(NetworkSummary {
            network: name.clone(),
            median_probability_spread: median,
            fields_below_range: hist.below,
            fields_above_range: hist.above,
        });
    }
    hist_w.flush().map_err(CliError::io(&hist_path))?;
    dist_w.flush().map_err(CliError::io(&dist_path))?;
    spread_w.flush().map_err(CliError::io(&spread_path))?;
    write_json(&summary_path, &summaries)?;
    let mut inputs = loaded.inputs;
    inputs.extend(job.checkpoints.iter().cloned());
    Ok(Produced {
        inputs,
        outputs: vec![hist_path, dist_path, spread_path, summary_path],
    })
}

fn run_serve(job: &ServeJob) -> CliResult<Produced> {
    let mut config = ServerConfig::new(job.calibration, job.seed);
    if job.traces {
        config.trace = Some(TraceConfig {
            noise_amplitude: job.trace_noise,
            ..TraceConfig::default()
        });
    }
    let ms = |v: f64| {
        if v.is_finite() && v >= 0.0 {
            Ok(Duration::from_secs_f64(v / 1e3))
        } else {
            Err(CliError::Usage(format!("latency {v} ms must be non-negative")))
        }
    };
    config.latency = LatencyModel {
        fixed: ms(job.latency_ms)?,
        jitter: ms(job.jitter_ms)?,
    };
    config.field_drift_mt = job.drift_mt;
    let handle = serve(job.addr.as_str(), config)
        .map_err(|e| CliError::Transport(format!("cannot listen on {}: {e}", job.addr)))?;
    println!("listening on {}", handle.local_addr());
    let _ = std::io::stdout().flush();
    let stop = handle.stop_flag();
    ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
        .map_err(|e| CliError::Usage(format!("cannot install signal handler: {e}")))?;
    handle.wait();
    log::info!("server stopped");
    Ok(Produced::default())
}
