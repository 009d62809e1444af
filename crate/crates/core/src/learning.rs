//! Gradient rules, Adam, training with early stopping, evaluation, and the
//! `K_train × K_test` sweep.
//!
//! The stochastic rule differentiates the reparameterized output
//! `ỹ_i = μ_i + σ_i ξ_i` with `ξ_i` taken from the sampled forward:
//!
//! ```text
//! ∂E/∂h_ij = ∂E/∂y_i · f'(h_ij) x_j · (1 + (1 - 2 f(h_ij) x_j) / (2 K σ_i) · ξ_i)
//! ```
//!
//! The `1/K` comes from `σ_i² = (1/K) Σ_j f x (1 - f x)`; at `K = 1` it
//! disappears and for large `K` the rule approaches the mean-field one.
//!
//! The mean-field rule keeps only the leading `∂E/∂y_i · f'(h_ij) x_j` term.

use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{BinarizedDataset, Split};
use crate::device::{check_samples, PassingProbabilityModel};
use crate::error::{Error, Result};
use crate::network::{
    argmax, softmax_cross_entropy_into, Forward, ForwardResult, LocalBackend, SynapseBackend,
    SynapseFieldNetwork, SynapseTable, SIGMA_FLOOR,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Stochastic,
    MeanField,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Stochastic => "stochastic",
            Rule::MeanField => "mean_field",
        })
    }
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "stochastic" => Ok(Rule::Stochastic),
            "mean_field" | "mean-field" => Ok(Rule::MeanField),
            other => Err(format!("unknown rule {other:?}")),
        }
    }
}

/// Raw gradients of the loss; the optimizer turns them into updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub fields: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros(net: &SynapseFieldNetwork) -> Self {
        Self {
            fields: vec![0.0; net.fields().len()],
            biases: vec![0.0; net.classes()],
        }
    }

    fn clear(&mut self) {
        self.fields.iter_mut().for_each(|g| *g = 0.0);
        self.biases.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Output moments a variance-aware update needs: `σ²`, `ξ` and `K`.
pub(crate) type NoiseMoments<'a> = (&'a [f64], &'a [f64], u32);

/// Adds `scale ×` the gradient of one example into `grads`.
///
/// With `moments = None` this is the mean-field rule.
pub(crate) fn accumulate_gradient(
    table: &SynapseTable,
    inputs: usize,
    active: &[u32],
    grad_y: &[f64],
    moments: Option<NoiseMoments<'_>>,
    scale: f64,
    grads: &mut Gradients,
) {
    for (i, &gy) in grad_y.iter().enumerate() {
        let gy = gy * scale;
        grads.biases[i] += gy;
        let row = i * inputs;
        // ∂σ_i/∂h_ij = (1 - 2f) f' / (2 K σ_i), since σ² carries a 1/K.
        // None when the neuron is deterministic.
        let noise = moments.and_then(|(sigma2, xi, samples)| {
            let sigma = sigma2[i].sqrt();
            (sigma >= SIGMA_FLOOR).then(|| xi[i] / (2.0 * sigma * f64::from(samples)))
        });
        match noise {
            Some(noise) => {
                for &j in active {
                    let idx = row + j as usize;
                    let f = table.probability[idx];
                    let factor = 1.0 + (1.0 - 2.0 * f) * noise;
                    grads.fields[idx] += gy * table.derivative[idx] * factor;
                }
            }
            None => {
                for &j in active {
                    let idx = row + j as usize;
                    grads.fields[idx] += gy * table.derivative[idx];
                }
            }
        }
    }
}

fn check_gradient_shapes(net: &SynapseFieldNetwork, grad_y: &[f64]) -> Result<()> {
    if grad_y.len() != net.classes() {
        return Err(Error::InvalidArgument(format!(
            "∂E/∂y has {} entries, network has {} classes",
            grad_y.len(),
            net.classes()
        )));
    }
    Ok(())
}

/// Variance-aware gradient of one example, using `μ`, `σ²` and `ξ` from a
/// sampled forward pass.
pub fn stochastic_gradient(
    forward: &ForwardResult,
    grad_y: &[f64],
    x: &[u8],
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
) -> Result<Gradients> {
    check_gradient_shapes(net, grad_y)?;
    let active = net.active_inputs(x)?;
    let xi = forward.stats.xi.as_deref().ok_or_else(|| {
        Error::InvalidArgument("forward result carries no ξ (not a sampled forward)".into())
    })?;
    if forward.stats.sigma2.len() != net.classes() || xi.len() != net.classes() {
        return Err(Error::InvalidArgument(
            "forward result does not match the network".into(),
        ));
    }
    let table = net.table(model);
    let mut grads = Gradients::zeros(net);
    accumulate_gradient(
        &table,
        net.inputs(),
        &active,
        grad_y,
        Some((&forward.stats.sigma2, xi, forward.samples)),
        1.0,
        &mut grads,
    );
    Ok(grads)
}

/// Gradient of `E(μ(h))`, ignoring the output variance.
pub fn mean_field_gradient(
    grad_y: &[f64],
    x: &[u8],
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
) -> Result<Gradients> {
    check_gradient_shapes(net, grad_y)?;
    let active = net.active_inputs(x)?;
    let table = net.table(model);
    let mut grads = Gradients::zeros(net);
    accumulate_gradient(&table, net.inputs(), &active, grad_y, None, 1.0, &mut grads);
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter slots sharing one step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: AdamParams, slot_sizes: &[usize]) -> Self {
        Self {
            params,
            step: 0,
            first: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Fields and biases as two slots.
    pub fn for_network(params: AdamParams, net: &SynapseFieldNetwork) -> Self {
        Self::new(params, &[net.fields().len(), net.classes()])
    }

    /// One bias-corrected Adam step over every slot.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument("slot count mismatch".into()));
        }
        for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[slot].len() || g.len() != p.len() {
                return Err(Error::InvalidArgument(format!("slot {slot} shape mismatch")));
            }
        }
        self.step += 1;
        let AdamParams {
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    pub fn step_network(
        &mut self,
        net: &mut SynapseFieldNetwork,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        let (fields, biases) = net.params_mut();
        self.step(&mut [fields, biases], &[&grads.fields, &grads.biases], lr)
    }
}

/// Single-slot convenience wrapper.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(&mut [params], &[grads], lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: Rule,
    /// Samples per synapse during training (`K_train`).
    pub samples: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without a new validation-loss minimum before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

/// 0.01 for a single sample, 0.001 otherwise.
pub fn default_learning_rate(samples: u32) -> f64 {
    if samples <= 1 {
        0.01
    } else {
        0.001
    }
}

impl TrainConfig {
    pub fn new(rule: Rule, samples: u32, seed: u64) -> Self {
        Self {
            rule,
            samples,
            learning_rate: default_learning_rate(samples),
            batch_size: 50,
            patience: 20,
            max_epochs: 1000,
            seed,
            adam: AdamParams::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        check_samples(self.samples)?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and max epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "val_acc"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Mean loss and accuracy of a sampled forward over `split`.
fn sampled_loss(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &BinarizedDataset,
    split: Split,
    samples: u32,
    backend: &mut impl SynapseBackend,
) -> Result<(f64, f64)> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("{split:?} split is empty")));
    }
    let mut fwd = Forward::new(net, model);
    let mut grad = vec![0.0; net.classes()];
    let (mut loss, mut correct) = (0.0, 0usize);
    for &idx in indices {
        let idx = idx as usize;
        let out = fwd.sampled(data.active(idx), samples, backend)?;
        let label = data.label(idx);
        loss += softmax_cross_entropy_into(&out.y, label, &mut grad)?;
        correct += usize::from(argmax(&out.y) == label);
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains from the uniform `f = 0.5` initialization and returns the
/// snapshot with the lowest validation loss.
pub fn train(
    config: &TrainConfig,
    data: &BinarizedDataset,
    model: &PassingProbabilityModel,
) -> Result<(SynapseFieldNetwork, TrainHistory)> {
    config.validate()?;
    if data.indices(Split::Train).is_empty() || data.indices(Split::Validation).is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let classes = data.classes();
    let init = model.field_for_probability(0.5)?;
    let mut net = SynapseFieldNetwork::uniform(classes, data.inputs(), init)?;
    let mut adam = AdamState::for_network(config.adam, &net);
    let mut grads = Gradients::zeros(&net);
    let mut grad_y = vec![0.0; classes];

    let mut order = data.indices(Split::Train).to_vec();
    let mut shuffle_rng = rng::stream(config.seed, "train/shuffle");
    let mut sampler = LocalBackend::new(rng::stream(config.seed, "train/sampling"));

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, SynapseFieldNetwork)> = None;

    for epoch in 1..=config.max_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut fwd = Forward::new(&net, model);
            for &idx in batch {
                let idx = idx as usize;
                let active = data.active(idx);
                let label = data.label(idx);
                let loss = match config.rule {
                    Rule::Stochastic => {
                        let out = fwd.sampled(active, config.samples, &mut sampler)?;
                        let loss = softmax_cross_entropy_into(&out.y, label, &mut grad_y)?;
                        let xi = out.stats.xi.as_deref().expect("sampled forward sets ξ");
                        accumulate_gradient(
                            fwd.table(),
                            data.inputs(),
                            active,
                            &grad_y,
                            Some((&out.stats.sigma2, xi, out.samples)),
                            scale,
                            &mut grads,
                        );
                        loss
                    }
                    Rule::MeanField => {
                        let y = fwd.mean_field(active);
                        let loss = softmax_cross_entropy_into(&y, label, &mut grad_y)?;
                        accumulate_gradient(
                            fwd.table(),
                            data.inputs(),
                            active,
                            &grad_y,
                            None,
                            scale,
                            &mut grads,
                        );
                        loss
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss {loss} at epoch {epoch}, image {idx}"
                    )));
                }
                epoch_loss += loss;
            }
            drop(fwd);
            adam.step_network(&mut net, &grads, config.learning_rate)?;
        }
        if net.fields().iter().chain(net.biases()).any(|v| !v.is_finite()) {
            return Err(Error::TrainingAborted(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }

        let mut val_backend = LocalBackend::new(rng::stream(config.seed, "train/validation"));
        let (val_loss, val_acc) = sampled_loss(
            &net,
            model,
            data,
            Split::Validation,
            config.samples,
            &mut val_backend,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingAborted(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        let train_loss = epoch_loss / order.len() as f64;
        log::info!(
            "{} K={} seed={} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_acc:.4}",
            config.rule,
            config.samples,
            config.seed
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, net.clone()));
            history.best_epoch = epoch;
        }
        if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: u32,
    /// Accuracy of each independent pass.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across passes (0 for a single pass).
    pub std: f64,
    /// Standard error of the accuracy estimated from mini-batch accuracies,
    /// averaged over passes.
    pub stderr: f64,
    #[serde(skip)]
    pub predictions: Vec<Vec<u8>>,
}

/// Mini-batch size used for the per-batch standard error.
pub const EVAL_BATCH: usize = 50;

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One classification pass; returns predictions and the mini-batch stderr.
fn evaluate_pass<B: SynapseBackend + ?Sized>(
    fwd: &mut Forward<'_>,
    data: &BinarizedDataset,
    indices: &[u32],
    samples: u32,
    backend: &mut B,
) -> Result<(Vec<u8>, f64, f64)> {
    let mut predictions = Vec::with_capacity(indices.len());
    let mut batch_acc = Vec::new();
    let mut correct = 0usize;
    for batch in indices.chunks(EVAL_BATCH) {
        let mut batch_correct = 0usize;
        for &idx in batch {
            let idx = idx as usize;
            let out = fwd.sampled(data.active(idx), samples, backend)?;
            let pred = argmax(&out.y);
            predictions.push(pred as u8);
            batch_correct += usize::from(pred == data.label(idx));
        }
        correct += batch_correct;
        batch_acc.push(batch_correct as f64 / batch.len() as f64);
    }
    let (_, batch_std) = mean_std(&batch_acc);
    let stderr = batch_std / (batch_acc.len() as f64).sqrt();
    Ok((predictions, correct as f64 / indices.len() as f64, stderr))
}

/// Evaluates with a backend per pass supplied by `make_backend(pass)`.
pub fn evaluate_with<B, F>(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &BinarizedDataset,
    split: Split,
    samples: u32,
    repeats: u32,
    mut make_backend: F,
) -> Result<EvalReport>
where
    B: SynapseBackend,
    F: FnMut(u32) -> Result<B>,
{
    check_samples(samples)?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("{split:?} split is empty")));
    }
    let mut fwd = Forward::new(net, model);
    let mut accuracies = Vec::new();
    let mut stderrs = Vec::new();
    let mut predictions = Vec::new();
    for pass in 0..repeats {
        let mut backend = make_backend(pass)?;
        let (pred, acc, se) = evaluate_pass(&mut fwd, data, indices, samples, &mut backend)?;
        predictions.push(pred);
        accuracies.push(acc);
        stderrs.push(se);
    }
    let (mean, std) = mean_std(&accuracies);
    let stderr = stderrs.iter().sum::<f64>() / stderrs.len() as f64;
    Ok(EvalReport {
        samples,
        accuracies,
        mean,
        std,
        stderr,
        predictions,
    })
}

/// In-process evaluation; pass `r` samples from stream `eval/r` of `seed`.
pub fn evaluate(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &BinarizedDataset,
    split: Split,
    samples: u32,
    repeats: u32,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(net, model, data, split, samples, repeats, |pass| {
        Ok(LocalBackend::new(rng::stream(seed, &format!("eval/{pass}"))))
    })
}

/// Accuracy of the deterministic `y = μ` network.
pub fn evaluate_mean_field(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &BinarizedDataset,
    split: Split,
) -> Result<f64> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("{split:?} split is empty")));
    }
    let fwd = Forward::new(net, model);
    let correct = indices
        .iter()
        .filter(|&&idx| argmax(&fwd.mean_field(data.active(idx as usize))) == data.label(idx as usize))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// What to do when a sweep model is or is not already on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Load cached checkpoints, train the missing ones.
    Reuse,
    /// Always train and overwrite.
    Retrain,
    /// Fail on a missing checkpoint.
    Require,
}

impl std::str::FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "reuse" => Ok(Self::Reuse),
            "retrain" => Ok(Self::Retrain),
            "require" => Ok(Self::Require),
            other => Err(format!("unknown cache mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k_train: Vec<u32>,
    pub k_test: Vec<u32>,
    pub seeds: Vec<u64>,
    pub rule: Rule,
    /// Evaluation passes per cell.
    pub repeats: u32,
    pub split: SweepSplit,
    /// Overrides applied to every trained model.
    pub patience: usize,
    pub max_epochs: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache: CacheMode,
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSplit {
    Test,
    TestSubset,
}

impl From<SweepSplit> for Split {
    fn from(s: SweepSplit) -> Self {
        match s {
            SweepSplit::Test => Split::Test,
            SweepSplit::TestSubset => Split::TestSubset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "K_train")]
    pub k_train: u32,
    #[serde(rename = "K_test")]
    pub k_test: u32,
    pub seed: u64,
    pub accuracy: f64,
    pub std: f64,
    pub stderr: f64,
}

/// Checkpoint file name used by sweeps and the acceptance harness.
pub fn checkpoint_name(rule: Rule, samples: u32, seed: u64) -> String {
    format!("{rule}_k{samples}_s{seed}.json")
}

/// Trains (or loads) one model per sweep `(K_train, seed)` pair.
pub fn obtain_model(
    config: &TrainConfig,
    data: &BinarizedDataset,
    model: &PassingProbabilityModel,
    cache_dir: Option<&std::path::Path>,
    cache: CacheMode,
) -> Result<Checkpoint> {
    let path = cache_dir.map(|d| d.join(checkpoint_name(config.rule, config.samples, config.seed)));
    if let Some(path) = &path {
        if cache != CacheMode::Retrain && path.is_file() {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.metadata.config.as_ref() == Some(config) {
                return Ok(ckpt);
            }
            log::warn!("{} was trained with a different config", path.display());
            if cache == CacheMode::Require {
                return Err(Error::InvalidArgument(format!(
                    "cached checkpoint {} does not match the requested config",
                    path.display()
                )));
            }
        } else if cache == CacheMode::Require {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} is missing",
                path.display()
            )));
        }
    }
    let (net, history) = train(config, data, model)?;
    let ckpt = Checkpoint::from_training(*model, net, config, &history);
    if let Some(path) = &path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        }
        ckpt.save(path)?;
    }
    Ok(ckpt)
}

/// Runs `f` over `items` on up to `jobs` threads, returning results in
/// input order.
pub fn parallel_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<U>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = {
                    let mut n = next.lock().unwrap();
                    let k = *n;
                    *n += 1;
                    k
                };
                if k >= items.len() {
                    break;
                }
                *slots[k].lock().unwrap() = Some(f(&items[k]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// Trains per `(K_train, seed)` and evaluates each model at every `K_test`.
///
/// Rows are ordered by `K_train`, then seed, then `K_test`.
pub fn sweep(
    config: &SweepConfig,
    data: &BinarizedDataset,
    model: &PassingProbabilityModel,
) -> Result<Vec<SweepRow>> {
    if config.k_train.is_empty() || config.k_test.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep lists must be non-empty".into()));
    }
    let jobs: Vec<(u32, u64)> = config
        .k_train
        .iter()
        .flat_map(|&k| config.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = parallel_map(&jobs, config.jobs, |&(k_train, seed)| -> Result<Vec<SweepRow>> {
        let mut tc = TrainConfig::new(config.rule, k_train, seed);
        tc.patience = config.patience;
        tc.max_epochs = config.max_epochs;
        let ckpt = obtain_model(&tc, data, model, config.cache_dir.as_deref(), config.cache)?;
        let net = ckpt.network()?;
        config
            .k_test
            .iter()
            .map(|&k_test| {
                let report = evaluate(
                    &net,
                    &ckpt.calibration,
                    data,
                    config.split.into(),
                    k_test,
                    config.repeats,
                    rng::derive_seed(seed, &format!("sweep/eval/{k_train}")),
                )?;
                Ok(SweepRow {
                    k_train,
                    k_test,
                    seed,
                    accuracy: report.mean,
                    std: report.std,
                    stderr: report.stderr,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Mean accuracy and its spread across seeds for each `(K_train, K_test)` cell.
pub fn grid_means(rows: &[SweepRow]) -> Vec<(u32, u32, f64, f64)> {
    let mut cells: Vec<(u32, u32)> = rows.iter().map(|r| (r.k_train, r.k_test)).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
        .into_iter()
        .map(|(kt, ke)| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.k_train == kt && r.k_test == ke)
                .map(|r| r.accuracy)
                .collect();
            let (m, s) = mean_std(&acc);
            (kt, ke, m, s)
        })
        .collect()
}
