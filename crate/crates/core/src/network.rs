//! Single-layer perceptron of binary stochastic synapses.
//!
//! Neuron `i` reads `y_i = b_i + Σ_j w̄_ij x_j`, where `w̄_ij` is the mean of
//! `K` measurements of synapse `(i, j)`. Its mean and variance are
//!
//! ```text
//! μ_i  = b_i + Σ_j f(h_ij) x_j
//! σ_i² = (1/K) Σ_j f(h_ij) x_j (1 - f(h_ij) x_j)
//! ```
//!
//! and the standardized noise of a sampled forward is `ξ_i = (y_i - μ_i) / σ_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{self, check_samples, PassingProbabilityModel};
use crate::error::{BackendError, Error, Result};
use crate::rng::StreamRng;

/// Below this standard deviation a neuron is treated as deterministic:
/// `ξ = 0` and the variance term of the update is dropped.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Trainable parameters: one field per synapse and one bias per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynapseFieldNetwork {
    classes: usize,
    inputs: usize,
    /// Row-major `classes × inputs`, in mT.
    fields: Vec<f64>,
    biases: Vec<f64>,
}

impl SynapseFieldNetwork {
    pub fn new(classes: usize, inputs: usize, fields: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if classes == 0 || inputs == 0 {
            return Err(Error::InvalidArgument(
                "network needs at least one class and one input".into(),
            ));
        }
        if fields.len() != classes * inputs {
            return Err(Error::InvalidArgument(format!(
                "expected {} fields, got {}",
                classes * inputs,
                fields.len()
            )));
        }
        if biases.len() != classes {
            return Err(Error::InvalidArgument(format!(
                "expected {classes} biases, got {}",
                biases.len()
            )));
        }
        if fields.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(Self {
            classes,
            inputs,
            fields,
            biases,
        })
    }

    /// Every field set to `field_mt`, biases zero.
    pub fn uniform(classes: usize, inputs: usize, field_mt: f64) -> Result<Self> {
        Self::new(
            classes,
            inputs,
            vec![field_mt; classes * inputs],
            vec![0.0; classes],
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn field(&self, class: usize, input: usize) -> f64 {
        self.fields[class * self.inputs + input]
    }

    pub fn field_row(&self, class: usize) -> &[f64] {
        &self.fields[class * self.inputs..(class + 1) * self.inputs]
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.fields, &mut self.biases)
    }

    /// Passing probabilities and their derivatives for every synapse.
    pub fn table(&self, model: &PassingProbabilityModel) -> SynapseTable {
        SynapseTable {
            probability: self
                .fields
                .iter()
                .map(|&h| model.probability_unchecked(h))
                .collect(),
            derivative: self
                .fields
                .iter()
                .map(|&h| model.derivative_unchecked(h))
                .collect(),
        }
    }

    /// Indices of the active (`x_j = 1`) inputs after validating `x`.
    pub fn active_inputs(&self, x: &[u8]) -> Result<Vec<u32>> {
        if x.len() != self.inputs {
            return Err(Error::InvalidArgument(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.inputs
            )));
        }
        let mut active = Vec::new();
        for (j, &bit) in x.iter().enumerate() {
            match bit {
                0 => {}
                1 => active.push(j as u32),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "input {j} has value {bit}, expected a bit"
                    )))
                }
            }
        }
        Ok(active)
    }
}

/// `f(h_ij)` and `f'(h_ij)`, row-major like the fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapseTable {
    pub probability: Vec<f64>,
    pub derivative: Vec<f64>,
}

/// Per-neuron moments of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Standardized noise; only present after a sampled forward.
    pub xi: Option<Vec<f64>>,
}

impl OutputStats {
    pub fn sigma(&self, class: usize) -> f64 {
        self.sigma2[class].sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub y: Vec<f64>,
    pub stats: OutputStats,
    pub samples: u32,
}

/// One active synapse measurement request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapseQuery {
    pub field_mt: f64,
    /// `f(field_mt)` under the caller's calibration. In-process backends
    /// sample from it directly; remote devices ignore it.
    pub probability: f64,
}

/// Source of synapse measurements: given a list of active synapses and a
/// sample count `K`, report how many of the `K` measurements of each
/// synapse returned 1.
///
/// Only synapses with input 1 are ever queried.
pub trait SynapseBackend {
    fn sample_counts(
        &mut self,
        queries: &[SynapseQuery],
        samples: u32,
        counts: &mut [u32],
    ) -> Result<(), BackendError>;
}

impl<B: SynapseBackend + ?Sized> SynapseBackend for &mut B {
    fn sample_counts(
        &mut self,
        queries: &[SynapseQuery],
        samples: u32,
        counts: &mut [u32],
    ) -> Result<(), BackendError> {
        (**self).sample_counts(queries, samples, counts)
    }
}

impl<B: SynapseBackend + ?Sized> SynapseBackend for Box<B> {
    fn sample_counts(
        &mut self,
        queries: &[SynapseQuery],
        samples: u32,
        counts: &mut [u32],
    ) -> Result<(), BackendError> {
        (**self).sample_counts(queries, samples, counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One binomial variate per synapse.
    #[default]
    Binomial,
    /// `K` explicit Bernoulli draws per synapse, in the same order as the
    /// device emulator.
    Bernoulli,
}

/// In-process sampler owning its random stream.
#[derive(Debug, Clone)]
pub struct LocalBackend<R = StreamRng> {
    rng: R,
    mode: SamplingMode,
}

impl<R: Rng> LocalBackend<R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            mode: SamplingMode::Binomial,
        }
    }

    pub fn with_mode(rng: R, mode: SamplingMode) -> Self {
        Self { rng, mode }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> SynapseBackend for LocalBackend<R> {
    fn sample_counts(
        &mut self,
        queries: &[SynapseQuery],
        samples: u32,
        counts: &mut [u32],
    ) -> Result<(), BackendError> {
        debug_assert_eq!(queries.len(), counts.len());
        match self.mode {
            SamplingMode::Binomial => {
                for (q, c) in queries.iter().zip(counts.iter_mut()) {
                    *c = device::binomial_count(q.probability, samples, &mut self.rng);
                }
            }
            SamplingMode::Bernoulli => {
                for (q, c) in queries.iter().zip(counts.iter_mut()) {
                    *c = device::bernoulli_count(q.probability, samples, &mut self.rng);
                }
            }
        }
        Ok(())
    }
}

/// Forward-pass engine over a fixed parameter snapshot.
///
/// Holds the probability table so repeated forwards at the same parameters
/// evaluate the sigmoid once.
#[derive(Debug, Clone)]
pub struct Forward<'a> {
    net: &'a SynapseFieldNetwork,
    table: SynapseTable,
    queries: Vec<SynapseQuery>,
    counts: Vec<u32>,
}

impl<'a> Forward<'a> {
    pub fn new(net: &'a SynapseFieldNetwork, model: &PassingProbabilityModel) -> Self {
        Self {
            net,
            table: net.table(model),
            queries: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn net(&self) -> &SynapseFieldNetwork {
        self.net
    }

    pub fn table(&self) -> &SynapseTable {
        &self.table
    }

    /// Mean and variance of every neuron, consuming no randomness.
    pub fn stats(&self, active: &[u32], samples: u32) -> OutputStats {
        let classes = self.net.classes;
        let inputs = self.net.inputs;
        let mut mu = self.net.biases.clone();
        let mut sigma2 = vec![0.0; classes];
        let inv_k = 1.0 / f64::from(samples);
        for i in 0..classes {
            let row = &self.table.probability[i * inputs..(i + 1) * inputs];
            let (mut m, mut v) = (0.0, 0.0);
            for &j in active {
                let f = row[j as usize];
                m += f;
                v += f * (1.0 - f);
            }
            mu[i] += m;
            sigma2[i] = v * inv_k;
        }
        OutputStats {
            mu,
            sigma2,
            xi: None,
        }
    }

    /// Deterministic continuous-weight output `y = μ`.
    pub fn mean_field(&self, active: &[u32]) -> Vec<f64> {
        self.stats(active, 1).mu
    }

    /// Sampled forward with `samples` measurements of every active synapse.
    pub fn sampled<B: SynapseBackend + ?Sized>(
        &mut self,
        active: &[u32],
        samples: u32,
        backend: &mut B,
    ) -> Result<ForwardResult> {
        check_samples(samples)?;
        let classes = self.net.classes;
        let inputs = self.net.inputs;
        self.queries.clear();
        for i in 0..classes {
            for &j in active {
                let idx = i * inputs + j as usize;
                self.queries.push(SynapseQuery {
                    field_mt: self.net.fields[idx],
                    probability: self.table.probability[idx],
                });
            }
        }
        self.counts.clear();
        self.counts.resize(self.queries.len(), 0);
        backend.sample_counts(&self.queries, samples, &mut self.counts)?;

        let inv_k = 1.0 / f64::from(samples);
        let mut y = self.net.biases.clone();
        for (i, chunk) in self.counts.chunks(active.len().max(1)).enumerate() {
            if active.is_empty() {
                break;
            }
            let total: u64 = chunk.iter().map(|&c| u64::from(c)).sum();
            y[i] += total as f64 * inv_k;
        }

        let mut stats = self.stats(active, samples);
        let xi = y
            .iter()
            .zip(&stats.mu)
            .zip(&stats.sigma2)
            .map(|((&y, &mu), &s2)| {
                let sigma = s2.sqrt();
                if sigma < SIGMA_FLOOR {
                    0.0
                } else {
                    (y - mu) / sigma
                }
            })
            .collect();
        stats.xi = Some(xi);
        Ok(ForwardResult { y, stats, samples })
    }
}

/// Sampled forward pass of one input vector.
pub fn forward_sampled<B: SynapseBackend + ?Sized>(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
    backend: &mut B,
) -> Result<ForwardResult> {
    let active = net.active_inputs(x)?;
    Forward::new(net, model).sampled(&active, samples, backend)
}

/// Analytic output moments for `samples` measurements per synapse.
pub fn forward_stats(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
) -> Result<OutputStats> {
    check_samples(samples)?;
    let active = net.active_inputs(x)?;
    Ok(Forward::new(net, model).stats(&active, samples))
}

/// The `K → ∞` network: every synapse replaced by its passing probability.
pub fn forward_mean_field(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
) -> Result<Vec<f64>> {
    let active = net.active_inputs(x)?;
    Ok(Forward::new(net, model).mean_field(&active))
}

/// Softmax cross-entropy of `y` against `label`, writing `∂E/∂y` into `grad`.
pub fn softmax_cross_entropy_into(y: &[f64], label: usize, grad: &mut [f64]) -> Result<f64> {
    if label >= y.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            y.len()
        )));
    }
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &v) in grad.iter_mut().zip(y) {
        *g = (v - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = -(y[label] - max - sum.ln());
    grad[label] -= 1.0;
    Ok(loss)
}

/// Softmax cross-entropy loss and its gradient with respect to `y`.
pub fn softmax_cross_entropy(y: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; y.len()];
    let loss = softmax_cross_entropy_into(y, label, &mut grad)?;
    Ok((loss, grad))
}

/// Index of the largest output; ties go to the lowest index.
pub fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate().skip(1) {
        if v > y[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn model() -> PassingProbabilityModel {
        PassingProbabilityModel::default()
    }

    /// Two-input, one-class network whose synapses pass with the given probabilities.
    fn net_with_probs(probs: &[f64]) -> SynapseFieldNetwork {
        let m = model();
        let fields = probs
            .iter()
            .map(|&p| m.field_for_probability(p).unwrap())
            .collect();
        SynapseFieldNetwork::new(1, probs.len(), fields, vec![0.0]).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SynapseFieldNetwork::new(0, 3, vec![], vec![]).is_err());
        assert!(SynapseFieldNetwork::new(2, 3, vec![0.0; 5], vec![0.0; 2]).is_err());
        assert!(SynapseFieldNetwork::new(2, 3, vec![0.0; 6], vec![0.0; 1]).is_err());
        assert!(SynapseFieldNetwork::new(1, 1, vec![f64::NAN], vec![0.0]).is_err());
        let net = SynapseFieldNetwork::uniform(10, 196, 4.0).unwrap();
        assert!(net.active_inputs(&[0; 195]).is_err());
        let mut x = vec![0u8; 196];
        x[3] = 2;
        assert!(net.active_inputs(&x).is_err());
    }

    #[test]
    fn zero_input_gives_biases() {
        let net = SynapseFieldNetwork::new(
            2,
            3,
            vec![4.0; 6],
            vec![0.25, -1.5],
        )
        .unwrap();
        let mut backend = LocalBackend::new(stream(1, "t"));
        let out = forward_sampled(&net, &model(), &[0, 0, 0], 4, &mut backend).unwrap();
        assert_eq!(out.y, vec![0.25, -1.5]);
        assert_eq!(out.stats.sigma2, vec![0.0, 0.0]);
        assert_eq!(out.stats.xi, Some(vec![0.0, 0.0]));
        let stats = forward_stats(&net, &model(), &[0, 0, 0], 4).unwrap();
        assert_eq!(stats.mu, vec![0.25, -1.5]);
    }

    #[test]
    fn two_input_moments() {
        let net = net_with_probs(&[0.2, 0.7]);
        let stats = forward_stats(&net, &model(), &[1, 1], 4).unwrap();
        assert!((stats.mu[0] - 0.9).abs() < 1e-12);
        assert!((stats.sigma2[0] - 0.0925).abs() < 1e-12);
        let doubled = forward_stats(&net, &model(), &[1, 1], 8).unwrap();
        assert_eq!(doubled.sigma2[0] * 2.0, stats.sigma2[0]);
    }

    #[test]
    fn two_input_sampled_mean() {
        // Exact law: y = (B1 + B2) / 4 with B1 ~ Bin(4, 0.2), B2 ~ Bin(4, 0.7);
        // enumerating all 2^8 outcomes gives E[y] = 0.9, Var[y] = 0.0925.
        let net = net_with_probs(&[0.2, 0.7]);
        let mut backend = LocalBackend::new(stream(2, "t"));
        let n = 100_000;
        let mut fwd = Forward::new(&net, &model());
        let ys: Vec<f64> = (0..n)
            .map(|_| fwd.sampled(&[0, 1], 4, &mut backend).unwrap().y[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let se = (0.0925f64 / n as f64).sqrt();
        assert!((mean - 0.9).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn sampled_forward_is_reproducible() {
        let net = SynapseFieldNetwork::uniform(10, 196, 4.6).unwrap();
        let x: Vec<u8> = (0..196).map(|j| u8::from(j % 3 == 0)).collect();
        let run = || {
            let mut backend = LocalBackend::new(stream(3, "t"));
            forward_sampled(&net, &model(), &x, 5, &mut backend).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn outputs_bounded_by_bias_and_active_count() {
        let net = SynapseFieldNetwork::new(3, 4, vec![9.0; 12], vec![0.5, 0.0, -0.5]).unwrap();
        let mut backend = LocalBackend::new(stream(4, "t"));
        for _ in 0..100 {
            let out = forward_sampled(&net, &model(), &[1, 0, 1, 1], 3, &mut backend).unwrap();
            for (y, b) in out.y.iter().zip(net.biases()) {
                assert!(*y >= *b && *y <= *b + 3.0);
            }
        }
    }

    #[test]
    fn certain_synapse_mean_field() {
        let net = SynapseFieldNetwork::new(1, 1, vec![1e6], vec![0.3]).unwrap();
        let y = forward_mean_field(&net, &model(), &[1]).unwrap();
        assert_eq!(y, vec![1.3]);
        let stats = forward_stats(&net, &model(), &[1], 1).unwrap();
        assert_eq!(stats.sigma2, vec![0.0]);
    }

    #[test]
    fn saturated_synapses_give_zero_xi() {
        let net = SynapseFieldNetwork::new(1, 2, vec![1e6, 1e6], vec![0.0]).unwrap();
        let mut backend = LocalBackend::new(stream(5, "t"));
        let out = forward_sampled(&net, &model(), &[1, 1], 1, &mut backend).unwrap();
        assert_eq!(out.y, vec![2.0]);
        assert_eq!(out.stats.xi, Some(vec![0.0]));
    }

    #[test]
    fn large_k_converges_to_mean_field() {
        let m = model();
        let fields: Vec<f64> = (0..20).map(|j| 3.0 + 0.15 * j as f64).collect();
        let net = SynapseFieldNetwork::new(1, 20, fields, vec![0.0]).unwrap();
        let x = vec![1u8; 20];
        let mf = forward_mean_field(&net, &m, &x).unwrap()[0];
        let stats = forward_stats(&net, &m, &x, 4096).unwrap();
        let mut backend = LocalBackend::new(stream(6, "t"));
        let y = forward_sampled(&net, &m, &x, 4096, &mut backend).unwrap().y[0];
        assert!((y - mf).abs() < 3.0 * stats.sigma2[0].sqrt());
    }

    #[test]
    fn bernoulli_and_binomial_backends_agree_at_k1() {
        let net = SynapseFieldNetwork::uniform(10, 196, 4.6).unwrap();
        let x: Vec<u8> = (0..196).map(|j| u8::from(j % 2 == 0)).collect();
        let mut a = LocalBackend::with_mode(stream(7, "t"), SamplingMode::Binomial);
        let mut b = LocalBackend::with_mode(stream(7, "t"), SamplingMode::Bernoulli);
        assert_eq!(
            forward_sampled(&net, &model(), &x, 1, &mut a).unwrap(),
            forward_sampled(&net, &model(), &x, 1, &mut b).unwrap()
        );
    }

    #[test]
    fn uniform_softmax_loss() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 10], 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_outputs() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0, -1000.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_gradient_matches_finite_difference(
            y in proptest::collection::vec(-5.0f64..5.0, 2..12),
            label_seed in 0usize..1000,
        ) {
            let label = label_seed % y.len();
            let (_, grad) = softmax_cross_entropy(&y, label).unwrap();
            prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
            let step = 1e-6;
            for k in 0..y.len() {
                let mut up = y.clone();
                up[k] += step;
                let mut down = y.clone();
                down[k] -= step;
                let fd = (softmax_cross_entropy(&up, label).unwrap().0
                    - softmax_cross_entropy(&down, label).unwrap().0) / (2.0 * step);
                let scale = grad[k].abs().max(1e-3);
                prop_assert!((fd - grad[k]).abs() / scale < 1e-5, "k={} fd={} grad={}", k, fd, grad[k]);
            }
        }

        #[test]
        fn variance_respects_bernoulli_bound(
            fields in proptest::collection::vec(-2.0f64..12.0, 8),
            mask in proptest::collection::vec(0u8..2, 8),
            k in 1u32..16,
        ) {
            let net = SynapseFieldNetwork::new(1, 8, fields, vec![0.0]).unwrap();
            let stats = forward_stats(&net, &model(), &mask, k).unwrap();
            let active: f64 = mask.iter().map(|&b| f64::from(b)).sum();
            prop_assert!(stats.sigma2[0] >= 0.0);
            prop_assert!(stats.sigma2[0] <= active / (4.0 * f64::from(k)) + 1e-12);
        }
    }
}
