//! Sampled forwards against the exact output law.

use stochsyn_core::rng::stream;
use stochsyn_core::{
    forward_sampled, LocalBackend, PassingProbabilityModel, SamplingMode, SynapseFieldNetwork,
};
use stochsyn_oracle::{chi_square_test, exact_neuron_distribution};

const DRAWS: usize = 100_000;

fn instance() -> (SynapseFieldNetwork, Vec<u8>) {
    let fields = vec![3.2, 4.4, 4.9, 6.0, 9.0, 1.0, 5.5];
    let net = SynapseFieldNetwork::new(1, 7, fields, vec![0.25]).unwrap();
    (net, vec![1, 1, 1, 1, 0, 1, 1])
}

fn sampled_counts(mode: SamplingMode, samples: u32, seed: u64) -> Vec<u64> {
    let model = PassingProbabilityModel::default();
    let (net, x) = instance();
    let events = x.iter().filter(|&&b| b == 1).count() * samples as usize;
    let mut backend = LocalBackend::with_mode(stream(seed, "oracle/monte-carlo"), mode);
    let mut counts = vec![0u64; events + 1];
    for _ in 0..DRAWS {
        let out = forward_sampled(&net, &model, &x, samples, &mut backend).unwrap();
        let m = ((out.y[0] - 0.25) * f64::from(samples)).round() as usize;
        counts[m] += 1;
    }
    counts
}

fn assert_fits(mode: SamplingMode, samples: u32) {
    let model = PassingProbabilityModel::default();
    let (net, x) = instance();
    let exact = exact_neuron_distribution(&model, net.field_row(0), &x, samples, 0.25).unwrap();
    let observed = sampled_counts(mode, samples, 5);
    let fit = chi_square_test(&observed, &exact.pmf, 5.0).unwrap();
    assert!(
        fit.p_value > 0.01,
        "{mode:?} K={samples}: chi2 = {:.2} on {} dof, p = {:.4}",
        fit.statistic,
        fit.dof,
        fit.p_value
    );
}

#[test]
fn binomial_sampling_matches_exact_law() {
    assert_fits(SamplingMode::Binomial, 1);
    assert_fits(SamplingMode::Binomial, 3);
}

#[test]
fn bernoulli_sampling_matches_exact_law() {
    assert_fits(SamplingMode::Bernoulli, 1);
    assert_fits(SamplingMode::Bernoulli, 3);
}

#[test]
fn standardized_noise_has_unit_moments() {
    let model = PassingProbabilityModel::default();
    let (net, x) = instance();
    let mut backend = LocalBackend::new(stream(9, "oracle/xi"));
    let xs: Vec<f64> = (0..DRAWS)
        .map(|_| forward_sampled(&net, &model, &x, 2, &mut backend).unwrap().stats.xi.unwrap()[0])
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
    // ξ is discrete, so the spread of the sample variance uses the fourth moment
    let var_se = ((m4 - var * var) / n).sqrt();
    assert!((var - 1.0).abs() < 5.0 * var_se, "variance {var} ± {var_se}");
}
