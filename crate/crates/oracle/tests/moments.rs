use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochsyn_core::{forward_stats, PassingProbabilityModel, SynapseFieldNetwork};
use stochsyn_oracle::{exact_neuron_distribution, poisson_binomial_pmf};

#[test]
fn closed_form_moments_match_exact_law() {
    let model = PassingProbabilityModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let classes = rng.random_range(1..=4);
        let inputs = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let fields: Vec<f64> = (0..classes * inputs).map(|_| rng.random_range(0.0..10.0)).collect();
        let biases: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<u8> = (0..inputs).map(|_| rng.random_range(0..=1)).collect();
        let net = SynapseFieldNetwork::new(classes, inputs, fields, biases).unwrap();
        let stats = forward_stats(&net, &model, &x, k).unwrap();
        for i in 0..classes {
            let exact = exact_neuron_distribution(&model, net.field_row(i), &x, k, net.biases()[i]).unwrap();
            let total: f64 = exact.pmf.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((exact.mean() - stats.mu[i]).abs() < 1e-12);
            assert!((exact.variance() - stats.sigma2[i]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn pmf_is_a_distribution_with_known_moments(probs in prop::collection::vec(0.0f64..=1.0, 0..64)) {
        let pmf = poisson_binomial_pmf(&probs).unwrap();
        prop_assert_eq!(pmf.len(), probs.len() + 1);
        prop_assert!(pmf.iter().all(|&p| p >= 0.0));
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = pmf.iter().enumerate().map(|(m, p)| m as f64 * p).sum();
        let var: f64 = pmf.iter().enumerate().map(|(m, p)| (m as f64 - mean).powi(2) * p).sum();
        prop_assert!((mean - probs.iter().sum::<f64>()).abs() < 1e-10);
        prop_assert!((var - probs.iter().map(|p| p * (1.0 - p)).sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn pmf_ignores_event_order(mut probs in prop::collection::vec(0.0f64..=1.0, 1..32)) {
        let a = poisson_binomial_pmf(&probs).unwrap();
        probs.reverse();
        let b = poisson_binomial_pmf(&probs).unwrap();
        for (a, b) in a.iter().zip(&b) {
            prop_assert!((a - b).abs() < 1e-13);
        }
    }
}
