use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochsyn_core::PassingProbabilityModel;
use stochsyn_oracle::{exact_neuron_distribution, gaussian_tv_distance};

fn tv_for(n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let model = PassingProbabilityModel::default();
    let fields: Vec<f64> = (0..n)
        .map(|_| model.field_for_probability(rng.random_range(0.1..0.9)).unwrap())
        .collect();
    let dist = exact_neuron_distribution(&model, &fields, &vec![1; n], 1, 0.0).unwrap();
    gaussian_tv_distance(&dist).unwrap()
}

#[test]
fn normal_approximation_improves_with_fan_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [4, 16, 64, 196, 784] {
        println!("N = {n:4}: TV = {:.5}", tv_for(n, &mut rng));
    }
    for _ in 0..20 {
        assert!(tv_for(196, &mut rng) < 0.05);
    }
}
