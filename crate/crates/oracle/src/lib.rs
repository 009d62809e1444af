//! Reference computations for testing the simulator: the exact law of a
//! neuron output, goodness-of-fit helpers and finite-difference gradients.
//!
//! Everything here is slow and exact on purpose. Nothing in the production
//! binary depends on this crate.

use std::io::Write;

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use stochsyn_core::PassingProbabilityModel;

mod gradient;

pub use gradient::{
    check_network_gradients, expected_gaussian_gradient, finite_difference, relative_error, reparameterized_loss,
    richardson_difference, GradientCheck,
};

/// Largest number of Bernoulli events the convolution accepts.
pub const MAX_EVENTS: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{events} Bernoulli events exceed the oracle cap of {cap}")]
    Capacity { events: usize, cap: usize },
    #[error("function is not finite at coordinate {coordinate} (value {value})")]
    NonFinite { coordinate: usize, value: f64 },
    #[error(transparent)]
    Core(#[from] stochsyn_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Exact pmf of the number of successes among independent events with the
/// given probabilities, by repeated convolution. `pmf[m] = P(count = m)`.
pub fn poisson_binomial_pmf(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.len() > MAX_EVENTS {
        return Err(OracleError::Capacity {
            events: probs.len(),
            cap: MAX_EVENTS,
        });
    }
    if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(OracleError::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let mut pmf = vec![0.0; probs.len() + 1];
    pmf[0] = 1.0;
    for (n, &p) in probs.iter().enumerate() {
        let q = 1.0 - p;
        for m in (1..=n + 1).rev() {
            pmf[m] = pmf[m] * q + pmf[m - 1] * p;
        }
        pmf[0] *= q;
    }
    for v in &mut pmf {
        if *v < 0.0 && *v > -1e-15 {
            *v = 0.0;
        }
    }
    Ok(pmf)
}

/// Law of `y = bias + count / K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactOutputDistribution {
    pub samples: u32,
    pub bias: f64,
    /// Probability of each count `0..=n`.
    pub pmf: Vec<f64>,
}

impl ExactOutputDistribution {
    pub fn support(&self) -> impl Iterator<Item = f64> + '_ {
        let k = f64::from(self.samples);
        (0..self.pmf.len()).map(move |m| self.bias + m as f64 / k)
    }

    pub fn mean(&self) -> f64 {
        self.support().zip(&self.pmf).map(|(y, p)| y * p).sum()
    }

    pub fn variance(&self) -> f64 {
        // about the bias-free count, which keeps the sum well conditioned
        let k = f64::from(self.samples);
        let m1: f64 = self.pmf.iter().enumerate().map(|(m, p)| m as f64 * p).sum();
        let var: f64 = self
            .pmf
            .iter()
            .enumerate()
            .map(|(m, p)| (m as f64 - m1).powi(2) * p)
            .sum();
        var / (k * k)
    }

    /// Mean and variance of the count (not scaled by `1/K`).
    pub fn count_moments(&self) -> (f64, f64) {
        let k = f64::from(self.samples);
        ((self.mean() - self.bias) * k, self.variance() * k * k)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "count,y,probability")?;
        for (m, (y, p)) in self.support().zip(&self.pmf).enumerate() {
            writeln!(out, "{m},{y},{p}")?;
        }
        Ok(())
    }
}

/// Exact output law of one neuron with field row `fields`, binary input `x`
/// and `samples` measurements per synapse.
pub fn exact_neuron_distribution(
    model: &PassingProbabilityModel,
    fields: &[f64],
    x: &[u8],
    samples: u32,
    bias: f64,
) -> Result<ExactOutputDistribution> {
    if fields.len() != x.len() {
        return Err(OracleError::InvalidArgument(format!(
            "{} fields for {} inputs",
            fields.len(),
            x.len()
        )));
    }
    if samples == 0 {
        return Err(OracleError::InvalidArgument("K must be >= 1".into()));
    }
    if let Some(&b) = x.iter().find(|&&b| b > 1) {
        return Err(OracleError::InvalidArgument(format!("input {b} is not a bit")));
    }
    let active = x.iter().filter(|&&b| b == 1).count();
    let events = active * samples as usize;
    if events > MAX_EVENTS {
        return Err(OracleError::Capacity {
            events,
            cap: MAX_EVENTS,
        });
    }
    let mut probs = Vec::with_capacity(events);
    for (&h, _) in fields.iter().zip(x).filter(|(_, &b)| b == 1) {
        let p = model.passing_probability(h)?;
        probs.extend(std::iter::repeat_n(p, samples as usize));
    }
    Ok(ExactOutputDistribution {
        samples,
        bias,
        pmf: poisson_binomial_pmf(&probs)?,
    })
}

/// Pearson goodness-of-fit result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Chi-square test of observed counts against expected probabilities.
///
/// Adjacent cells are pooled left to right until each has an expected count
/// of at least `min_expected`; the remainder joins the last cell.
pub fn chi_square_test(observed: &[u64], expected: &[f64], min_expected: f64) -> Result<ChiSquareTest> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(OracleError::InvalidArgument(
            "observed and expected must be non-empty and equally long".into(),
        ));
    }
    let total: u64 = observed.iter().sum();
    let n = total as f64;
    let norm: f64 = expected.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&obs, &p) in observed.iter().zip(expected) {
        o += obs as f64;
        e += p / norm * n;
        if e >= min_expected {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    if cells.len() < 2 {
        return Ok(ChiSquareTest {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
        });
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| OracleError::InvalidArgument(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Total-variation distance between the exact count law and a normal with
/// the same mean and variance, integrated over unit bins around each count.
/// Normal mass outside `[-0.5, n + 0.5]` counts as disagreement.
pub fn gaussian_tv_distance(dist: &ExactOutputDistribution) -> Result<f64> {
    let (mean, var) = dist.count_moments();
    if var <= 0.0 {
        return Err(OracleError::InvalidArgument(
            "degenerate distribution has no normal approximation".into(),
        ));
    }
    let normal = Normal::new(mean, var.sqrt()).map_err(|e| OracleError::InvalidArgument(e.to_string()))?;
    let n = dist.pmf.len();
    let mut tv = normal.cdf(-0.5) + (1.0 - normal.cdf(n as f64 - 0.5));
    for (m, &p) in dist.pmf.iter().enumerate() {
        let q = normal.cdf(m as f64 + 0.5) - normal.cdf(m as f64 - 0.5);
        tv += (p - q).abs();
    }
    Ok(0.5 * tv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_examples() {
        assert_eq!(poisson_binomial_pmf(&[0.5, 0.5]).unwrap(), vec![0.25, 0.5, 0.25]);
        assert_eq!(poisson_binomial_pmf(&[1.0]).unwrap(), vec![0.0, 1.0]);
        let pmf = poisson_binomial_pmf(&[0.2, 0.7]).unwrap();
        for (a, b) in pmf.iter().zip([0.24, 0.62, 0.14]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(poisson_binomial_pmf(&[]).unwrap(), vec![1.0]);
    }

    #[test]
    fn pmf_rejects_bad_probabilities() {
        assert!(matches!(
            poisson_binomial_pmf(&[0.5, 1.5]),
            Err(OracleError::InvalidArgument(_))
        ));
        assert!(poisson_binomial_pmf(&[f64::NAN]).is_err());
        assert!(matches!(
            poisson_binomial_pmf(&vec![0.5; MAX_EVENTS + 1]),
            Err(OracleError::Capacity { .. })
        ));
    }

    #[test]
    fn single_synapse_two_point_law() {
        let m = PassingProbabilityModel::default();
        let h = 5.0;
        let p = m.passing_probability(h).unwrap();
        let dist = exact_neuron_distribution(&m, &[h], &[1], 1, 0.3).unwrap();
        assert_eq!(dist.support().collect::<Vec<_>>(), vec![0.3, 1.3]);
        assert!((dist.pmf[0] - (1.0 - p)).abs() < 1e-15);
        assert!((dist.pmf[1] - p).abs() < 1e-15);
    }

    #[test]
    fn saturated_synapses_give_point_mass() {
        let m = PassingProbabilityModel::default();
        let dist = exact_neuron_distribution(&m, &[1e6, 1e6, 1e6], &[1, 0, 1], 3, 0.0).unwrap();
        assert_eq!(dist.pmf.len(), 7);
        assert_eq!(dist.pmf[6], 1.0);
        assert_eq!(dist.mean(), 2.0);
        assert_eq!(dist.variance(), 0.0);
    }

    #[test]
    fn capacity_is_enforced() {
        let m = PassingProbabilityModel::default();
        let fields = vec![4.6; 196];
        let x = vec![1u8; 196];
        assert!(matches!(
            exact_neuron_distribution(&m, &fields, &x, 21, 0.0),
            Err(OracleError::Capacity { events: 4116, .. })
        ));
        assert!(exact_neuron_distribution(&m, &fields, &x, 20, 0.0).is_ok());
    }

    #[test]
    fn chi_square_accepts_exact_counts_and_rejects_shifted_ones() {
        let expected = [0.25, 0.5, 0.25];
        let fit = chi_square_test(&[250, 500, 250], &expected, 5.0).unwrap();
        assert_eq!(fit.statistic, 0.0);
        assert_eq!(fit.dof, 2);
        assert!((fit.p_value - 1.0).abs() < 1e-12);
        let bad = chi_square_test(&[400, 400, 200], &expected, 5.0).unwrap();
        assert!(bad.p_value < 1e-6);
    }

    #[test]
    fn chi_square_pools_sparse_cells() {
        let fit = chi_square_test(&[0, 1, 99, 900], &[0.0001, 0.0009, 0.099, 0.9], 5.0).unwrap();
        assert_eq!(fit.dof, 1);
    }

    #[test]
    fn tv_distance_shrinks_with_size() {
        let m = PassingProbabilityModel::default();
        let tv = |n: usize| {
            let dist = exact_neuron_distribution(&m, &vec![4.6; n], &vec![1; n], 1, 0.0).unwrap();
            gaussian_tv_distance(&dist).unwrap()
        };
        assert!(tv(4) > tv(64));
        assert!(tv(64) > tv(1024));
        assert!(tv(1024) < 0.01);
    }

    #[test]
    fn csv_dump_lists_every_count() {
        let dist = ExactOutputDistribution {
            samples: 2,
            bias: 0.0,
            pmf: vec![0.25, 0.5, 0.25],
        };
        let mut buf = Vec::new();
        dist.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "count,y,probability\n0,0,0.25\n1,0.5,0.5\n2,1,0.25\n");
    }
}
