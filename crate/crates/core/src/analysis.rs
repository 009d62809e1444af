//! Figure-data extraction: field histograms, repeated-presentation output
//! distributions and output spread versus sample count.

use crate::data::{BinarizedDataset, Split};
use crate::device::PassingProbabilityModel;
use crate::error::{Error, Result};
use crate::learning::mean_std;
use crate::network::{Forward, LocalBackend, SynapseFieldNetwork};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo_mt: f64,
    pub hi_mt: f64,
    /// Probability density (integrates to the in-range fraction).
    pub density: f64,
    pub count: usize,
    /// Passing probability at the bin centre.
    pub probability_at_centre: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistogram {
    pub bins: Vec<HistogramBin>,
    pub below: usize,
    pub above: usize,
}

/// Density histogram of all fields of `nets` over `[lo, hi)` mT.
pub fn field_histogram(
    nets: &[&SynapseFieldNetwork],
    model: &PassingProbabilityModel,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<FieldHistogram> {
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) || bins == 0 {
        return Err(Error::InvalidArgument("histogram needs lo < hi and bins > 0".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let (mut below, mut above, mut total) = (0, 0, 0usize);
    for net in nets {
        for &h in net.fields() {
            total += 1;
            if h < lo {
                below += 1;
            } else if h >= hi {
                above += 1;
            } else {
                counts[(((h - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
    }
    let bins = counts
        .iter()
        .enumerate()
        .map(|(k, &count)| {
            let lo_mt = lo + k as f64 * width;
            HistogramBin {
                lo_mt,
                hi_mt: lo_mt + width,
                density: count as f64 / (total.max(1) as f64 * width),
                count,
                probability_at_centre: model.probability_unchecked(lo_mt + 0.5 * width),
            }
        })
        .collect();
    Ok(FieldHistogram { bins, below, above })
}

/// Inputs lit in at least one image of `split`.
pub fn active_input_mask(data: &BinarizedDataset, split: Split) -> Vec<bool> {
    let mut mask = vec![false; data.inputs()];
    for &idx in data.indices(split) {
        for &j in data.active(idx as usize) {
            mask[j as usize] = true;
        }
    }
    mask
}

/// Median of `|f(h) - 0.5|` over the synapses of the masked inputs; near
/// 0.5 for binary solutions, near 0 for central ones.
pub fn median_probability_spread(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    mask: &[bool],
) -> f64 {
    let mut spread: Vec<f64> = (0..net.classes())
        .flat_map(|i| {
            net.field_row(i)
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&h, _)| (model.probability_unchecked(h) - 0.5).abs())
                .collect::<Vec<_>>()
        })
        .collect();
    if spread.is_empty() {
        return f64::NAN;
    }
    spread.sort_by(f64::total_cmp);
    let n = spread.len();
    if n % 2 == 1 {
        spread[n / 2]
    } else {
        0.5 * (spread[n / 2 - 1] + spread[n / 2])
    }
}

/// Presents `x` `presentations` times; returns `outputs[presentation][class]`.
pub fn neuron_distribution(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
    presentations: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let active = net.active_inputs(x)?;
    let mut fwd = Forward::new(net, model);
    let mut backend = LocalBackend::new(rng::stream(seed, "analyze/distribution"));
    (0..presentations)
        .map(|_| Ok(fwd.sampled(&active, samples, &mut backend)?.y))
        .collect()
}

/// Output spread of a trained network at a given sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputSpread {
    /// Empirical standard deviation of `y_i` over repeated forwards,
    /// averaged over neurons and images.
    pub empirical: f64,
    /// `σ_i` from the closed form, averaged the same way.
    pub analytic: f64,
}

/// Mean output standard deviation over the first `images` of `split`, each
/// presented `repeats` times.
#[allow(clippy::too_many_arguments)]
pub fn output_spread(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    data: &BinarizedDataset,
    split: Split,
    images: usize,
    samples: u32,
    repeats: usize,
    seed: u64,
) -> Result<OutputSpread> {
    if repeats < 2 {
        return Err(Error::InvalidArgument("need at least two repeats".into()));
    }
    let indices = &data.indices(split)[..images.min(data.indices(split).len())];
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no images to analyze".into()));
    }
    let mut fwd = Forward::new(net, model);
    let mut backend = LocalBackend::new(rng::stream(seed, &format!("analyze/spread/{samples}")));
    let classes = net.classes();
    let (mut empirical, mut analytic) = (0.0, 0.0);
    for &idx in indices {
        let active = data.active(idx as usize);
        let stats = fwd.stats(active, samples);
        analytic += stats.sigma2.iter().map(|s| s.sqrt()).sum::<f64>();
        let mut per_class = vec![Vec::with_capacity(repeats); classes];
        for _ in 0..repeats {
            let out = fwd.sampled(active, samples, &mut backend)?;
            for (c, y) in out.y.into_iter().enumerate() {
                per_class[c].push(y);
            }
        }
        empirical += per_class.iter().map(|ys| mean_std(ys).1).sum::<f64>();
    }
    let n = (indices.len() * classes) as f64;
    Ok(OutputSpread {
        empirical: empirical / n,
        analytic: analytic / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_network_fills_one_bin() {
        let m = PassingProbabilityModel::default();
        let net = SynapseFieldNetwork::uniform(10, 196, m.field_for_probability(0.5).unwrap()).unwrap();
        let hist = field_histogram(&[&net], &m, -2.0, 12.0, 140).unwrap();
        let nonzero: Vec<_> = hist.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].count, 1960);
        let integral: f64 = hist.bins.iter().map(|b| b.density * (b.hi_mt - b.lo_mt)).sum();
        assert!((integral - 1.0).abs() < 1e-12);
        assert!((nonzero[0].probability_at_centre - 0.5).abs() < 0.05);
    }

    #[test]
    fn out_of_range_fields_counted() {
        let m = PassingProbabilityModel::default();
        let net = SynapseFieldNetwork::new(1, 3, vec![-5.0, 5.0, 50.0], vec![0.0]).unwrap();
        let hist = field_histogram(&[&net], &m, 0.0, 10.0, 10).unwrap();
        assert_eq!((hist.below, hist.above), (1, 1));
        assert!(field_histogram(&[&net], &m, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn spread_of_binary_and_central_networks() {
        let m = PassingProbabilityModel::default();
        let binary = SynapseFieldNetwork::new(1, 4, vec![-50.0, 50.0, 50.0, 0.0], vec![0.0]).unwrap();
        let mask = [true, true, true, false];
        assert!(median_probability_spread(&binary, &m, &mask) > 0.47);
        let central = SynapseFieldNetwork::uniform(1, 4, m.field_for_probability(0.5).unwrap()).unwrap();
        assert!(median_probability_spread(&central, &m, &mask) < 1e-12);
    }

    #[test]
    fn distribution_has_requested_shape() {
        let m = PassingProbabilityModel::default();
        let net = SynapseFieldNetwork::uniform(3, 5, 4.6).unwrap();
        let out = neuron_distribution(&net, &m, &[1, 0, 1, 1, 0], 2, 100, 1).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.iter().all(|y| y.len() == 3));
    }
}
