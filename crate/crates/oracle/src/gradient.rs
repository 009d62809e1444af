//! Finite-difference checks of the training gradients.

use stochsyn_core::network::{softmax_cross_entropy, SIGMA_FLOOR};
use stochsyn_core::{
    forward_stats, stochastic_gradient, ForwardResult, OutputStats, PassingProbabilityModel,
    SynapseFieldNetwork,
};

use crate::{OracleError, Result};

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn finite_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(OracleError::InvalidArgument(format!("bad step {step}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = f(&x);
        x[i] = point[i] - step;
        let down = f(&x);
        x[i] = point[i];
        for value in [up, down] {
            if !value.is_finite() {
                return Err(OracleError::NonFinite {
                    coordinate: i,
                    value,
                });
            }
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Richardson extrapolation of [`finite_difference`] from steps `step` and
/// `step / 2`; the error is fourth order in `step`.
pub fn richardson_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let coarse = finite_difference(&mut f, point, step)?;
    let fine = finite_difference(&mut f, point, 0.5 * step)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect())
}

/// `|a - b| / max(|a|, |b|)`, and 0 when both are 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Cross-entropy of `μ + σ ξ` with `ξ` held fixed. Deterministic neurons
/// contribute `μ` alone.
pub fn reparameterized_loss(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
    xi: &[f64],
    label: usize,
) -> Result<f64> {
    let y = reparameterized_output(&forward_stats(net, model, x, samples)?, xi);
    Ok(softmax_cross_entropy(&y, label)?.0)
}

fn reparameterized_output(stats: &OutputStats, xi: &[f64]) -> Vec<f64> {
    stats
        .mu
        .iter()
        .zip(&stats.sigma2)
        .zip(xi)
        .map(|((&mu, &s2), &xi)| {
            let sigma = s2.sqrt();
            if sigma < SIGMA_FLOOR {
                mu
            } else {
                mu + sigma * xi
            }
        })
        .collect()
}

/// Analytic and finite-difference gradients of [`reparameterized_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic_fields: Vec<f64>,
    pub numeric_fields: Vec<f64>,
    pub analytic_biases: Vec<f64>,
    pub numeric_biases: Vec<f64>,
}

impl GradientCheck {
    pub fn max_field_error(&self) -> f64 {
        max_error(&self.analytic_fields, &self.numeric_fields)
    }

    pub fn max_bias_error(&self) -> f64 {
        max_error(&self.analytic_biases, &self.numeric_biases)
    }
}

fn max_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Compares the stochastic-rule gradient at fixed `ξ` with extrapolated
/// central differences of the reparameterized loss over every field and bias.
pub fn check_network_gradients(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
    xi: &[f64],
    label: usize,
    step: f64,
) -> Result<GradientCheck> {
    let stats = forward_stats(net, model, x, samples)?;
    let y = reparameterized_output(&stats, xi);
    let (_, grad_y) = softmax_cross_entropy(&y, label)?;
    let forward = ForwardResult {
        y,
        stats: OutputStats {
            xi: Some(xi.to_vec()),
            ..stats
        },
        samples,
    };
    let analytic = stochastic_gradient(&forward, &grad_y, x, net, model)?;

    let (classes, inputs) = (net.classes(), net.inputs());
    let loss_at = |fields: &[f64], biases: &[f64]| {
        SynapseFieldNetwork::new(classes, inputs, fields.to_vec(), biases.to_vec())
            .map_err(OracleError::from)
            .and_then(|n| reparameterized_loss(&n, model, x, samples, xi, label))
            .unwrap_or(f64::NAN)
    };
    let numeric_fields = richardson_difference(|h| loss_at(h, net.biases()), net.fields(), step)?;
    let numeric_biases = richardson_difference(|b| loss_at(net.fields(), b), net.biases(), step)?;
    Ok(GradientCheck {
        analytic_fields: analytic.fields,
        numeric_fields,
        analytic_biases: analytic.biases,
        numeric_biases,
    })
}

/// Gradient of `E_ξ[loss(μ + σ ξ)]` for independent standard normal `ξ_i`,
/// by trapezoidal quadrature on `[-8, 8]` with `nodes` points per neuron.
///
/// The grid is a full tensor product, so keep `classes` small.
pub fn expected_gaussian_gradient(
    net: &SynapseFieldNetwork,
    model: &PassingProbabilityModel,
    x: &[u8],
    samples: u32,
    label: usize,
    nodes: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = net.classes();
    if nodes < 3 || nodes.checked_pow(classes as u32).is_none_or(|n| n > 50_000_000) {
        return Err(OracleError::InvalidArgument(format!(
            "{nodes}^{classes} quadrature points is out of range"
        )));
    }
    let stats = forward_stats(net, model, x, samples)?;
    let width = 16.0 / (nodes - 1) as f64;
    let axis: Vec<(f64, f64)> = (0..nodes)
        .map(|k| {
            let xi = -8.0 + k as f64 * width;
            let end = if k == 0 || k == nodes - 1 { 0.5 } else { 1.0 };
            let w = end * width * (-0.5 * xi * xi).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (xi, w)
        })
        .collect();
    let mut fields = vec![0.0; net.fields().len()];
    let mut biases = vec![0.0; classes];
    let mut index = vec![0usize; classes];
    let mut xi = vec![0.0; classes];
    loop {
        let mut weight = 1.0;
        for (c, &k) in index.iter().enumerate() {
            xi[c] = axis[k].0;
            weight *= axis[k].1;
        }
        let y = reparameterized_output(&stats, &xi);
        let (_, grad_y) = softmax_cross_entropy(&y, label)?;
        let forward = ForwardResult {
            y,
            stats: OutputStats {
                xi: Some(xi.clone()),
                ..stats.clone()
            },
            samples,
        };
        let g = stochastic_gradient(&forward, &grad_y, x, net, model)?;
        for (acc, v) in fields.iter_mut().zip(&g.fields) {
            *acc += weight * v;
        }
        for (acc, v) in biases.iter_mut().zip(&g.biases) {
            *acc += weight * v;
        }
        // odometer over the tensor grid
        let mut c = 0;
        loop {
            if c == classes {
                return Ok((fields, biases));
            }
            index[c] += 1;
            if index[c] < nodes {
                break;
            }
            index[c] = 0;
            c += 1;
        }
    }
}
