//! Synthetic Kerr hysteresis traces and the step-counting detector that
//! turns a trace into a synapse bit.
//!
//! A wall that passes the notch switches the wire in one step. A pinned
//! wall gives two steps: part of the signal changes at the notch field and
//! the rest at the higher depinning field.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Raw-signal steps below this fraction of the total change are noise.
pub const STEP_THRESHOLD: f64 = 0.24;

/// Points per synthesized trace.
pub const TRACE_POINTS: usize = 240;

/// Field sweep of a synthesized trace in mT.
pub const SWEEP_MT: (f64, f64) = (0.0, 12.0);

/// Width scale of one switching step in mT.
const STEP_WIDTH_MT: f64 = 0.08;

/// Half-width of the moving average applied before differentiating.
const SMOOTH_HALF_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KerrTrace {
    #[serde(rename = "field_mT")]
    pub field_axis: Vec<f64>,
    pub signal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("trace has {0} samples, need at least 16")]
    TooShort(usize),
    #[error("field axis and signal lengths differ")]
    Shape,
    #[error("no transition: total signal change {0:.3e} is within the noise")]
    Flat(f64),
}

fn smooth_step(h: f64, centre: f64) -> f64 {
    1.0 / (1.0 + (-(h - centre) / STEP_WIDTH_MT).exp())
}

/// Builds one hysteresis loop. A passed wall switches fully at
/// `notch_field`; a pinned one splits the change between `notch_field` and
/// `depin_field` with each part between 40% and 60%.
///
/// `noise_amplitude` is the standard deviation of additive Gaussian noise.
pub fn synthesize_kerr_trace<R: Rng + ?Sized>(
    passed: bool,
    depin_field: f64,
    notch_field: f64,
    noise_amplitude: f64,
    rng: &mut R,
) -> KerrTrace {
    let (lo, hi) = SWEEP_MT;
    let field_axis: Vec<f64> = (0..TRACE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (TRACE_POINTS - 1) as f64)
        .collect();
    let first = if passed {
        1.0
    } else {
        rng.random_range(0.4..=0.6)
    };
    let noise = Normal::new(0.0, noise_amplitude.abs()).expect("finite noise amplitude");
    let signal = field_axis
        .iter()
        .map(|&h| {
            let mut s = first * smooth_step(h, notch_field);
            if !passed {
                s += (1.0 - first) * smooth_step(h, depin_field);
            }
            if noise_amplitude > 0.0 {
                s += noise.sample(rng);
            }
            s
        })
        .collect();
    KerrTrace { field_axis, signal }
}

fn moving_average(signal: &[f64], half: usize) -> Vec<f64> {
    let n = signal.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            signal[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Local maxima of `d`, highest first, at least `gap` samples apart.
fn peaks(d: &[f64], gap: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (1..d.len().saturating_sub(1))
        .filter(|&i| d[i] > 0.0 && d[i] >= d[i - 1] && d[i] >= d[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in candidates {
        if kept.iter().all(|&k| k.abs_diff(i) >= gap) {
            kept.push(i);
        }
    }
    kept
}

/// Returns 1 if the trace shows the wall passing the notch and 0 if it was
/// pinned.
///
/// The smoothed signal is differentiated and its two largest peaks located.
/// The raw signal is split at the midpoint between them; if both resulting
/// steps exceed [`STEP_THRESHOLD`] of the total change the wall was pinned.
pub fn detect_pinning(trace: &KerrTrace) -> Result<u8, TraceError> {
    let s = &trace.signal;
    let n = s.len();
    if trace.field_axis.len() != n {
        return Err(TraceError::Shape);
    }
    if n < 16 {
        return Err(TraceError::TooShort(n));
    }
    let edge = (n / 16).max(3);
    let start = mean(&s[..edge]);
    let end = mean(&s[n - edge..]);
    let total = end - start;

    // robust noise level from first differences
    let mut diffs: Vec<f64> = s.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let noise = median(&mut diffs) / (0.6745 * std::f64::consts::SQRT_2);
    if !total.is_finite() || total <= 1e-9 || total <= 6.0 * noise {
        return Err(TraceError::Flat(total));
    }

    let smooth = moving_average(s, SMOOTH_HALF_WIDTH);
    let derivative: Vec<f64> = (0..n)
        .map(|i| {
            let a = smooth[i.saturating_sub(1)];
            let b = smooth[(i + 1).min(n - 1)];
            b - a
        })
        .collect();
    let found = peaks(&derivative, 2 * SMOOTH_HALF_WIDTH + 1);
    if found.len() < 2 {
        return Ok(1);
    }
    let (a, b) = (found[0].min(found[1]), found[0].max(found[1]));
    let mid = (a + b) / 2;
    let window = &s[mid.saturating_sub(2)..(mid + 3).min(n)];
    let plateau = mean(window);
    let first = plateau - start;
    let second = end - plateau;
    let pinned = first > STEP_THRESHOLD * total && second > STEP_THRESHOLD * total;
    Ok(u8::from(!pinned))
}

/// Number of switching steps in a noise-free trace.
pub fn count_steps(trace: &KerrTrace) -> usize {
    let d: Vec<f64> = trace.signal.windows(2).map(|w| w[1] - w[0]).collect();
    peaks(&d, 2).into_iter().filter(|&i| d[i] > 1e-3).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stochsyn_core::rng::stream;

    fn trace_from_steps(steps: &[(f64, f64)]) -> KerrTrace {
        let field_axis: Vec<f64> = (0..TRACE_POINTS).map(|i| i as f64 * 0.05).collect();
        let signal = field_axis
            .iter()
            .map(|&h| steps.iter().map(|&(c, a)| a * smooth_step(h, c)).sum())
            .collect();
        KerrTrace { field_axis, signal }
    }

    #[test]
    fn clean_single_step_passes() {
        assert_eq!(detect_pinning(&trace_from_steps(&[(4.0, 1.0)])).unwrap(), 1);
    }

    #[test]
    fn clean_double_step_is_pinned() {
        assert_eq!(detect_pinning(&trace_from_steps(&[(4.0, 0.6), (7.5, 0.4)])).unwrap(), 0);
    }

    #[test]
    fn small_second_step_is_noise() {
        assert_eq!(detect_pinning(&trace_from_steps(&[(4.0, 0.9), (7.5, 0.1)])).unwrap(), 1);
        assert_eq!(detect_pinning(&trace_from_steps(&[(4.0, 0.8), (7.5, 0.2)])).unwrap(), 1);
        assert_eq!(detect_pinning(&trace_from_steps(&[(4.0, 0.7), (7.5, 0.3)])).unwrap(), 0);
    }

    #[test]
    fn flat_and_short_traces_are_errors() {
        let flat = KerrTrace {
            field_axis: vec![0.0; 32],
            signal: vec![0.5; 32],
        };
        assert!(matches!(detect_pinning(&flat), Err(TraceError::Flat(_))));
        let short = trace_from_steps(&[(4.0, 1.0)]);
        let short = KerrTrace {
            field_axis: short.field_axis[..10].to_vec(),
            signal: short.signal[..10].to_vec(),
        };
        assert_eq!(detect_pinning(&short), Err(TraceError::TooShort(10)));
    }

    #[test]
    fn synthesized_traces_have_the_right_step_count() {
        let mut rng = stream(1, "test/trace");
        let passed = synthesize_kerr_trace(true, 7.0, 4.0, 0.0, &mut rng);
        assert_eq!(count_steps(&passed), 1);
        let pinned = synthesize_kerr_trace(false, 7.0, 4.0, 0.0, &mut rng);
        assert_eq!(count_steps(&pinned), 2);
        let mid = pinned.signal[TRACE_POINTS * 5 / 12 + 10];
        assert!((0.4..=0.6).contains(&mid), "first step {mid}");
        assert!((pinned.signal[TRACE_POINTS - 1] - 1.0).abs() < 1e-9);
        assert!(pinned.signal.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn noisy_traces_are_classified() {
        let mut rng = stream(2, "test/trace");
        for passed in [true, false] {
            for _ in 0..200 {
                let t = synthesize_kerr_trace(passed, 7.0, 4.0, 0.05, &mut rng);
                assert_eq!(detect_pinning(&t).unwrap(), u8::from(passed));
            }
        }
    }
}
