//! Single domain-wall synapse: calibrated passing probability and sampling.
//!
//! A synapse with propagation field `h` and input `x` outputs 1 with
//! probability `f(h) * x`, where
//!
//! ```text
//! f(h) = d + (1 - d) / (1 + exp(-delta * (h - h0)))
//! ```
//!
//! Fields are in mT. A zero input never touches the random stream.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibrated sigmoid fit of the notch passing probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassingProbabilityModel {
    /// Low-field floor probability.
    pub d: f64,
    /// Field centre in mT.
    #[serde(rename = "h0_mT")]
    pub h0: f64,
    /// Steepness in mT⁻¹.
    #[serde(rename = "delta_per_mT")]
    pub delta: f64,
}

impl Default for PassingProbabilityModel {
    fn default() -> Self {
        Self {
            d: 0.0219,
            h0: 4.63,
            delta: 2.73,
        }
    }
}

/// Field window in which the physical device operates. Leaving it only
/// produces a warning; fields are never projected back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalRange {
    pub min_mt: f64,
    pub max_mt: f64,
}

impl Default for PhysicalRange {
    fn default() -> Self {
        // Above ~10.7 mT walls nucleate without an input pulse.
        Self {
            min_mt: 0.0,
            max_mt: 10.0,
        }
    }
}

impl PhysicalRange {
    pub fn contains(&self, h: f64) -> bool {
        (self.min_mt..=self.max_mt).contains(&h)
    }

    /// Counts fields outside the range and logs a warning if there are any.
    pub fn check(&self, fields: &[f64]) -> usize {
        let outside = fields.iter().filter(|h| !self.contains(**h)).count();
        if outside > 0 {
            log::warn!(
                "{outside} of {} fields lie outside the physical range [{}, {}] mT",
                fields.len(),
                self.min_mt,
                self.max_mt
            );
        }
        outside
    }
}

/// One measured synapse output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SynapseSample(u8);

impl SynapseSample {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(1);

    pub fn value(self) -> u8 {
        self.0
    }
}

impl PassingProbabilityModel {
    pub fn new(d: f64, h0: f64, delta: f64) -> Result<Self> {
        let model = Self { d, h0, delta };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.h0.is_finite() && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(
                "calibration constants must be finite".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.d) {
            return Err(Error::InvalidArgument(format!(
                "floor probability d = {} must satisfy 0 <= d < 0.5",
                self.d
            )));
        }
        if self.delta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "steepness delta = {} must be positive",
                self.delta
            )));
        }
        Ok(())
    }

    #[inline]
    fn logistic(&self, h: f64) -> f64 {
        1.0 / (1.0 + (-self.delta * (h - self.h0)).exp())
    }

    /// `f(h)` without the finiteness check, for hot loops over validated fields.
    #[inline]
    pub fn probability_unchecked(&self, h: f64) -> f64 {
        self.d + (1.0 - self.d) * self.logistic(h)
    }

    /// `f'(h)` without the finiteness check.
    #[inline]
    pub fn derivative_unchecked(&self, h: f64) -> f64 {
        // s(1 - s) = e / (1 + e)^2 with e = exp(-|z|); no cancellation in either tail
        let e = (-(self.delta * (h - self.h0)).abs()).exp();
        (1.0 - self.d) * self.delta * e / ((1.0 + e) * (1.0 + e))
    }

    /// Probability that a wall injected at field `h` passes the notch.
    pub fn passing_probability(&self, h: f64) -> Result<f64> {
        check_field(h)?;
        Ok(self.probability_unchecked(h))
    }

    /// `df/dh` in mT⁻¹.
    pub fn passing_probability_derivative(&self, h: f64) -> Result<f64> {
        check_field(h)?;
        Ok(self.derivative_unchecked(h))
    }

    /// Inverse of [`Self::passing_probability`] on `(d, 1)`.
    pub fn field_for_probability(&self, p: f64) -> Result<f64> {
        if !(p > self.d && p < 1.0) {
            return Err(Error::UnreachableProbability { p, floor: self.d });
        }
        Ok(self.h0 + ((p - self.d) / (1.0 - p)).ln() / self.delta)
    }

    /// One measurement of the synapse (`x` must be 0 or 1).
    pub fn sample_synapse<R: Rng + ?Sized>(
        &self,
        h: f64,
        x: u8,
        rng: &mut R,
    ) -> Result<SynapseSample> {
        check_input(x)?;
        check_field(h)?;
        if x == 0 {
            return Ok(SynapseSample::ZERO);
        }
        Ok(if bernoulli(self.probability_unchecked(h), rng) {
            SynapseSample::ONE
        } else {
            SynapseSample::ZERO
        })
    }

    /// Mean of `samples` measurements of one synapse, drawn as a single
    /// binomial count. The result lies on the grid `{0, 1/K, ..., 1}`.
    pub fn sample_mean_weight<R: Rng + ?Sized>(
        &self,
        h: f64,
        x: u8,
        samples: u32,
        rng: &mut R,
    ) -> Result<f64> {
        check_input(x)?;
        check_field(h)?;
        check_samples(samples)?;
        if x == 0 {
            return Ok(0.0);
        }
        let count = binomial_count(self.probability_unchecked(h), samples, rng);
        Ok(f64::from(count) / f64::from(samples))
    }

    /// Same as [`Self::sample_mean_weight`] but with `samples` explicit
    /// Bernoulli draws.
    pub fn sample_mean_weight_bernoulli<R: Rng + ?Sized>(
        &self,
        h: f64,
        x: u8,
        samples: u32,
        rng: &mut R,
    ) -> Result<f64> {
        check_input(x)?;
        check_field(h)?;
        check_samples(samples)?;
        if x == 0 {
            return Ok(0.0);
        }
        let count = bernoulli_count(self.probability_unchecked(h), samples, rng);
        Ok(f64::from(count) / f64::from(samples))
    }
}

fn check_field(h: f64) -> Result<()> {
    if h.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("field {h} mT is not finite")))
    }
}

fn check_input(x: u8) -> Result<()> {
    if x <= 1 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("input {x} is not a bit")))
    }
}

pub(crate) fn check_samples(samples: u32) -> Result<()> {
    if samples >= 1 {
        Ok(())
    } else {
        Err(Error::InvalidArgument("sample count K must be >= 1".into()))
    }
}

/// One Bernoulli draw: consumes exactly one `f64` from the stream.
#[inline]
pub fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// Writes `out.len()` Bernoulli bits, one stream value per bit.
///
/// This is the literal measurement sequence the device emulator produces,
/// so any backend that wants to replay the emulator stream must use it.
pub fn sample_bits<R: Rng + ?Sized>(p: f64, rng: &mut R, out: &mut [u8]) {
    for bit in out {
        *bit = u8::from(bernoulli(p, rng));
    }
}

/// Number of passes in `samples` explicit Bernoulli draws.
pub fn bernoulli_count<R: Rng + ?Sized>(p: f64, samples: u32, rng: &mut R) -> u32 {
    (0..samples).map(|_| u32::from(bernoulli(p, rng))).sum()
}

/// Number of passes in `samples` trials drawn as one binomial variate.
/// For a single sample this is the same single Bernoulli draw.
pub fn binomial_count<R: Rng + ?Sized>(p: f64, samples: u32, rng: &mut R) -> u32 {
    if samples == 1 {
        return u32::from(bernoulli(p, rng));
    }
    if p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return samples;
    }
    Binomial::new(u64::from(samples), p)
        .expect("p lies in (0, 1)")
        .sample(rng) as u32
}
