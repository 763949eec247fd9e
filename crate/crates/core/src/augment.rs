//! Augmented views for positive pairs.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeding::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Jitter,
    TimeMask,
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jitter" => Ok(AugmentKind::Jitter),
            "time_mask" => Ok(AugmentKind::TimeMask),
            other => Err(Error::config(format!(
                "unknown augmentation `{other}` (jitter|time_mask)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Noise amplitude for jitter.
    pub epsilon: f64,
    /// Fraction of time steps zeroed by time masking.
    pub mask_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            kind: AugmentKind::TimeMask,
            epsilon: 0.1,
            mask_fraction: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.epsilon >= 0.0) {
            bad.push(format!(
                "augment.epsilon must be ≥ 0 (got {})",
                self.epsilon
            ));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            bad.push(format!(
                "augment.mask_fraction must lie in [0, 1) (got {})",
                self.mask_fraction
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }
}

/// `x + ε·g` with `g` iid standard normal.
pub fn jitter(x: &Tensor, epsilon: f64, rng: &mut Rng) -> Tensor {
    let mut out = x.clone();
    out.grad = None;
    for v in out.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + epsilon * g) as f32;
    }
    out
}

/// Zeroes exactly `round(fraction·T)` whole time steps, across all channels.
pub fn time_mask(x: &Tensor, fraction: f64, rng: &mut Rng) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let k = ((fraction * t as f64).round() as usize).min(t);
    let mut out = x.clone();
    out.grad = None;
    for row in index::sample(rng, t, k) {
        out.data_mut()[row * d..(row + 1) * d].fill(0.0);
    }
    out
}

pub fn make_view(
    x: &TimeSeriesSample,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<TimeSeriesSample> {
    cfg.validate()?;
    let values = match cfg.kind {
        AugmentKind::Jitter => jitter(&x.values, cfg.epsilon, rng),
        AugmentKind::TimeMask => time_mask(&x.values, cfg.mask_fraction, rng),
    };
    Ok(TimeSeriesSample {
        values,
        label: x.label,
    })
}
