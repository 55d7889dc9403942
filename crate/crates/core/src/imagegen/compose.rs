use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::{Error, Result, SplitMix64};

/// Envelope stacking: pattern opacity `alpha`, transparency/contrast
/// `beta`, camera noise `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl Default for ComposeParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.7,
            sigma: 0.02,
        }
    }
}

impl ComposeParams {
    pub fn identity() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
            sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1]", self.beta)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma {} is negative", self.sigma)));
        }
        Ok(())
    }
}

/// Stacks `pattern` over `text` and photographs the result through the
/// envelope:
///
/// `stacked = min(text, 1 − α(1 − pattern))`,
/// `out = clamp(0.5 + β(stacked − 0.5) + σ·g, 0, 1)`
///
/// with `g` drawn per pixel, row-major, from `SplitMix64(seed)`.
pub fn compose_sample(
    text: &GrayImage,
    pattern: &GrayImage,
    p: &ComposeParams,
    seed: u64,
) -> Result<GrayImage> {
    text.check_dims(pattern)?;
    p.validate()?;
    let mut rng = SplitMix64::new(seed);
    let pixels = text
        .pixels()
        .iter()
        .zip(pattern.pixels())
        .map(|(&t, &q)| {
            let stacked = (t as f64).min(1.0 - p.alpha * (1.0 - q as f64));
            let noise = if p.sigma > 0.0 {
                p.sigma * rng.next_normal()
            } else {
                0.0
            };
            (0.5 + p.beta * (stacked - 0.5) + noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    GrayImage::new(text.width(), text.height(), pixels)
}
