//! Noise predictors ε_θ(ẑ_t, t, y).
//!
//! [`AnalyticDenoiser`] is the Bayes-optimal predictor for a Gaussian AR(1)
//! latent world and serves as the oracle for every sampler test.
//! [`MicroDenoiser`] is a small trainable spatio-temporal network for the
//! moving-shapes world.

mod analytic;
mod micro;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use analytic::{analytic_denoise, AnalyticDenoiser, GaussianWorldSpec};
pub use micro::{MicroConfig, MicroDenoiser, ParamTensor};
pub use train::{smooth, train_micro, TrainConfig, TrainingClip, TrainingSet};

use crate::error::Result;
use crate::schedule::cfg_combine;
use crate::tensor::{FrameShape, LatentClip};

/// Condition fed to the denoiser: a class id or the null label ∅.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditionLabel {
    Class(u32),
    Null,
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionLabel::Class(c) => write!(f, "{c}"),
            ConditionLabel::Null => f.write_str("null"),
        }
    }
}

pub trait NoisePredictor: Sync {
    /// Short identifier recorded in run manifests.
    fn id(&self) -> String;

    fn frame_shape(&self) -> FrameShape;

    /// Number of frames per clip the predictor was built for.
    fn clip_frames(&self) -> usize;

    /// Whether the prediction depends on the label at all. Guidance is a
    /// no-op for unconditional predictors and costs a single evaluation.
    fn is_conditional(&self) -> bool;

    fn predict(&self, z_t: &LatentClip, t: usize, y: ConditionLabel) -> Result<LatentClip>;
}

/// Guided prediction plus the number of raw denoiser evaluations it took.
pub fn guided_predict<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    z_t: &LatentClip,
    t: usize,
    y: ConditionLabel,
    g: f64,
) -> Result<(LatentClip, usize)> {
    if !denoiser.is_conditional() || g == 1.0 || y == ConditionLabel::Null {
        return Ok((denoiser.predict(z_t, t, y)?, 1));
    }
    let uncond = denoiser.predict(z_t, t, ConditionLabel::Null)?;
    if g == 0.0 {
        return Ok((uncond, 1));
    }
    let cond = denoiser.predict(z_t, t, y)?;
    let combined = cfg_combine(uncond.data(), cond.data(), g)?;
    let out = LatentClip::from_data(z_t.shape(), z_t.frames(), combined)?.with_step(t);
    Ok((out, 2))
}
