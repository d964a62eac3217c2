use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConditionLabel, MicroDenoiser};
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, seeded};
use crate::schedule::{jump_into, NoiseSchedule};
use crate::tensor::{LatentClip, LatentFrame};

/// One labelled latent video; training windows are cut from it.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub frames: Vec<LatentFrame>,
    pub label: u32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub clips: Vec<TrainingClip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub null_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            null_prob: 0.1,
            seed: 0,
        }
    }
}

/// Noise-prediction training with plain SGD.
///
/// Every sample draws a window of `clip_frames` consecutive latents, a step t
/// uniformly from 1..=T and unit-Gaussian ε, forms z_t by the single-jump
/// forward process, and swaps its label for ∅ with probability `null_prob`.
/// Returns the per-step mean squared error (averaged over the batch).
pub fn train_micro(
    model: &mut MicroDenoiser,
    data: &TrainingSet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let frames = model.config().frames;
    let shape = model.config().shape;
    if data.clips.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if !(0.0..1.0).contains(&cfg.null_prob) {
        return Err(Error::config(format!(
            "null_prob = {} must lie in [0, 1)",
            cfg.null_prob
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch_size and lr must be positive"));
    }
    if let Some(bad) = data
        .clips
        .iter()
        .position(|c| c.frames.len() < frames || c.frames.iter().any(|f| f.shape() != shape))
    {
        return Err(Error::config(format!(
            "training clip {bad} is shorter than {frames} frames or not {shape}"
        )));
    }

    let mut rng = seeded(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; model.param_count()];
    let mut z0 = LatentClip::zeros(shape, frames);
    let mut noise = LatentClip::zeros(shape, frames);
    let mut z_t = LatentClip::zeros(shape, frames);
    let scale = 1.0 / cfg.batch_size as f64;
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let clip = &data.clips[rng.random_range(0..data.clips.len())];
            let start = rng.random_range(0..=clip.frames.len() - frames);
            for k in 0..frames {
                z0.frame_mut(k).copy_from_slice(clip.frames[start + k].data());
            }
            let t = rng.random_range(1..=sched.steps());
            fill_standard_normal(&mut rng, noise.data_mut());
            jump_into(z0.data(), t, noise.data(), sched, z_t.data_mut());
            let y = if rng.random::<f64>() < cfg.null_prob {
                ConditionLabel::Null
            } else {
                ConditionLabel::Class(clip.label)
            };
            loss += model.loss_and_grad(&z_t, t, y, noise.data(), &mut grad, scale)? * scale;
        }
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.lr * g;
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, v) in trace.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= trace[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::MicroConfig;
    use crate::schedule::make_linear_schedule;
    use crate::tensor::FrameShape;

    fn toy_set(cfg: &MicroConfig, videos: usize) -> TrainingSet {
        let mut rng = seeded(99);
        let clips = (0..videos)
            .map(|i| {
                let frames = (0..cfg.frames + 2)
                    .map(|_| {
                        let mut f = LatentFrame::zeros(cfg.shape);
                        fill_standard_normal(&mut rng, f.data_mut());
                        f
                    })
                    .collect();
                TrainingClip {
                    frames,
                    label: (i % cfg.classes) as u32,
                }
            })
            .collect();
        TrainingSet { clips }
    }

    fn small_cfg() -> MicroConfig {
        MicroConfig {
            shape: FrameShape::new(4, 4, 3),
            frames: 3,
            hidden: 4,
            time_dim: 4,
            classes: 4,
        }
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let cfg = small_cfg();
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut model = MicroDenoiser::new(cfg, 4).unwrap();
        let before = model.clone();
        let trace = train_micro(
            &mut model,
            &toy_set(&cfg, 3),
            &sched,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn untrained_loss_is_unit_per_element() {
        // the zero head predicts 0, so the loss is the mean of ε² (≈ 1)
        let cfg = small_cfg();
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut model = MicroDenoiser::new(cfg, 4).unwrap();
        let trace = train_micro(
            &mut model,
            &toy_set(&cfg, 3),
            &sched,
            &TrainConfig {
                steps: 1,
                batch_size: 400,
                lr: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        // 400 × 144 unit-Gaussian squares: sd of the mean ≈ √(2/57600) ≈ 0.006
        assert!((trace[0] - 1.0).abs() < 0.03, "{}", trace[0]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = small_cfg();
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut model = MicroDenoiser::new(cfg, 4).unwrap();
        let empty = TrainingSet::default();
        assert!(matches!(
            train_micro(&mut model, &empty, &sched, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig {
            null_prob: 1.0,
            ..Default::default()
        };
        assert!(train_micro(&mut model, &toy_set(&cfg, 2), &sched, &bad).is_err());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
