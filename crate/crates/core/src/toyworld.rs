//! Synthetic data: the AR(1) Gaussian latent world with exact conditionals,
//! and a moving-shapes pixel-video corpus with four motion classes.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{PixelFrame, PixelVideo};
use crate::denoiser::GaussianWorldSpec;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, seeded, standard_normal, stream};
use crate::tensor::{LatentClip, LatentFrame};

/// Background intensity of shape videos (all channels).
pub const BACKGROUND: f64 = 0.1;
pub const DEFAULT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionClass {
    Right,
    Left,
    Up,
    Down,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] = [
        MotionClass::Right,
        MotionClass::Left,
        MotionClass::Up,
        MotionClass::Down,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::config(format!("motion class id {id} is not in 0..4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Right => "right",
            MotionClass::Left => "left",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
        }
    }

    /// Pixel velocity (dx, dy) per frame; y grows downwards.
    pub fn velocity(self) -> (i64, i64) {
        match self {
            MotionClass::Right => (1, 0),
            MotionClass::Left => (-1, 0),
            MotionClass::Up => (0, -1),
            MotionClass::Down => (0, 1),
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stationary AR(1) clip drawn from `rng`.
pub fn sample_ar1_with<R: Rng + ?Sized>(
    world: &GaussianWorldSpec,
    length: usize,
    rng: &mut R,
) -> LatentClip {
    let shape = world.frame_shape;
    let mut clip = LatentClip::zeros(shape, length);
    let sd = world.sigma2.sqrt();
    let innov = (1.0 - world.rho * world.rho).sqrt() * sd;
    let n = shape.len();
    let data = clip.data_mut();
    for k in 0..length {
        for i in 0..n {
            let e = standard_normal(rng);
            data[k * n + i] = if k == 0 {
                world.mu + sd * e
            } else {
                world.mu + world.rho * (data[(k - 1) * n + i] - world.mu) + innov * e
            };
        }
    }
    clip
}

pub fn sample_ar1_clip(world: &GaussianWorldSpec, length: usize, seed: u64) -> Result<LatentClip> {
    world.validate()?;
    if length == 0 {
        return Err(Error::config("AR(1) clip length must be at least 1"));
    }
    Ok(sample_ar1_with(world, length, &mut seeded(seed)))
}

/// Gaussian law of the next frame: per-coordinate means and a shared
/// isotropic variance.
#[derive(Debug, Clone, PartialEq)]
pub struct NextFrameLaw {
    pub mean: LatentFrame,
    pub variance: f64,
}

fn check_observed(world: &GaussianWorldSpec, observed: &[LatentFrame]) -> Result<()> {
    world.validate()?;
    if observed.is_empty() {
        return Err(Error::config("conditional needs at least one observed frame"));
    }
    if let Some(k) = observed.iter().position(|f| f.shape() != world.frame_shape) {
        return Err(Error::shape(format!(
            "observed frame {k} is {}, world is {}",
            observed[k].shape(),
            world.frame_shape
        )));
    }
    Ok(())
}

/// Markov form: only the last observation matters.
pub fn ar1_conditional(world: &GaussianWorldSpec, observed: &[LatentFrame]) -> Result<NextFrameLaw> {
    check_observed(world, observed)?;
    let last = observed.last().unwrap();
    let data = last
        .data()
        .iter()
        .map(|z| world.mu + world.rho * (z - world.mu))
        .collect();
    Ok(NextFrameLaw {
        mean: LatentFrame::new(world.frame_shape, data)?,
        variance: (1.0 - world.rho * world.rho) * world.sigma2,
    })
}

/// Joint-Gaussian conditional of frame m given frames 0..m by a dense solve
/// over the (m+1)-frame covariance, without using the Markov property.
pub fn ar1_conditional_dense(
    world: &GaussianWorldSpec,
    observed: &[LatentFrame],
) -> Result<NextFrameLaw> {
    check_observed(world, observed)?;
    let m = observed.len();
    let joint = world.frame_covariance(m + 1);
    let obs_cov = joint.view((0, 0), (m, m)).into_owned();
    let cross = DVector::from_fn(m, |i, _| joint[(m, i)]);
    let chol = obs_cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("observed-frame covariance is not positive definite".into()))?;
    let weights = chol.solve(&cross);
    let variance = joint[(m, m)] - weights.dot(&cross);
    let n = world.frame_dim();
    let mut mean = vec![world.mu; n];
    for (k, frame) in observed.iter().enumerate() {
        for (out, z) in mean.iter_mut().zip(frame.data()) {
            *out += weights[k] * (z - world.mu);
        }
    }
    Ok(NextFrameLaw {
        mean: LatentFrame::new(world.frame_shape, mean)?,
        variance,
    })
}

/// Dense conditional weights, exposed for tests that only need the linear map.
pub fn ar1_conditional_weights(world: &GaussianWorldSpec, observed: usize) -> Result<Vec<f64>> {
    let joint: DMatrix<f64> = world.frame_covariance(observed + 1);
    let obs_cov = joint.view((0, 0), (observed, observed)).into_owned();
    let cross = DVector::from_fn(observed, |i, _| joint[(observed, i)]);
    let chol = obs_cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("observed-frame covariance is not positive definite".into()))?;
    Ok(chol.solve(&cross).iter().copied().collect())
}

/// A rendered moving-square clip with its ground-truth trajectory.
#[derive(Debug, Clone)]
pub struct ShapeVideo {
    pub video: PixelVideo,
    pub class: MotionClass,
    /// Top-left corner of the square in every frame.
    pub positions: Vec<(usize, usize)>,
    pub side: usize,
}

/// Position after `steps` unit moves from `start` inside `[0, span]`,
/// bouncing off both ends.
fn reflect(start: usize, velocity: i64, steps: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span as i64;
    let raw = (start as i64 + velocity * steps as i64).rem_euclid(period);
    (if raw > span as i64 { period - raw } else { raw }) as usize
}

/// Renders a filled square of side `size / 4` moving one pixel per frame in
/// the class direction, bouncing off the walls, on a dark background.
///
/// The seed fixes the colour and the start position. Along the motion axis
/// the start lies far enough upstream that the square does not reach a wall
/// within `frames` frames whenever the frame has room for that; longer clips
/// bounce. Clips sharing a seed share their colour.
pub fn gen_shape_video(class: MotionClass, seed: u64, frames: usize, size: usize) -> Result<ShapeVideo> {
    if size < 16 {
        return Err(Error::config(format!("shape video size {size} must be at least 16")));
    }
    if frames < 2 {
        return Err(Error::config(format!("shape video needs at least 2 frames, got {frames}")));
    }
    let side = size / 4;
    let span = size - side;
    let mut rng = seeded(seed);
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let travel = (frames - 1).min(span);
    let along = rng.random_range(0..=span - travel);
    let across = rng.random_range(0..=span);
    let (vx, vy) = class.velocity();
    let upstream = |v: i64| if v < 0 { along + travel } else { along };
    let (x0, y0) = if vx != 0 { (upstream(vx), across) } else { (across, upstream(vy)) };

    let mut positions = Vec::with_capacity(frames);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let (px, py) = (reflect(x0, vx, k, span), reflect(y0, vy, k, span));
        positions.push((px, py));
        let mut data = vec![BACKGROUND; size * size * 3];
        for y in py..py + side {
            for x in px..px + side {
                data[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
        out.push(PixelFrame::new(size, size, data)?);
    }
    Ok(ShapeVideo {
        video: PixelVideo::new(out)?,
        class,
        positions,
        side,
    })
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Clip directory relative to the corpus root.
    pub path: String,
    /// Motion class id; absent for AR(1) clips.
    pub class: Option<u32>,
    /// Clips sharing a subject share the square colour.
    pub subject: u32,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Corpus plan for `count` shape clips: clip i has class i mod 4 and subject
/// i / 4, and the four clips of a subject share a render seed (so a colour).
pub fn shape_corpus_plan(count: usize, seed: u64) -> Vec<CorpusEntry> {
    (0..count)
        .map(|i| {
            let subject = (i / 4) as u32;
            CorpusEntry {
                path: format!("clip_{i:05}"),
                class: Some((i % 4) as u32),
                subject,
                seed: stream(seed, u64::from(subject)).random(),
            }
        })
        .collect()
}

pub fn write_manifest<W: Write>(entries: &[CorpusEntry], mut out: W) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R, path: &Path) -> Result<Vec<CorpusEntry>> {
    let mut entries = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_manifest(corpus: &Path) -> Result<Vec<CorpusEntry>> {
    let path = corpus.join(MANIFEST_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_manifest(std::io::BufReader::new(file), &path)
}

/// Draws `count` AR(1) clips, one independent stream per clip.
pub fn ar1_corpus(world: &GaussianWorldSpec, count: usize, length: usize, seed: u64) -> Result<Vec<LatentClip>> {
    world.validate()?;
    if length == 0 {
        return Err(Error::config("AR(1) clip length must be at least 1"));
    }
    Ok((0..count)
        .map(|i| sample_ar1_with(world, length, &mut stream(seed, i as u64)))
        .collect())
}

/// Fills `out` with draws from the next-frame law.
pub fn sample_next_frame<R: Rng + ?Sized>(law: &NextFrameLaw, rng: &mut R, out: &mut [f64]) {
    fill_standard_normal(rng, out);
    let sd = law.variance.sqrt();
    for (o, m) in out.iter_mut().zip(law.mean.data()) {
        *o = m + sd * *o;
    }
}
