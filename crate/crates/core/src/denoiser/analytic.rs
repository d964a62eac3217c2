use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ConditionLabel, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{FrameShape, LatentClip};

/// Stationary AR(1) Gaussian latent world.
///
/// Every latent coordinate follows its own independent AR(1) process across
/// the frame axis with mean `mu`, variance `sigma2` and lag-one correlation
/// `rho`, so the prior of a clip of F frames is N(μ·1, Σ ⊗ I) with
/// Σ_ij = σ²·ρ^|i−j|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianWorldSpec {
    pub frame_shape: FrameShape,
    pub rho: f64,
    pub sigma2: f64,
    pub mu: f64,
}

impl GaussianWorldSpec {
    pub fn new(frame_shape: FrameShape, rho: f64, sigma2: f64, mu: f64) -> Result<Self> {
        let spec = Self {
            frame_shape,
            rho,
            sigma2,
            mu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::config(format!("world rho = {} must satisfy |rho| < 1", self.rho)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config(format!("world sigma2 = {} must be positive", self.sigma2)));
        }
        if !self.mu.is_finite() {
            return Err(Error::config("world mu must be finite"));
        }
        if self.frame_shape.is_empty() {
            return Err(Error::config("world frame shape must be non-empty"));
        }
        Ok(())
    }

    /// Latent dimensionality per frame.
    pub fn frame_dim(&self) -> usize {
        self.frame_shape.len()
    }

    /// Frame-axis covariance Σ for a clip of `frames` frames.
    pub fn frame_covariance(&self, frames: usize) -> DMatrix<f64> {
        DMatrix::from_fn(frames, frames, |i, j| {
            self.sigma2 * self.rho.powi(i.abs_diff(j) as i32)
        })
    }
}

impl fmt::Display for GaussianWorldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rho={},sigma2={},mu={},shape={}",
            self.rho, self.sigma2, self.mu, self.frame_shape
        )
    }
}

/// Parses `rho=0.9,sigma2=1,mu=0,shape=8x8x3`; omitted keys keep their defaults
/// (rho 0.9, sigma2 1, mu 0, shape 8x8x3).
impl FromStr for GaussianWorldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = GaussianWorldSpec {
            frame_shape: FrameShape::new(8, 8, 3),
            rho: 0.9,
            sigma2: 1.0,
            mu: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("world spec entry '{part}' is not key=value")))?;
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("world spec {key}: '{value}' is not a number")))
            };
            match key {
                "rho" => spec.rho = num()?,
                "sigma2" => spec.sigma2 = num()?,
                "mu" => spec.mu = num()?,
                "shape" => spec.frame_shape = parse_shape(value)?,
                _ => return Err(Error::config(format!("unknown world spec key '{key}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_shape(value: &str) -> Result<FrameShape> {
    let dims: Vec<usize> = value
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("shape '{value}' must look like HxWxC")))?;
    match dims[..] {
        [h, w, c] => Ok(FrameShape::new(h, w, c)),
        _ => Err(Error::config(format!("shape '{value}' must look like HxWxC"))),
    }
}

/// Per-step linear maps of the Bayes-optimal noise predictor.
///
/// With C_t = ᾱ_t·Σ + (1−ᾱ_t)·I the posterior mean of the clean clip is
/// m = μ + √ᾱ_t·Σ·C_t⁻¹·(z − √ᾱ_t·μ), and substituting it into
/// ε̂ = (z − √ᾱ_t·m)/√(1−ᾱ_t) collapses to ε̂ = √(1−ᾱ_t)·C_t⁻¹·(z − √ᾱ_t·μ).
/// The collapsed form is what gets applied; it stays well conditioned as
/// ᾱ_t → 1 where the two-stage form cancels catastrophically.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    world: GaussianWorldSpec,
    frames: usize,
    alpha_bars: Vec<f64>,
    // eps_maps[t - 1] is row-major F×F
    eps_maps: Vec<Vec<f64>>,
}

impl AnalyticDenoiser {
    pub fn new(world: GaussianWorldSpec, sched: &NoiseSchedule, frames: usize) -> Result<Self> {
        world.validate()?;
        if frames == 0 {
            return Err(Error::config("analytic denoiser needs at least one frame"));
        }
        let sigma = world.frame_covariance(frames);
        let mut eps_maps = Vec::with_capacity(sched.steps());
        for t in 1..=sched.steps() {
            let ab = sched.alpha_bar(t);
            let inv = noisy_covariance_inverse(&sigma, ab)?;
            let scaled = inv * (1.0 - ab).sqrt();
            eps_maps.push(row_major(&scaled));
        }
        Ok(Self {
            world,
            frames,
            alpha_bars: sched.alpha_bars().to_vec(),
            eps_maps,
        })
    }

    pub fn world(&self) -> &GaussianWorldSpec {
        &self.world
    }

    /// Frame-axis matrix E_t with ε̂ = E_t·(z − √ᾱ_t·μ), applied per coordinate.
    pub fn eps_map(&self, t: usize) -> &[f64] {
        &self.eps_maps[t - 1]
    }

    fn check(&self, z_t: &LatentClip, t: usize) -> Result<()> {
        if z_t.shape() != self.world.frame_shape || z_t.frames() != self.frames {
            return Err(Error::shape(format!(
                "analytic denoiser expects {} frames of {}, got {} frames of {}",
                self.frames,
                self.world.frame_shape,
                z_t.frames(),
                z_t.shape()
            )));
        }
        if t == 0 || t > self.eps_maps.len() {
            return Err(Error::range("t", t, 1, self.eps_maps.len()));
        }
        Ok(())
    }
}

impl NoisePredictor for AnalyticDenoiser {
    fn id(&self) -> String {
        format!("analytic[{}]", self.world)
    }

    fn frame_shape(&self) -> FrameShape {
        self.world.frame_shape
    }

    fn clip_frames(&self) -> usize {
        self.frames
    }

    fn is_conditional(&self) -> bool {
        false
    }

    fn predict(&self, z_t: &LatentClip, t: usize, _y: ConditionLabel) -> Result<LatentClip> {
        self.check(z_t, t)?;
        let offset = self.alpha_bars[t - 1].sqrt() * self.world.mu;
        let map = self.eps_map(t);
        let frames = self.frames;
        let dim = self.world.frame_dim();
        let z = z_t.data();
        let mut out = LatentClip::zeros(z_t.shape(), frames).with_step(t);
        let o = out.data_mut();
        let mut centred = vec![0.0; frames];
        for d in 0..dim {
            for (k, c) in centred.iter_mut().enumerate() {
                *c = z[k * dim + d] - offset;
            }
            for i in 0..frames {
                let row = &map[i * frames..(i + 1) * frames];
                o[i * dim + d] = row.iter().zip(&centred).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// One-shot closed-form prediction, building the step's map on the fly.
pub fn analytic_denoise(
    z_t: &LatentClip,
    t: usize,
    world: &GaussianWorldSpec,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    sched.check_step(t)?;
    world.validate()?;
    if z_t.shape() != world.frame_shape {
        return Err(Error::shape(format!(
            "clip frames are {}, world frames are {}",
            z_t.shape(),
            world.frame_shape
        )));
    }
    let frames = z_t.frames();
    let ab = sched.alpha_bar(t);
    let inv = noisy_covariance_inverse(&world.frame_covariance(frames), ab)?;
    let dim = world.frame_dim();
    let offset = ab.sqrt() * world.mu;
    let mut out = LatentClip::zeros(z_t.shape(), frames).with_step(t);
    for d in 0..dim {
        let centred = DVector::from_fn(frames, |k, _| z_t.data()[k * dim + d] - offset);
        let eps = &inv * centred * (1.0 - ab).sqrt();
        for k in 0..frames {
            out.data_mut()[k * dim + d] = eps[k];
        }
    }
    Ok(out)
}

/// (ᾱ·Σ + (1−ᾱ)·I)⁻¹ through a Cholesky factorization.
fn noisy_covariance_inverse(sigma: &DMatrix<f64>, alpha_bar: f64) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let c = sigma * alpha_bar + DMatrix::identity(n, n) * (1.0 - alpha_bar);
    match c.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => {
            let eig = c.symmetric_eigenvalues();
            let max = eig.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.iter().cloned().fold(f64::MAX, f64::min);
            Err(Error::Numerical(format!(
                "noisy prior covariance is not positive definite (condition number {:.3e}, min eigenvalue {min:.3e})",
                max / min.abs()
            )))
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
