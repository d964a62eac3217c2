//! Video metrics: a Fréchet feature distance over a fixed hand-crafted
//! descriptor ("FVD-lite"), its grouped variants, and temporal roughness.
//!
//! The descriptor is not a learned video network, so absolute distances are
//! not comparable with published FVD numbers. Only orderings between runs
//! scored with the same descriptor mean anything.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::codec::{PixelFrame, PixelVideo};
use crate::error::{Error, Result};
use crate::toyworld::BACKGROUND;

/// Length of the vector returned by [`extract_features`].
pub const FEATURE_DIM: usize = 15;

/// Intensity-weighted centroid (x, y) of the above-background mass, in
/// fractions of the frame size. A frame with no foreground reports the centre.
pub fn centroid(frame: &PixelFrame) -> (f64, f64) {
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let w: f64 = (0..3).map(|c| (frame.get(y, x, c) - BACKGROUND).max(0.0)).sum();
            mass += w;
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
        }
    }
    if mass <= 0.0 {
        return (0.5, 0.5);
    }
    (sx / mass / frame.width() as f64, sy / mass / frame.height() as f64)
}

fn mean_sq_diff(a: &PixelFrame, b: &PixelFrame) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Fixed-length descriptor of a video:
///
/// | index  | component                                            |
/// |--------|------------------------------------------------------|
/// | 0..3   | channel means, averaged over frames                  |
/// | 3..6   | channel variances, averaged over frames              |
/// | 6, 7   | mean and max inter-frame difference energy           |
/// | 8, 9   | mean centroid velocity (x, y), pixels per frame      |
/// | 10, 11 | std of the per-step centroid velocity (x, y)         |
/// | 12, 13 | centroid of the first frame (fractions of the frame) |
/// | 14     | mean centroid speed, pixels per frame                |
pub fn extract_features(video: &PixelVideo) -> Result<Vec<f64>> {
    let first = video
        .frames
        .first()
        .ok_or_else(|| Error::config("cannot extract features from an empty video"))?;
    let frames = video.len() as f64;
    let mut f = vec![0.0; FEATURE_DIM];
    for frame in &video.frames {
        let n = (frame.height() * frame.width()) as f64;
        for c in 0..3 {
            let vals = frame.data().iter().skip(c).step_by(3);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            f[c] += mean / frames;
            f[3 + c] += var / frames;
        }
    }

    let energies: Vec<f64> = video.frames.windows(2).map(|w| mean_sq_diff(&w[0], &w[1])).collect();
    if !energies.is_empty() {
        f[6] = energies.iter().sum::<f64>() / energies.len() as f64;
        f[7] = energies.iter().cloned().fold(0.0, f64::max);
    }

    let (w, h) = (first.width() as f64, first.height() as f64);
    let track: Vec<(f64, f64)> = video
        .frames
        .iter()
        .map(|fr| {
            let (x, y) = centroid(fr);
            (x * w, y * h)
        })
        .collect();
    let steps: Vec<(f64, f64)> = track.windows(2).map(|p| (p[1].0 - p[0].0, p[1].1 - p[0].1)).collect();
    if !steps.is_empty() {
        let n = steps.len() as f64;
        let (mx, my) = steps.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0 / n, a.1 + s.1 / n));
        f[8] = mx;
        f[9] = my;
        f[10] = (steps.iter().map(|s| (s.0 - mx).powi(2)).sum::<f64>() / n).sqrt();
        f[11] = (steps.iter().map(|s| (s.1 - my).powi(2)).sum::<f64>() / n).sqrt();
        f[14] = steps.iter().map(|s| s.0.hypot(s.1)).sum::<f64>() / n;
    }
    f[12] = track[0].0 / w;
    f[13] = track[0].1 / h;
    Ok(f)
}

/// Gaussian fit of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape(format!(
                "covariance is {:?}, mean has dimension {d}",
                cov.shape()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::Numerical(format!("covariance asymmetric by {asym:e}")));
        }
        Ok(Self { mean, cov, count })
    }

    /// One-dimensional N(mean, var).
    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            count: 0,
        }
    }

    /// Sample mean and unbiased (n − 1) covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::config(format!(
                "need at least 2 samples for a covariance, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        if let Some(k) = samples.iter().position(|s| s.len() != d) {
            return Err(Error::shape(format!("sample {k} has dimension {}, expected {d}", samples[k].len())));
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        Ok(Self {
            mean,
            cov,
            count: samples.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// ‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^½ Σ_b Σ_a^½)^½), clamped at zero.
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&ra * &b.cov * &ra));
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Distances between real and generated feature sets, per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDistance {
    pub groups: Vec<(String, f64)>,
    pub mean: f64,
    /// Population standard deviation across groups.
    pub std: f64,
}

/// Real/generated feature samples per group name.
pub type FeatureGroups = BTreeMap<String, (Vec<Vec<f64>>, Vec<Vec<f64>>)>;

pub fn grouped_fvd_features(groups: &FeatureGroups) -> Result<GroupedDistance> {
    if groups.is_empty() {
        return Err(Error::config("no groups to score"));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (name, (real, fake)) in groups {
        if real.len() < 2 || fake.len() < 2 {
            return Err(Error::config(format!(
                "group '{name}' needs at least 2 videos per side, has {} real and {} generated",
                real.len(),
                fake.len()
            )));
        }
        let d = frechet_distance(&FeatureMoments::from_samples(real)?, &FeatureMoments::from_samples(fake)?)?;
        out.push((name.clone(), d));
    }
    let n = out.len() as f64;
    let mean = out.iter().map(|g| g.1).sum::<f64>() / n;
    let std = (out.iter().map(|g| (g.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(GroupedDistance {
        groups: out,
        mean,
        std,
    })
}

pub fn grouped_fvd(groups: &BTreeMap<String, (Vec<PixelVideo>, Vec<PixelVideo>)>) -> Result<GroupedDistance> {
    let mut features = FeatureGroups::new();
    for (name, (real, fake)) in groups {
        let f = |vs: &[PixelVideo]| vs.iter().map(extract_features).collect::<Result<Vec<_>>>();
        features.insert(name.clone(), (f(real)?, f(fake)?));
    }
    grouped_fvd_features(&features)
}

/// Ungrouped FVD-lite between two video sets.
pub fn fvd(real: &[PixelVideo], fake: &[PixelVideo]) -> Result<f64> {
    let f = |vs: &[PixelVideo]| vs.iter().map(extract_features).collect::<Result<Vec<_>>>();
    frechet_distance(&FeatureMoments::from_samples(&f(real)?)?, &FeatureMoments::from_samples(&f(fake)?)?)
}

/// Mean over consecutive frame pairs of the per-value squared difference.
pub fn temporal_roughness(video: &PixelVideo) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::config(format!(
            "temporal roughness needs at least 2 frames, got {}",
            video.len()
        )));
    }
    let pairs = video.frames.windows(2);
    let n = pairs.len() as f64;
    Ok(pairs.map(|w| mean_sq_diff(&w[0], &w[1])).sum::<f64>() / n)
}

/// CSV report: `group,distance,std`, one row per group (std left empty) and a
/// final `summary` row carrying the mean distance and the population std.
pub fn write_report<W: Write>(report: &GroupedDistance, mut out: W) -> std::io::Result<()> {
    writeln!(out, "group,distance,std")?;
    for (name, d) in &report.groups {
        writeln!(out, "{name},{d},")?;
    }
    writeln!(out, "summary,{},{}", report.mean, report.std)
}
