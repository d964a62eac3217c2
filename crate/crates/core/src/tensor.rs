//! Latent frames and clips.
//!
//! A latent frame is an `H_z × W_z × C_z` block of reals stored row-major in
//! HWC order. A clip is an ordered run of equally shaped frames stored
//! contiguously, tagged with the diffusion step it is noised to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fill_standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn positions(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for FrameShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    shape: FrameShape,
    data: Vec<f64>,
}

impl LatentFrame {
    pub fn new(shape: FrameShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "latent frame {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: FrameShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: FrameShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    shape: FrameShape,
    frames: usize,
    step: usize,
    data: Vec<f64>,
}

impl LatentClip {
    pub fn zeros(shape: FrameShape, frames: usize) -> Self {
        Self {
            shape,
            frames,
            step: 0,
            data: vec![0.0; shape.len() * frames],
        }
    }

    pub fn from_data(shape: FrameShape, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() * frames {
            return Err(Error::shape(format!(
                "clip of {frames} frames of {shape} needs {} values, got {}",
                shape.len() * frames,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            frames,
            step: 0,
            data,
        })
    }

    pub fn from_frames(frames: &[LatentFrame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("clip needs at least one frame"))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(shape.len() * frames.len());
        for (k, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape(format!(
                    "frame {k} has shape {}, expected {shape}",
                    f.shape()
                )));
            }
            data.extend_from_slice(f.data());
        }
        Ok(Self {
            shape,
            frames: frames.len(),
            step: 0,
            data,
        })
    }

    /// Unit-Gaussian clip.
    pub fn randn<R: Rng + ?Sized>(shape: FrameShape, frames: usize, rng: &mut R) -> Self {
        let mut clip = Self::zeros(shape, frames);
        fill_standard_normal(rng, &mut clip.data);
        clip
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.shape.len();
        &mut self.data[k * n..(k + 1) * n]
    }

    /// The leading `count` frames as one contiguous slice.
    pub fn leading(&self, count: usize) -> &[f64] {
        &self.data[..count * self.shape.len()]
    }

    pub fn leading_mut(&mut self, count: usize) -> &mut [f64] {
        let n = self.shape.len();
        &mut self.data[..count * n]
    }

    pub fn latent_frame(&self, k: usize) -> LatentFrame {
        LatentFrame {
            shape: self.shape,
            data: self.frame(k).to_vec(),
        }
    }

    pub fn to_frames(&self) -> Vec<LatentFrame> {
        (0..self.frames).map(|k| self.latent_frame(k)).collect()
    }

    pub fn same_layout(&self, other: &LatentClip) -> bool {
        self.shape == other.shape && self.frames == other.frames
    }

    pub(crate) fn check_layout(&self, other: &LatentClip, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {} frames of {} vs {} frames of {}",
                self.frames, self.shape, other.frames, other.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 64-bit FNV-1a over the IEEE bit patterns; used for trace checksums.
pub fn checksum(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}
