//! Sampling controllers: plain clip sampling, the replacing baseline, and the
//! repeat-and-slide generator with DDPM inversion and resampling, plus the
//! image-to-video, infilling and prediction adapters built on it.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, PixelFrame, PixelVideo};
use crate::denoiser::{guided_predict, ConditionLabel, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, seeded, SimRng};
use crate::schedule::{axpby, ddim_into, jump_into, reverse_into, NoiseSchedule};
use crate::tensor::{checksum, FrameShape, LatentClip, LatentFrame};

/// The K-slot conditioning queue, oldest frame first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQueue {
    slots: VecDeque<LatentFrame>,
}

impl FrameQueue {
    pub fn new(frames: Vec<LatentFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::config("frame queue needs at least one slot"))?;
        if let Some(k) = frames.iter().position(|f| f.shape() != first.shape()) {
            return Err(Error::shape(format!("queue slot {k} differs in shape from slot 0")));
        }
        Ok(Self {
            slots: frames.into(),
        })
    }

    /// K copies of `frame`.
    pub fn repeat(frame: &LatentFrame, k: usize) -> Result<Self> {
        Self::new(vec![frame.clone(); k])
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn shape(&self) -> FrameShape {
        self.slots[0].shape()
    }

    pub fn slot(&self, k: usize) -> &LatentFrame {
        &self.slots[k]
    }

    pub fn last(&self) -> &LatentFrame {
        self.slots.back().unwrap()
    }

    /// Dequeues the oldest slot and enqueues `frame`; returns the evicted slot.
    pub fn slide(&mut self, frame: LatentFrame) -> Result<LatentFrame> {
        if frame.shape() != self.shape() {
            return Err(Error::shape(format!(
                "cannot slide a {} frame into a {} queue",
                frame.shape(),
                self.shape()
            )));
        }
        self.slots.push_back(frame);
        Ok(self.slots.pop_front().unwrap())
    }

    /// Slots concatenated in queue order.
    pub fn flat(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|f| f.data().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// K: conditioning frames; the denoiser sees clips of K + 1 frames.
    pub queue_len: usize,
    /// M: frames to synthesize after the given ones.
    pub frames: usize,
    pub guidance: f64,
    /// 0 runs the full DDPM chain; otherwise the DDIM step count.
    pub ddim_steps: usize,
    /// U: denoise passes per step; 1 disables resampling.
    pub resample: usize,
    pub seed: u64,
    pub use_inversion: bool,
    /// Codec pooling factor between pixels and latents.
    pub factor: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            queue_len: 4,
            frames: 15,
            guidance: 9.0,
            ddim_steps: 0,
            resample: 1,
            seed: 0,
            use_inversion: true,
            factor: crate::codec::DEFAULT_FACTOR,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let t = sched.steps();
        if self.queue_len == 0 {
            return Err(Error::config("queue length K must be at least 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("frame count M must be at least 1"));
        }
        if self.resample == 0 {
            return Err(Error::config("resample count U must be at least 1"));
        }
        if self.ddim_steps == 1 || self.ddim_steps > t {
            return Err(Error::config(format!(
                "ddim steps {} must be 0 or lie in [2, {t}]",
                self.ddim_steps
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::config(format!("guidance scale {} must be finite and >= 0", self.guidance)));
        }
        if self.factor == 0 {
            return Err(Error::config("codec factor must be positive"));
        }
        Ok(())
    }
}

/// Counters collected while sampling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Guided denoise calls (one reverse update each).
    pub denoise_calls: usize,
    /// Raw denoiser evaluations; two per call when guidance mixes branches.
    pub evaluations: usize,
    /// Denoise calls spent on each synthesized frame, in output order.
    pub calls_per_frame: Vec<usize>,
    /// Largest number of clean latent frames held across sampling passes
    /// (queue slots plus a generated frame awaiting its slide).
    pub peak_resident_latents: usize,
}

/// One replacement event of the repeat-and-slide loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    /// Index of the output frame being generated (1-based within a run).
    pub frame: usize,
    pub t: usize,
    pub u: usize,
    /// Checksum of the first K frames of ẑ_t right after replacement.
    pub slots: u64,
    /// Checksum of the drawn s_t.
    pub s_t: u64,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame={} t={} u={} slots={:016x} s_t={:016x}",
            self.frame, self.t, self.u, self.slots, self.s_t
        )
    }
}

pub fn write_trace<W: Write>(events: &[TraceEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

/// Reverse-step pairs (t, t_prev) in execution order.
fn step_plan(sched: &NoiseSchedule, ddim_steps: usize, from: usize) -> Result<Vec<(usize, usize)>> {
    if ddim_steps == 0 {
        return Ok((1..=from).rev().map(|t| (t, t - 1)).collect());
    }
    let mut taus = vec![0];
    taus.extend(sched.ddim_timesteps(ddim_steps)?);
    Ok((1..taus.len()).rev().map(|i| (taus[i], taus[i - 1])).collect())
}

/// Sampling engine bound to one denoiser, schedule and configuration.
pub struct Sampler<'a> {
    denoiser: &'a dyn NoisePredictor,
    sched: &'a NoiseSchedule,
    cfg: GenerationConfig,
    stats: RunStats,
    trace: Option<Vec<TraceEvent>>,
    current_frame: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(denoiser: &'a dyn NoisePredictor, sched: &'a NoiseSchedule, cfg: GenerationConfig) -> Result<Self> {
        cfg.validate(sched)?;
        if denoiser.clip_frames() != cfg.queue_len + 1 {
            return Err(Error::config(format!(
                "denoiser {} handles {}-frame clips but K + 1 = {}",
                denoiser.id(),
                denoiser.clip_frames(),
                cfg.queue_len + 1
            )));
        }
        Ok(Self {
            denoiser,
            sched,
            cfg,
            stats: RunStats::default(),
            trace: None,
            current_frame: 0,
        })
    }

    /// Records a [`TraceEvent`] for every replacement from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn shape(&self) -> FrameShape {
        self.denoiser.frame_shape()
    }

    fn clip_len(&self) -> usize {
        self.cfg.queue_len + 1
    }

    /// One guided update t → t_prev (ancestral DDPM, or deterministic DDIM
    /// when the configuration asks for it).
    fn denoise(&mut self, z: &mut LatentClip, t: usize, t_prev: usize, y: ConditionLabel, rng: &mut SimRng) -> Result<()> {
        let (eps, evals) = guided_predict(self.denoiser, z, t, y, self.cfg.guidance)?;
        self.stats.denoise_calls += 1;
        self.stats.evaluations += evals;
        let mut out = vec![0.0; z.data().len()];
        if self.cfg.ddim_steps > 0 {
            ddim_into(z.data(), eps.data(), t, t_prev, self.sched, &mut out);
        } else if t > 1 {
            let mut noise = vec![0.0; out.len()];
            fill_standard_normal(rng, &mut noise);
            reverse_into(z.data(), eps.data(), t, Some(&noise), self.sched, &mut out);
        } else {
            reverse_into(z.data(), eps.data(), t, None, self.sched, &mut out);
        }
        z.data_mut().copy_from_slice(&out);
        z.set_step(t_prev);
        if !z.is_finite() {
            return Err(Error::Numerical(format!("non-finite latent after step {t}")));
        }
        Ok(())
    }

    /// Full reverse chain from unit-Gaussian noise; returns K + 1 clean frames.
    pub fn sample_t2v(&mut self, y: ConditionLabel, rng: &mut SimRng) -> Result<LatentClip> {
        let mut z = LatentClip::randn(self.shape(), self.clip_len(), rng).with_step(self.sched.steps());
        for (t, t_prev) in step_plan(self.sched, self.cfg.ddim_steps, self.sched.steps())? {
            self.denoise(&mut z, t, t_prev, y, rng)?;
        }
        Ok(z)
    }

    /// Replacing baseline: before every step each masked slot is overwritten
    /// by its clean latent forward-jumped to the current step with fresh
    /// noise; after the chain the masked slots receive their clean latents.
    pub fn sample_replacing(
        &mut self,
        mask: &[usize],
        clean: &[LatentFrame],
        y: ConditionLabel,
        rng: &mut SimRng,
    ) -> Result<LatentClip> {
        if mask.len() != clean.len() {
            return Err(Error::config(format!(
                "{} masked indices but {} clean latents",
                mask.len(),
                clean.len()
            )));
        }
        let n = self.clip_len();
        for (i, &k) in mask.iter().enumerate() {
            if k >= n {
                return Err(Error::range("mask index", k, 0, n - 1));
            }
            if mask[..i].contains(&k) {
                return Err(Error::config(format!("mask index {k} repeated")));
            }
            if clean[i].shape() != self.shape() {
                return Err(Error::shape(format!(
                    "clean latent for slot {k} is {}, denoiser expects {}",
                    clean[i].shape(),
                    self.shape()
                )));
            }
        }
        let mut z = LatentClip::randn(self.shape(), n, rng).with_step(self.sched.steps());
        let mut noise = vec![0.0; self.shape().len()];
        for (t, t_prev) in step_plan(self.sched, self.cfg.ddim_steps, self.sched.steps())? {
            for (&k, c) in mask.iter().zip(clean) {
                fill_standard_normal(rng, &mut noise);
                jump_into(c.data(), t, &noise, self.sched, z.frame_mut(k));
            }
            self.denoise(&mut z, t, t_prev, y, rng)?;
        }
        for (&k, c) in mask.iter().zip(clean) {
            z.frame_mut(k).copy_from_slice(c.data());
        }
        Ok(z)
    }

    /// One repeat-and-slide pass: returns the new clean frame ẑ^K_0.
    ///
    /// With DDPM the loop visits t = T−1, …, 1, so the
    /// initial ẑ_T enters as the first iterate and a pass costs T − 1 calls
    /// when U = 1. With DDIM it visits the subsequence τ_N = T, …, τ_1 and
    /// re-noises between consecutive subsequence steps. s_t is drawn once per
    /// step and reused by every resample pass. At t = 1 the reverse update is
    /// deterministic and nothing is re-noised, so further passes would repeat
    /// the first one bit for bit; a single call is made.
    pub fn generate_next_frame(&mut self, queue: &FrameQueue, y: ConditionLabel, rng: &mut SimRng) -> Result<LatentFrame> {
        let k = self.cfg.queue_len;
        if queue.len() != k {
            return Err(Error::config(format!("queue has {} slots, K = {k}", queue.len())));
        }
        if queue.shape() != self.shape() {
            return Err(Error::shape(format!(
                "queue frames are {}, denoiser expects {}",
                queue.shape(),
                self.shape()
            )));
        }
        let big_t = self.sched.steps();
        if self.cfg.ddim_steps == 0 && big_t < 2 {
            return Err(Error::config("repeat-and-slide needs at least 2 diffusion steps"));
        }
        let s0 = queue.flat();
        let slot_len = s0.len();
        let frame_len = self.shape().len();

        let mut z = LatentClip::zeros(self.shape(), k + 1).with_step(big_t);
        if self.cfg.use_inversion {
            let mut noise = vec![0.0; slot_len];
            fill_standard_normal(rng, &mut noise);
            jump_into(&s0, big_t, &noise, self.sched, z.leading_mut(k));
            let mut last = vec![0.0; frame_len];
            fill_standard_normal(rng, &mut last);
            jump_into(queue.last().data(), big_t, &last, self.sched, z.frame_mut(k));
        } else {
            fill_standard_normal(rng, z.data_mut());
        }

        let plan = if self.cfg.ddim_steps == 0 {
            step_plan(self.sched, 0, big_t - 1)?
        } else {
            step_plan(self.sched, self.cfg.ddim_steps, big_t)?
        };
        let calls_before = self.stats.denoise_calls;
        let mut s_t = vec![0.0; slot_len];
        let mut noise = vec![0.0; z.data().len()];
        for (t, t_prev) in plan {
            fill_standard_normal(rng, &mut s_t);
            let draw = s_t.clone();
            jump_into(&s0, t, &draw, self.sched, &mut s_t);
            let passes = if t_prev == 0 { 1 } else { self.cfg.resample };
            for u in 1..=passes {
                z.leading_mut(k).copy_from_slice(&s_t);
                z.set_step(t);
                if let Some(trace) = self.trace.as_mut() {
                    trace.push(TraceEvent {
                        frame: self.current_frame,
                        t,
                        u,
                        slots: checksum(z.leading(k)),
                        s_t: checksum(&s_t),
                    });
                }
                self.denoise(&mut z, t, t_prev, y, rng)?;
                if u < passes {
                    let keep = if self.cfg.ddim_steps == 0 {
                        1.0 - self.sched.beta(t)
                    } else {
                        self.sched.alpha_bar(t) / self.sched.alpha_bar(t_prev)
                    };
                    fill_standard_normal(rng, &mut noise);
                    let prev = z.data().to_vec();
                    axpby(keep.sqrt(), &prev, (1.0 - keep).sqrt(), &noise, z.data_mut());
                }
            }
        }
        self.stats.calls_per_frame.push(self.stats.denoise_calls - calls_before);
        Ok(z.latent_frame(k))
    }

    /// Walks a frame sequence where `Some` positions are given and `None`
    /// positions are synthesized. The queue starts as K copies of the first
    /// frame; every later frame, given or generated, slides in. Given frames
    /// are emitted unchanged, generated ones decoded.
    ///
    /// `sink` sees every emitted frame with its latent as soon as it exists,
    /// so callers can persist latents without the walk retaining them.
    pub fn queue_walk<F>(&mut self, sequence: &[Option<PixelFrame>], y: ConditionLabel, mut sink: F) -> Result<PixelVideo>
    where
        F: FnMut(usize, &PixelFrame, &LatentFrame) -> Result<()>,
    {
        let first = match sequence.first() {
            Some(Some(f)) => f,
            _ => return Err(Error::config("the first frame of the sequence must be given")),
        };
        let factor = self.cfg.factor;
        let z0 = encode(first, factor)?;
        if z0.shape() != self.shape() {
            return Err(Error::shape(format!(
                "{}x{} frames encode to {} latents but the denoiser expects {}",
                first.height(),
                first.width(),
                z0.shape(),
                self.shape()
            )));
        }
        let mut rng = seeded(self.cfg.seed);
        let mut queue = FrameQueue::repeat(&z0, self.cfg.queue_len)?;
        self.note_resident(queue.len());
        sink(0, first, &z0)?;
        let mut out = vec![first.clone()];
        for (i, item) in sequence.iter().enumerate().skip(1) {
            match item {
                Some(frame) => {
                    if !frame.same_size(first) {
                        return Err(Error::shape(format!("given frame {i} differs in size from frame 0")));
                    }
                    let z = encode(frame, factor)?;
                    sink(i, frame, &z)?;
                    queue.slide(z)?;
                    out.push(frame.clone());
                }
                None => {
                    self.current_frame = i;
                    let z = self.generate_next_frame(&queue, y, &mut rng)?;
                    self.note_resident(queue.len() + 1);
                    let x = decode(&z, factor)?;
                    sink(i, &x, &z)?;
                    queue.slide(z)?;
                    out.push(x);
                }
            }
        }
        PixelVideo::new(out)
    }

    fn note_resident(&mut self, frames: usize) {
        self.stats.peak_resident_latents = self.stats.peak_resident_latents.max(frames);
    }

    /// Image-to-video: M frames after `x0`; frame 0 is `x0` itself.
    pub fn ti2v_generate(&mut self, x0: &PixelFrame, y: ConditionLabel) -> Result<PixelVideo> {
        let mut seq = vec![Some(x0.clone())];
        seq.resize(self.cfg.frames + 1, None);
        self.queue_walk(&seq, y, |_, _, _| Ok(()))
    }

    /// Prediction from `prefix`, filling the video up to M + 1 frames.
    pub fn predict_generate(&mut self, prefix: &[PixelFrame], y: ConditionLabel) -> Result<PixelVideo> {
        if prefix.is_empty() {
            return Err(Error::config("prediction needs at least one prefix frame"));
        }
        if prefix.len() > self.cfg.frames + 1 {
            return Err(Error::config(format!(
                "prefix of {} frames exceeds M + 1 = {}",
                prefix.len(),
                self.cfg.frames + 1
            )));
        }
        let mut seq: Vec<_> = prefix.iter().cloned().map(Some).collect();
        seq.resize(self.cfg.frames + 1, None);
        self.queue_walk(&seq, y, |_, _, _| Ok(()))
    }

    /// Infilling: one synthesized frame between each pair of given frames.
    pub fn infill_generate(&mut self, given: &[PixelFrame], y: ConditionLabel) -> Result<PixelVideo> {
        if given.is_empty() {
            return Err(Error::config("infilling needs at least one given frame"));
        }
        let seq = infill_sequence(given);
        self.queue_walk(&seq, y, |_, _, _| Ok(()))
    }
}

/// Given frames at even positions, gaps at odd ones.
pub fn infill_sequence(given: &[PixelFrame]) -> Vec<Option<PixelFrame>> {
    let mut seq = Vec::with_capacity(2 * given.len());
    for (i, f) in given.iter().enumerate() {
        if i > 0 {
            seq.push(None);
        }
        seq.push(Some(f.clone()));
    }
    seq
}
