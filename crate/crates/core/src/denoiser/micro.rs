//! Micro spatio-temporal noise predictor.
//!
//! One spatio-temporal block at full latent resolution:
//!
//! ```text
//! cond = W_t·sinusoid(t) + b_t + label[y]
//! h1   = silu(conv3x3(x) + cond + frame_pos[f])
//! h2   = h1 + silu(temporal_conv3(h1))
//! h3   = h2 + spatial_attention(h2)      // per frame, over H·W positions
//! h4   = h3 + temporal_attention(h3)     // per position, over frames
//! ε̂    = conv3x3(h4)                     // zero-initialized head
//! ```
//!
//! Attention is single-head and unmasked. Activations are laid out
//! `[frame][y][x][channel]`. Gradients are derived by hand; the finite
//! difference check in the tests covers every parameter tensor.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use super::{ConditionLabel, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};
use crate::tensor::{FrameShape, LatentClip};

const MAGIC: &str = "frameslide-micro 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MicroConfig {
    pub shape: FrameShape,
    pub frames: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub classes: usize,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            shape: FrameShape::new(8, 8, 3),
            frames: 5,
            hidden: 12,
            time_dim: 16,
            classes: 4,
        }
    }
}

impl MicroConfig {
    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.frames == 0 || self.hidden == 0 {
            return Err(Error::config("micro denoiser dimensions must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("micro denoiser time_dim must be a positive even number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTensor {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    time_w: usize,
    time_b: usize,
    label: usize,
    frame_pos: usize,
    conv_in_w: usize,
    conv_in_b: usize,
    tconv_w: usize,
    tconv_b: usize,
    sattn: [usize; 4],
    tattn: [usize; 4],
    conv_out_w: usize,
    conv_out_b: usize,
}

fn build_layout(cfg: &MicroConfig) -> (Vec<ParamTensor>, Layout) {
    let c = cfg.hidden;
    let ci = cfg.shape.channels;
    let mut tensors = Vec::new();
    let mut offset = 0;
    let mut push = |name: &'static str, shape: Vec<usize>| {
        let t = ParamTensor {
            name,
            shape,
            offset,
        };
        offset += t.len();
        let o = t.offset;
        tensors.push(t);
        o
    };
    let layout = Layout {
        time_w: push("time_proj.weight", vec![c, cfg.time_dim]),
        time_b: push("time_proj.bias", vec![c]),
        label: push("label_embed", vec![cfg.classes + 1, c]),
        frame_pos: push("frame_embed", vec![cfg.frames, c]),
        conv_in_w: push("conv_in.weight", vec![c, ci, 3, 3]),
        conv_in_b: push("conv_in.bias", vec![c]),
        tconv_w: push("temporal_conv.weight", vec![c, c, 3]),
        tconv_b: push("temporal_conv.bias", vec![c]),
        sattn: [
            push("spatial_attn.q", vec![c, c]),
            push("spatial_attn.k", vec![c, c]),
            push("spatial_attn.v", vec![c, c]),
            push("spatial_attn.o", vec![c, c]),
        ],
        tattn: [
            push("temporal_attn.q", vec![c, c]),
            push("temporal_attn.k", vec![c, c]),
            push("temporal_attn.v", vec![c, c]),
            push("temporal_attn.o", vec![c, c]),
        ],
        conv_out_w: push("conv_out.weight", vec![ci, c, 3, 3]),
        conv_out_b: push("conv_out.bias", vec![ci]),
    };
    (tensors, layout)
}

#[derive(Debug, Clone)]
pub struct MicroDenoiser {
    cfg: MicroConfig,
    tensors: Vec<ParamTensor>,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for MicroDenoiser {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl MicroDenoiser {
    /// Seeded initialization; the output head starts at exactly zero.
    pub fn new(cfg: MicroConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (tensors, layout) = build_layout(&cfg);
        let total = tensors.iter().map(ParamTensor::len).sum();
        let mut model = Self {
            cfg,
            tensors,
            layout,
            params: vec![0.0; total],
        };
        let mut rng = seeded(seed);
        let c = cfg.hidden as f64;
        let ci = cfg.shape.channels as f64;
        let scales: Vec<(&'static str, f64)> = vec![
            ("time_proj.weight", (1.0 / cfg.time_dim as f64).sqrt()),
            ("label_embed", 0.3),
            ("frame_embed", 0.3),
            ("conv_in.weight", (1.0 / (9.0 * ci)).sqrt()),
            ("temporal_conv.weight", 0.5 * (1.0 / (3.0 * c)).sqrt()),
            ("spatial_attn.q", (1.0 / c).sqrt()),
            ("spatial_attn.k", (1.0 / c).sqrt()),
            ("spatial_attn.v", (1.0 / c).sqrt()),
            ("spatial_attn.o", 0.5 * (1.0 / c).sqrt()),
            ("temporal_attn.q", (1.0 / c).sqrt()),
            ("temporal_attn.k", (1.0 / c).sqrt()),
            ("temporal_attn.v", (1.0 / c).sqrt()),
            ("temporal_attn.o", 0.5 * (1.0 / c).sqrt()),
        ];
        for (name, scale) in scales {
            let range = model.tensor(name).expect("known tensor").range();
            for p in &mut model.params[range] {
                *p = scale * standard_normal(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &MicroConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Fills the output head with small random weights (used by gradient
    /// checks, where a zero head would hide every upstream gradient).
    pub fn randomize_head<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for name in ["conv_out.weight", "conv_out.bias"] {
            let range = self.tensor(name).expect("head tensor").range();
            for p in &mut self.params[range] {
                *p = scale * standard_normal(rng);
            }
        }
    }

    fn check_input(&self, z: &LatentClip) -> Result<()> {
        if z.shape() != self.cfg.shape || z.frames() != self.cfg.frames {
            return Err(Error::shape(format!(
                "micro denoiser expects {} frames of {}, got {} frames of {}",
                self.cfg.frames,
                self.cfg.shape,
                z.frames(),
                z.shape()
            )));
        }
        Ok(())
    }

    fn label_row(&self, y: ConditionLabel) -> Result<usize> {
        match y {
            ConditionLabel::Null => Ok(self.cfg.classes),
            ConditionLabel::Class(c) if (c as usize) < self.cfg.classes => Ok(c as usize),
            ConditionLabel::Class(c) => Err(Error::Range {
                what: "label",
                value: i64::from(c),
                range: format!("[0, {})", self.cfg.classes),
            }),
        }
    }

    /// ε̂ for one clip.
    pub fn forward(&self, z_t: &LatentClip, t: usize, y: ConditionLabel) -> Result<LatentClip> {
        self.check_input(z_t)?;
        let cache = self.forward_cached(z_t.data(), t, self.label_row(y)?);
        LatentClip::from_data(z_t.shape(), z_t.frames(), cache.out).map(|c| c.with_step(t))
    }

    /// Mean squared error against `target` (per element) and its gradient,
    /// accumulated into `grad` scaled by `scale`.
    pub fn loss_and_grad(
        &self,
        z_t: &LatentClip,
        t: usize,
        y: ConditionLabel,
        target: &[f64],
        grad: &mut [f64],
        scale: f64,
    ) -> Result<f64> {
        self.check_input(z_t)?;
        if target.len() != z_t.data().len() || grad.len() != self.params.len() {
            return Err(Error::shape("loss target or gradient buffer has the wrong length"));
        }
        let row = self.label_row(y)?;
        let cache = self.forward_cached(z_t.data(), t, row);
        let n = target.len() as f64;
        let mut loss = 0.0;
        let mut d_out = vec![0.0; target.len()];
        for ((d, o), e) in d_out.iter_mut().zip(&cache.out).zip(target) {
            let r = o - e;
            loss += r * r;
            *d = 2.0 * r / n * scale;
        }
        self.backward(z_t.data(), row, &cache, &d_out, grad);
        Ok(loss / n)
    }

    pub fn loss(&self, z_t: &LatentClip, t: usize, y: ConditionLabel, target: &[f64]) -> Result<f64> {
        let out = self.forward(z_t, t, y)?;
        let n = target.len() as f64;
        Ok(out
            .data()
            .iter()
            .zip(target)
            .map(|(o, e)| (o - e) * (o - e))
            .sum::<f64>()
            / n)
    }

    fn dims(&self) -> Dims {
        Dims {
            f: self.cfg.frames,
            h: self.cfg.shape.height,
            w: self.cfg.shape.width,
            ci: self.cfg.shape.channels,
            c: self.cfg.hidden,
        }
    }

    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    fn forward_cached(&self, x: &[f64], t: usize, label_row: usize) -> Cache {
        let d = self.dims();
        let l = &self.layout;
        let (c, f, pcount) = (d.c, d.f, d.h * d.w);

        let temb = step_embedding(t, self.cfg.time_dim);
        let mut cond = self.p(l.time_b, c).to_vec();
        let tw = self.p(l.time_w, c * self.cfg.time_dim);
        for (j, cj) in cond.iter_mut().enumerate() {
            let row = &tw[j * self.cfg.time_dim..(j + 1) * self.cfg.time_dim];
            *cj += row.iter().zip(&temb).map(|(a, b)| a * b).sum::<f64>();
        }
        let label = self.p(l.label + label_row * c, c);
        for (cj, lj) in cond.iter_mut().zip(label) {
            *cj += lj;
        }

        let mut a1 = conv3x3(
            x,
            d.f,
            d.h,
            d.w,
            d.ci,
            c,
            self.p(l.conv_in_w, c * d.ci * 9),
            self.p(l.conv_in_b, c),
        );
        let pos = self.p(l.frame_pos, f * c);
        for fi in 0..f {
            for p in 0..pcount {
                let base = (fi * pcount + p) * c;
                for j in 0..c {
                    a1[base + j] += cond[j] + pos[fi * c + j];
                }
            }
        }
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();

        let a2 = temporal_conv(&h1, f, pcount, c, self.p(l.tconv_w, c * c * 3), self.p(l.tconv_b, c));
        let h2: Vec<f64> = h1.iter().zip(&a2).map(|(h, a)| h + silu(*a)).collect();

        let sw = attn_weights(&self.params, &l.sattn, c);
        let mut h3 = h2.clone();
        let mut spatial = Vec::with_capacity(f);
        for fi in 0..f {
            let block = fi * pcount * c..(fi + 1) * pcount * c;
            let (y, cache) = attention_forward(&h2[block.clone()], pcount, c, &sw);
            for (o, v) in h3[block].iter_mut().zip(&y) {
                *o += v;
            }
            spatial.push(cache);
        }

        let tw = attn_weights(&self.params, &l.tattn, c);
        let mut h4 = h3.clone();
        let mut temporal = Vec::with_capacity(pcount);
        let mut tokens = vec![0.0; f * c];
        for p in 0..pcount {
            for fi in 0..f {
                let src = (fi * pcount + p) * c;
                tokens[fi * c..(fi + 1) * c].copy_from_slice(&h3[src..src + c]);
            }
            let (y, cache) = attention_forward(&tokens, f, c, &tw);
            for fi in 0..f {
                let dst = (fi * pcount + p) * c;
                for j in 0..c {
                    h4[dst + j] += y[fi * c + j];
                }
            }
            temporal.push(cache);
        }

        let out = conv3x3(
            &h4,
            d.f,
            d.h,
            d.w,
            c,
            d.ci,
            self.p(l.conv_out_w, d.ci * c * 9),
            self.p(l.conv_out_b, d.ci),
        );

        Cache {
            temb,
            a1,
            h1,
            a2,
            h2,
            spatial,
            h3,
            temporal,
            h4,
            out,
        }
    }

    fn backward(&self, x: &[f64], label_row: usize, cache: &Cache, d_out: &[f64], grad: &mut [f64]) {
        let d = self.dims();
        let l = self.layout;
        let (c, f, pcount) = (d.c, d.f, d.h * d.w);

        // head
        let mut dh4 = vec![0.0; cache.h4.len()];
        {
            let (gw, gb) = split_two(grad, l.conv_out_w, d.ci * c * 9, l.conv_out_b, d.ci);
            conv3x3_backward(
                &cache.h4,
                d.f,
                d.h,
                d.w,
                c,
                d.ci,
                self.p(l.conv_out_w, d.ci * c * 9),
                d_out,
                &mut dh4,
                gw,
                gb,
            );
        }

        // temporal attention, residual: dh3 = dh4 + attn'(dh4)
        let mut dh3 = dh4.clone();
        {
            let tw = attn_weights(&self.params, &l.tattn, c);
            let mut tokens = vec![0.0; f * c];
            let mut dy = vec![0.0; f * c];
            let mut dx = vec![0.0; f * c];
            for (p, tc) in cache.temporal.iter().enumerate() {
                for fi in 0..f {
                    let src = (fi * pcount + p) * c;
                    tokens[fi * c..(fi + 1) * c].copy_from_slice(&cache.h3[src..src + c]);
                    dy[fi * c..(fi + 1) * c].copy_from_slice(&dh4[src..src + c]);
                }
                dx.iter_mut().for_each(|v| *v = 0.0);
                attention_backward(&tokens, f, c, &tw, tc, &dy, &mut dx, grad, &l.tattn);
                for fi in 0..f {
                    let dst = (fi * pcount + p) * c;
                    for j in 0..c {
                        dh3[dst + j] += dx[fi * c + j];
                    }
                }
            }
        }

        // spatial attention
        let mut dh2 = dh3.clone();
        {
            let sw = attn_weights(&self.params, &l.sattn, c);
            let mut dx = vec![0.0; pcount * c];
            for (fi, sc) in cache.spatial.iter().enumerate() {
                let block = fi * pcount * c..(fi + 1) * pcount * c;
                dx.iter_mut().for_each(|v| *v = 0.0);
                attention_backward(
                    &cache.h2[block.clone()],
                    pcount,
                    c,
                    &sw,
                    sc,
                    &dh3[block.clone()],
                    &mut dx,
                    grad,
                    &l.sattn,
                );
                for (o, v) in dh2[block].iter_mut().zip(&dx) {
                    *o += v;
                }
            }
        }

        // h2 = h1 + silu(a2)
        let da2: Vec<f64> = dh2
            .iter()
            .zip(&cache.a2)
            .map(|(g, a)| g * silu_grad(*a))
            .collect();
        let mut dh1 = dh2;
        {
            let (gw, gb) = split_two(grad, l.tconv_w, c * c * 3, l.tconv_b, c);
            temporal_conv_backward(
                &cache.h1,
                f,
                pcount,
                c,
                self.p(l.tconv_w, c * c * 3),
                &da2,
                &mut dh1,
                gw,
                gb,
            );
        }

        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.a1)
            .map(|(g, a)| g * silu_grad(*a))
            .collect();

        // a1 = conv_in(x) + cond + frame_pos
        let mut dcond = vec![0.0; c];
        for fi in 0..f {
            for p in 0..pcount {
                let base = (fi * pcount + p) * c;
                for j in 0..c {
                    let g = da1[base + j];
                    dcond[j] += g;
                    grad[l.frame_pos + fi * c + j] += g;
                }
            }
        }
        {
            let mut dx = vec![0.0; x.len()];
            let (gw, gb) = split_two(grad, l.conv_in_w, c * d.ci * 9, l.conv_in_b, c);
            conv3x3_backward(
                x,
                d.f,
                d.h,
                d.w,
                d.ci,
                c,
                self.p(l.conv_in_w, c * d.ci * 9),
                &da1,
                &mut dx,
                gw,
                gb,
            );
        }

        let td = self.cfg.time_dim;
        for j in 0..c {
            grad[l.time_b + j] += dcond[j];
            grad[l.label + label_row * c + j] += dcond[j];
            for i in 0..td {
                grad[l.time_w + j * td + i] += dcond[j] * cache.temb[i];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Text header (one `tensor name dims…` line per tensor, closed by
    /// `end`), then every parameter as little-endian f32 in header order.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let cfg = &self.cfg;
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "frames {}", cfg.frames)?;
        writeln!(
            out,
            "shape {} {} {}",
            cfg.shape.height, cfg.shape.width, cfg.shape.channels
        )?;
        writeln!(out, "hidden {}", cfg.hidden)?;
        writeln!(out, "time_dim {}", cfg.time_dim)?;
        writeln!(out, "classes {}", cfg.classes)?;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            writeln!(out, "tensor {} {}", t.name, dims.join(" "))?;
        }
        writeln!(out, "end")?;
        let mut bytes = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            bytes.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out.write_all(&bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    pub fn read_from<R: BufRead>(mut input: R, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "micro denoiser",
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = Vec::new();
        loop {
            let mut line = String::new();
            let n = input
                .read_line(&mut line)
                .map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(bad("header has no 'end' line".into()));
            }
            let line = line.trim_end().to_string();
            if line == "end" {
                break;
            }
            lines.push(line);
            if lines.len() > 256 {
                return Err(bad("header too long".into()));
            }
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad(format!("expected '{MAGIC}' on the first line")));
        }
        let field = |key: &str| -> Result<Vec<usize>> {
            let line = lines
                .iter()
                .find(|l| l.split_whitespace().next() == Some(key))
                .ok_or_else(|| bad(format!("missing '{key}' line")))?;
            line.split_whitespace()
                .skip(1)
                .map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad '{key}' value"))))
                .collect()
        };
        let scalar = |key: &str| -> Result<usize> {
            field(key)?
                .first()
                .copied()
                .ok_or_else(|| bad(format!("empty '{key}' line")))
        };
        let shape = field("shape")?;
        if shape.len() != 3 {
            return Err(bad("shape needs three dimensions".into()));
        }
        let cfg = MicroConfig {
            shape: FrameShape::new(shape[0], shape[1], shape[2]),
            frames: scalar("frames")?,
            hidden: scalar("hidden")?,
            time_dim: scalar("time_dim")?,
            classes: scalar("classes")?,
        };
        let mut model = Self::new(cfg, 0)?;
        let declared: Vec<(String, Vec<usize>)> = lines
            .iter()
            .filter(|l| l.starts_with("tensor "))
            .map(|l| {
                let mut it = l.split_whitespace().skip(1);
                let name = it.next().unwrap_or_default().to_string();
                let dims = it.filter_map(|d| d.parse().ok()).collect();
                (name, dims)
            })
            .collect();
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors
            .iter()
            .map(|t| (t.name.to_string(), t.shape.clone()))
            .collect();
        if declared != expected {
            return Err(bad("tensor table does not match the declared configuration".into()));
        }
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() != model.params.len() * 4 {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                model.params.len() * 4,
                bytes.len()
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(bytes.chunks_exact(4)) {
            *p = f64::from(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(model)
    }

    /// Rounds parameters through f32 so the in-memory model equals what
    /// [`save`](Self::save) would persist.
    pub fn quantize_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }
}

impl NoisePredictor for MicroDenoiser {
    fn id(&self) -> String {
        format!(
            "micro[hidden={},frames={},shape={}]",
            self.cfg.hidden, self.cfg.frames, self.cfg.shape
        )
    }

    fn frame_shape(&self) -> FrameShape {
        self.cfg.shape
    }

    fn clip_frames(&self) -> usize {
        self.cfg.frames
    }

    fn is_conditional(&self) -> bool {
        true
    }

    fn predict(&self, z_t: &LatentClip, t: usize, y: ConditionLabel) -> Result<LatentClip> {
        self.forward(z_t, t, y)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    f: usize,
    h: usize,
    w: usize,
    ci: usize,
    c: usize,
}

struct Cache {
    temb: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    spatial: Vec<AttnCache>,
    h3: Vec<f64>,
    temporal: Vec<AttnCache>,
    h4: Vec<f64>,
    out: Vec<f64>,
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    o: Vec<f64>,
}

struct AttnWeights<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    o: &'a [f64],
}

fn attn_weights<'a>(params: &'a [f64], offsets: &[usize; 4], c: usize) -> AttnWeights<'a> {
    let s = |i: usize| &params[offsets[i]..offsets[i] + c * c];
    AttnWeights {
        q: s(0),
        k: s(1),
        v: s(2),
        o: s(3),
    }
}

fn split_two(
    grad: &mut [f64],
    a: usize,
    a_len: usize,
    b: usize,
    b_len: usize,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}

/// Sinusoidal embedding of the diffusion step.
pub(crate) fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Zero-padded 3×3 convolution applied to every frame; `w` is `[co][ci][3][3]`.
#[allow(clippy::too_many_arguments)]
fn conv3x3(
    x: &[f64],
    frames: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    // [ky][kx][ci][co] so the innermost loop is contiguous
    let mut wt = vec![0.0; 9 * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..9 {
                wt[(k * cin + ci) * cout + co] = weight[(co * cin + ci) * 9 + k];
            }
        }
    }
    let mut out = vec![0.0; frames * h * w * cout];
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[((f * h + y) * w + xx) * cout..][..cout];
                o.copy_from_slice(bias);
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &x[((f * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        let k = ky * 3 + kx;
                        for (ci, s) in src.iter().enumerate() {
                            let wrow = &wt[(k * cin + ci) * cout..][..cout];
                            for (ov, wv) in o.iter_mut().zip(wrow) {
                                *ov += s * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    frames: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    weight: &[f64],
    d_out: &[f64],
    d_x: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let g = &d_out[((f * h + y) * w + xx) * cout..][..cout];
                for (b, gv) in d_b.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = ((f * h + iy as usize) * w + ix as usize) * cin;
                        let k = ky * 3 + kx;
                        for co in 0..cout {
                            let gv = g[co];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                let wi = (co * cin + ci) * 9 + k;
                                d_w[wi] += gv * x[base + ci];
                                d_x[base + ci] += gv * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Kernel-3 convolution along the frame axis, zero-padded; `w` is `[co][ci][3]`.
fn temporal_conv(x: &[f64], frames: usize, positions: usize, c: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for p in 0..positions {
            let o = &mut out[(f * positions + p) * c..][..c];
            o.copy_from_slice(bias);
            for k in 0..3 {
                let src_f = f as isize + k as isize - 1;
                if src_f < 0 || src_f >= frames as isize {
                    continue;
                }
                let src = &x[(src_f as usize * positions + p) * c..][..c];
                for (co, ov) in o.iter_mut().enumerate() {
                    let wrow = &weight[co * c * 3..][..c * 3];
                    let mut acc = 0.0;
                    for (ci, s) in src.iter().enumerate() {
                        acc += wrow[ci * 3 + k] * s;
                    }
                    *ov += acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn temporal_conv_backward(
    x: &[f64],
    frames: usize,
    positions: usize,
    c: usize,
    weight: &[f64],
    d_out: &[f64],
    d_x: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    for f in 0..frames {
        for p in 0..positions {
            let g = &d_out[(f * positions + p) * c..][..c];
            for (b, gv) in d_b.iter_mut().zip(g) {
                *b += gv;
            }
            for k in 0..3 {
                let src_f = f as isize + k as isize - 1;
                if src_f < 0 || src_f >= frames as isize {
                    continue;
                }
                let base = (src_f as usize * positions + p) * c;
                for co in 0..c {
                    let gv = g[co];
                    for ci in 0..c {
                        let wi = (co * c + ci) * 3 + k;
                        d_w[wi] += gv * x[base + ci];
                        d_x[base + ci] += gv * weight[wi];
                    }
                }
            }
        }
    }
}

/// `x (n×a) · w (a×b)`.
fn matmul(x: &[f64], n: usize, a: usize, w: &[f64], b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        let o = &mut out[i * b..(i + 1) * b];
        for (k, xv) in x[i * a..(i + 1) * a].iter().enumerate() {
            let wrow = &w[k * b..(k + 1) * b];
            for (ov, wv) in o.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// `d_w += xᵀ·d_y` and `d_x += d_y·wᵀ` for `y = x·w` with square `w` (c×c).
fn matmul_backward(x: &[f64], n: usize, c: usize, w: &[f64], d_y: &[f64], d_x: &mut [f64], d_w: &mut [f64]) {
    for i in 0..n {
        let xi = &x[i * c..(i + 1) * c];
        let gi = &d_y[i * c..(i + 1) * c];
        let dxi = &mut d_x[i * c..(i + 1) * c];
        for k in 0..c {
            let wrow = &w[k * c..(k + 1) * c];
            let dwrow = &mut d_w[k * c..(k + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                dwrow[j] += xi[k] * gi[j];
                acc += gi[j] * wrow[j];
            }
            dxi[k] += acc;
        }
    }
}

fn attention_forward(x: &[f64], n: usize, c: usize, w: &AttnWeights<'_>) -> (Vec<f64>, AttnCache) {
    let q = matmul(x, n, c, w.q, c);
    let k = matmul(x, n, c, w.k, c);
    let v = matmul(x, n, c, w.v, c);
    let scale = 1.0 / (c as f64).sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let qi = &q[i * c..(i + 1) * c];
        let row = &mut a[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * c..(j + 1) * c];
            *r = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
            max = max.max(*r);
        }
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    let o = matmul(&a, n, n, &v, c);
    let y = matmul(&o, n, c, w.o, c);
    (y, AttnCache { q, k, v, a, o })
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    x: &[f64],
    n: usize,
    c: usize,
    w: &AttnWeights<'_>,
    cache: &AttnCache,
    d_y: &[f64],
    d_x: &mut [f64],
    grad: &mut [f64],
    offsets: &[usize; 4],
) {
    let cc = c * c;
    let mut d_o = vec![0.0; n * c];
    matmul_backward(&cache.o, n, c, w.o, d_y, &mut d_o, &mut grad[offsets[3]..offsets[3] + cc]);

    let scale = 1.0 / (c as f64).sqrt();
    let mut d_q = vec![0.0; n * c];
    let mut d_k = vec![0.0; n * c];
    let mut d_v = vec![0.0; n * c];
    let mut d_a = vec![0.0; n];
    for i in 0..n {
        let doi = &d_o[i * c..(i + 1) * c];
        let ai = &cache.a[i * n..(i + 1) * n];
        for j in 0..n {
            let vj = &cache.v[j * c..(j + 1) * c];
            d_a[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
            let dvj = &mut d_v[j * c..(j + 1) * c];
            for (dv, g) in dvj.iter_mut().zip(doi) {
                *dv += ai[j] * g;
            }
        }
        let dot: f64 = ai.iter().zip(&d_a).map(|(a, b)| a * b).sum();
        let qi = &cache.q[i * c..(i + 1) * c];
        for j in 0..n {
            let ds = ai[j] * (d_a[j] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = &cache.k[j * c..(j + 1) * c];
            let dqi = &mut d_q[i * c..(i + 1) * c];
            for (dq, kv) in dqi.iter_mut().zip(kj) {
                *dq += ds * kv;
            }
            let dkj = &mut d_k[j * c..(j + 1) * c];
            for (dk, qv) in dkj.iter_mut().zip(qi) {
                *dk += ds * qv;
            }
        }
    }
    matmul_backward(x, n, c, w.q, &d_q, d_x, &mut grad[offsets[0]..offsets[0] + cc]);
    matmul_backward(x, n, c, w.k, &d_k, d_x, &mut grad[offsets[1]..offsets[1] + cc]);
    matmul_backward(x, n, c, w.v, &d_v, d_x, &mut grad[offsets[2]..offsets[2] + cc]);
}
