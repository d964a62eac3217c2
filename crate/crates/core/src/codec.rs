//! Deterministic frame codec standing in for the latent auto-encoder.
//!
//! `encode` block-averages each channel over `factor × factor` tiles and maps
//! `[0, 1]` pixels to `[-1, 1]` latents with `z = 2·pool(x) − 1`. `decode`
//! inverts the affine map, clamps, snaps to the 8-bit levels `k/255` that a
//! PPM file can hold, and upsamples by pixel replication.
//!
//! Snapping is what makes the round trip exact: for pixels already on the
//! 8-bit grid, `decode(encode(x))` at factor 1 returns `x` bit for bit, and
//! `decode ∘ encode` is idempotent at every factor.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FrameShape, LatentFrame};

pub const DEFAULT_FACTOR: usize = 4;
const LATENT_MAGIC: &[u8; 4] = b"FSLZ";

/// An RGB frame with values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{height}x{width} RGB frame needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_size(&self, other: &PixelFrame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Ordered frames of one video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelVideo {
    pub frames: Vec<PixelFrame>,
}

impl PixelVideo {
    pub fn new(frames: Vec<PixelFrame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some(k) = frames.iter().position(|f| !f.same_size(first)) {
                return Err(Error::shape(format!("video frame {k} differs in size from frame 0")));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Latent shape produced by `encode` for a `height × width` frame.
pub fn latent_shape(height: usize, width: usize, factor: usize) -> Result<FrameShape> {
    if factor == 0 || height % factor != 0 || width % factor != 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "{height}x{width} frame is not divisible by factor {factor}"
        )));
    }
    Ok(FrameShape::new(height / factor, width / factor, 3))
}

pub fn encode(x: &PixelFrame, factor: usize) -> Result<LatentFrame> {
    let shape = latent_shape(x.height, x.width, factor)?;
    let n = (factor * factor) as f64;
    let mut data = Vec::with_capacity(shape.len());
    for by in 0..shape.height {
        for bx in 0..shape.width {
            for c in 0..3 {
                // anchored sum so constant tiles pool to their value exactly
                let anchor = x.get(by * factor, bx * factor, c);
                let mut dev = 0.0;
                for y in by * factor..(by + 1) * factor {
                    for xx in bx * factor..(bx + 1) * factor {
                        dev += x.get(y, xx, c) - anchor;
                    }
                }
                let mean = anchor + dev / n;
                data.push(2.0 * mean - 1.0);
            }
        }
    }
    LatentFrame::new(shape, data)
}

/// Nearest 8-bit level of `(z + 1) / 2`, clamped to `[0, 1]`.
#[inline]
fn latent_to_pixel(z: f64) -> f64 {
    let x = (0.5 * z + 0.5).clamp(0.0, 1.0);
    (x * 255.0).round() / 255.0
}

pub fn decode(z: &LatentFrame, factor: usize) -> Result<PixelFrame> {
    let shape = z.shape();
    if shape.channels != 3 {
        return Err(Error::shape(format!("decode needs 3 latent channels, got {}", shape.channels)));
    }
    if factor == 0 {
        return Err(Error::shape("upsample factor must be positive"));
    }
    if !z.is_finite() {
        return Err(Error::Numerical("cannot decode non-finite latents".into()));
    }
    let (h, w) = (shape.height * factor, shape.width * factor);
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = latent_to_pixel(z.get(y / factor, x / factor, c));
            }
        }
    }
    Ok(PixelFrame {
        height: h,
        width: w,
        data,
    })
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm<W: Write>(frame: &PixelFrame, mut out: W) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", frame.width, frame.height)?;
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

pub fn save_ppm(frame: &PixelFrame, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_ppm(frame, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<PixelFrame> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ppm(BufReader::new(file), path)
}

pub fn read_ppm<R: BufRead>(mut input: R, path: &Path) -> Result<PixelFrame> {
    let bad = |reason: &str| Error::Format {
        kind: "PPM",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut tokens = Vec::with_capacity(4);
    let mut token = Vec::new();
    let mut in_comment = false;
    while tokens.len() < 4 {
        let mut byte = [0u8; 1];
        if input.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let b = byte[0];
        if in_comment {
            in_comment = b != b'\n';
            continue;
        }
        if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(b);
        }
    }
    if tokens[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let mut bytes = vec![0u8; width * height * 3];
    input
        .read_exact(&mut bytes)
        .map_err(|_| bad("pixel data shorter than declared"))?;
    let data = bytes.iter().map(|b| f64::from(*b) / 255.0).collect();
    PixelFrame::new(height, width, data)
}

/// Raw latent dump: 16-byte header (`FSLZ`, then H, W, C as u32 LE) followed
/// by H·W·C little-endian f32 values in HWC order.
pub fn write_latent<W: Write>(z: &LatentFrame, mut out: W) -> std::io::Result<()> {
    let s = z.shape();
    out.write_all(LATENT_MAGIC)?;
    for d in [s.height, s.width, s.channels] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(s.len() * 4);
    for v in z.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&bytes)
}

pub fn save_latent(z: &LatentFrame, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_latent(z, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_latent(path: &Path) -> Result<LatentFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_latent(&bytes, path)
}

pub fn read_latent(bytes: &[u8], path: &Path) -> Result<LatentFrame> {
    let bad = |reason: &str| Error::Format {
        kind: "latent",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != LATENT_MAGIC {
        return Err(bad("missing FSLZ header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = FrameShape::new(dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != shape.len() * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    LatentFrame::new(shape, data)
}

/// File name of frame `k` inside a clip directory.
pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.ppm")
}

pub fn latent_file_name(k: usize) -> String {
    format!("frame_{k:04}.fslz")
}

/// Writes every frame of `video` into `dir` (created if missing).
pub fn save_video(video: &PixelVideo, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, frame) in video.frames.iter().enumerate() {
        save_ppm(frame, &dir.join(frame_file_name(k)))?;
    }
    Ok(())
}

/// Reads `frame_0000.ppm`, `frame_0001.ppm`, ... from `dir` until the first gap.
pub fn load_video(dir: &Path) -> Result<PixelVideo> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "clip directory not found"),
        ));
    }
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_ppm(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Format {
            kind: "clip",
            path: dir.to_path_buf(),
            reason: "no frame_0000.ppm".into(),
        });
    }
    PixelVideo::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> PixelFrame {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        PixelFrame::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_half_is_zero_latent() {
        let z = encode(&PixelFrame::filled(8, 8, 0.5), 4).unwrap();
        assert_eq!(z.shape(), FrameShape::new(2, 2, 3));
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_factor_is_affine() {
        let x = frame_from_fn(3, 2, |y, x, c| ((y * 7 + x * 3 + c) % 256) as f64 / 255.0);
        let z = encode(&x, 1).unwrap();
        for (zi, xi) in z.data().iter().zip(x.data()) {
            assert_eq!(*zi, 2.0 * xi - 1.0);
        }
    }

    #[test]
    fn checkerboard_pools_to_zero() {
        let x = frame_from_fn(4, 4, |y, x, _| ((y + x) % 2) as f64);
        let z = encode(&x, 2).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_factor_round_trip_is_exact_on_8bit_grid() {
        let x = frame_from_fn(16, 16, |y, x, c| ((y * 16 + x) * 3 + c) as f64 % 256.0 / 255.0);
        let back = decode(&encode(&x, 1).unwrap(), 1).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn black_latent_decodes_to_zero() {
        let z = LatentFrame::filled(FrameShape::new(2, 2, 3), -1.0);
        let x = decode(&z, 3).unwrap();
        assert_eq!((x.height(), x.width()), (6, 6));
        assert!(x.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_is_idempotent() {
        for factor in [1, 2, 3, 4] {
            let x = frame_from_fn(12, 12, |y, x, c| {
                ((y * 37 + x * 11 + c * 5) % 97) as f64 / 96.0
            });
            let once = decode(&encode(&x, factor).unwrap(), factor).unwrap();
            let twice = decode(&encode(&once, factor).unwrap(), factor).unwrap();
            assert_eq!(once, twice, "factor {factor}");
        }
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(encode(&PixelFrame::filled(6, 8, 0.1), 4), Err(Error::Shape(_))));
        let z = LatentFrame::zeros(FrameShape::new(2, 2, 1));
        assert!(decode(&z, 2).is_err());
        assert!(PixelFrame::new(1, 1, vec![0.0, 1.2, 0.0]).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let x = frame_from_fn(5, 7, |y, x, c| ((y * 31 + x * 7 + c) % 256) as f64 / 255.0);
        let mut buf = Vec::new();
        write_ppm(&x, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n7 5\n255\n"));
        let back = read_ppm(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, x);

        let with_comment = [b"P6\n# made by hand\n7 5\n255\n".as_slice(), &buf[11..]].concat();
        assert_eq!(read_ppm(&with_comment[..], Path::new("mem")).unwrap(), x);
        assert!(read_ppm(&buf[..buf.len() - 1], Path::new("mem")).is_err());
        assert!(read_ppm(&b"P3\n1 1\n255\n0 0 0"[..], Path::new("mem")).is_err());
    }

    #[test]
    fn latent_file_layout() {
        let z = LatentFrame::new(FrameShape::new(1, 2, 3), vec![0.5, -1.0, 0.25, 0.0, 1.0, -0.125]).unwrap();
        let mut buf = Vec::new();
        write_latent(&z, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(&buf[..4], b"FSLZ");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(read_latent(&buf, Path::new("mem")).unwrap(), z);
        assert!(read_latent(&buf[..20], Path::new("mem")).is_err());
    }
}
