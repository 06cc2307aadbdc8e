//! Procedural image/mask pairs and the `DXP1` dataset container.
//!
//! Masks are unions of one to three ellipses or rounded (superelliptic)
//! blobs. Images combine a smooth background texture, a soft intensity shift
//! inside the mask, fine Gaussian noise and, sometimes, a burned-in date
//! stamp placed outside the mask.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use dxp_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidanceSpec};
use crate::rng::SeedStream;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;
const MAX_GEOMETRY_ATTEMPTS: usize = 100;
pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Original,
    /// `guidance: None` means condition embedding only (no segmenter guidance).
    Synthetic { seed: u64, guidance: Option<GuidanceSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[1, H, W]`, values in `[-1, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub provenance: Provenance,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean()
    }

    /// Mask recoded to `{-1, +1}` for use as a diffusion target or condition.
    pub fn mask_signed(&self) -> Tensor {
        self.mask.map(|m| 2.0 * m - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training split restricted to the first `fraction` of its pairs
    /// (at least one). The test split is kept whole.
    pub fn few_shot(&self, fraction: f64) -> Dataset {
        let n = ((self.train.len() as f64 * fraction).round() as usize).clamp(1, self.train.len().max(1));
        Dataset {
            train: self.train.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    /// Dataset of synthesized pairs, all stored in the train split.
    pub fn from_pairs(height: usize, width: usize, pairs: Vec<SamplePair>) -> Dataset {
        Dataset {
            height,
            width,
            train: pairs,
            test: Vec::new(),
        }
    }
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    if matches!(h, 32 | 64) && matches!(w, 32 | 64) {
        Ok(())
    } else {
        Err(Error::invalid(format!("image extents must be 32 or 64, got {h}x{w}")))
    }
}

/// Deterministic corpus of `count` pairs split 9:1 into train/test.
pub fn generate(seed: u64, count: usize, height: usize, width: usize) -> Result<Dataset> {
    check_extent(height, width)?;
    if count < 10 {
        return Err(Error::invalid(format!("need at least 10 pairs, got {count}")));
    }
    let stream = SeedStream::new(seed).substream("data");
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| generate_pair(&mut stream.rng(i as u64), height, width))
        .collect::<Result<Vec<_>>>()?;
    let n_train = (count as f64 * TRAIN_FRACTION).round() as usize;
    let mut pairs = pairs;
    let test = pairs.split_off(n_train);
    Ok(Dataset {
        height,
        width,
        train: pairs,
        test,
    })
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    // 2 for an ellipse, larger for rounded-rectangle-like blobs
    power: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Blob {
            cx: rng.random_range(-0.55..0.55),
            cy: rng.random_range(-0.55..0.55),
            rx: rng.random_range(0.15..0.5),
            ry: rng.random_range(0.15..0.5),
            angle: rng.random_range(0.0..PI),
            power: if rng.random_bool(0.5) { 2.0 } else { rng.random_range(3.0..5.0) },
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let du = u - self.cx;
        let dv = v - self.cy;
        let a = (c * du + s * dv) / self.rx;
        let b = (-s * du + c * dv) / self.ry;
        a.abs().powf(self.power) + b.abs().powf(self.power) <= 1.0
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Vec<f64>> {
    for _ in 0..MAX_GEOMETRY_ATTEMPTS {
        let n_blobs = rng.random_range(1..=3);
        let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::random(rng)).collect();
        let mut mask = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let v = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
                let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
                if blobs.iter().any(|b| b.contains(u, v)) {
                    mask[i * w + j] = 1.0;
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            return Ok(mask);
        }
    }
    Err(Error::DegenerateGeometry(MAX_GEOMETRY_ATTEMPTS))
}

fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut acc, mut n) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        acc += src[y as usize * w + x as usize];
                        n += 1.0;
                    }
                }
            }
            out[i as usize * w + j as usize] = acc / n;
        }
    }
    out
}

/// 3x5 bitmaps for `0-9` and `/`, row-major, top row first.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b001, 0b001, 0b010, 0b100, 0b100],
];
const SLASH: usize = 10;

fn date_stamp(rng: &mut ChaCha8Rng, width: usize) -> Vec<usize> {
    let mut digits = |n: u32, len: usize| -> Vec<usize> {
        let v = rng.random_range(0..n);
        let s = format!("{v:0len$}");
        s.bytes().map(|b| usize::from(b - b'0')).collect()
    };
    let month = digits(12, 2);
    let day = digits(28, 2);
    let mut out = Vec::new();
    // Full "yyyy/mm/dd" needs 40 columns; narrow images get "mm/dd".
    if width >= 48 {
        out.extend(digits(30, 2).iter().map(|d| d % 10));
        out.splice(0..0, [2, 0]);
        out.push(SLASH);
    }
    out.extend(month);
    out.push(SLASH);
    out.extend(day);
    out
}

fn draw_stamp(rng: &mut ChaCha8Rng, image: &mut [f64], mask: &[f64], h: usize, w: usize) {
    let glyphs = date_stamp(rng, w);
    let text_w = glyphs.len() * 4 - 1;
    let text_h = 5;
    if text_w + 2 > w {
        return;
    }
    // Try each corner band; keep the first placement that misses the mask.
    let rows = [1, h - text_h - 1];
    let cols = [1, w - text_w - 1];
    let start = rng.random_range(0..4);
    for k in 0..4 {
        let idx = (start + k) % 4;
        let (r0, c0) = (rows[idx / 2], cols[idx % 2]);
        let clear = (r0.saturating_sub(1)..(r0 + text_h + 1).min(h))
            .all(|i| (c0.saturating_sub(1)..(c0 + text_w + 1).min(w)).all(|j| mask[i * w + j] == 0.0));
        if !clear {
            continue;
        }
        for (g, &glyph) in glyphs.iter().enumerate() {
            for (row, bits) in GLYPHS[glyph].iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        image[(r0 + row) * w + c0 + g * 4 + col] = 0.9;
                    }
                }
            }
        }
        return;
    }
}

fn generate_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<SamplePair> {
    let mask = random_mask(rng, h, w)?;
    let soft = box_blur(&box_blur(&mask, h, w, 1), h, w, 1);

    let base = rng.random_range(-0.55..-0.25);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..2.5) * PI;
            let dir = rng.random_range(0.0..2.0 * PI);
            (rng.random_range(0.05..0.15), freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let shift = rng.random_range(0.35..0.6);
    let inner_freq = rng.random_range(1.0..3.0) * PI;
    let inner_phase = rng.random_range(0.0..2.0 * PI);

    let mut image = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
            let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let texture: f64 = waves.iter().map(|(a, fx, fy, p)| a * (fx * u + fy * v + p).cos()).sum();
            let inner = 0.08 * (inner_freq * (u + v) + inner_phase).cos();
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.06;
            image[i * w + j] = base + texture + soft[i * w + j] * (shift + inner) + noise;
        }
    }
    if rng.random_bool(0.35) {
        draw_stamp(rng, &mut image, &mask, h, w);
    }
    // Stored planes are f32; round now so save/load is bit-exact.
    let image: Vec<f64> = image.iter().map(|&x| f64::from(x.clamp(-1.0, 1.0) as f32)).collect();
    Ok(SamplePair {
        image: Tensor::new([1, h, w], image)?,
        mask: Tensor::new([1, h, w], mask)?,
        provenance: Provenance::Original,
    })
}

// ---------------------------------------------------------------------------
// DXP1 container

const MAGIC: &[u8; 4] = b"DXP1";
pub const FORMAT_VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: "dataset",
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn plane(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn bad(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            what: "dataset",
            offset: offset as u64,
            msg,
        }
    }
}

fn write_guidance(out: &mut Vec<u8>, spec: &GuidanceSpec) {
    out.push(u8::from(spec.use_y1));
    out.push(u8::from(spec.use_y2));
    let (tag, value) = match spec.mode {
        GuidanceMode::Temperature(t) => (0u8, t),
        GuidanceMode::Scale(s) => (1u8, s),
    };
    out.push(tag);
    out.extend_from_slice(&value.to_le_bytes());
    out.extend_from_slice(&spec.y2_weight.to_le_bytes());
    out.push(u8::from(spec.drop_half));
}

fn read_guidance(r: &mut Reader<'_>) -> Result<GuidanceSpec> {
    let use_y1 = r.u8("guidance flags")? != 0;
    let use_y2 = r.u8("guidance flags")? != 0;
    let at = r.pos;
    let tag = r.u8("guidance mode")?;
    let value = r.f64("guidance value")?;
    let mode = match tag {
        0 => GuidanceMode::Temperature(value),
        1 => GuidanceMode::Scale(value),
        t => return Err(r.bad(at, format!("unknown guidance mode tag {t}"))),
    };
    let y2_weight = r.f64("y2 weight")?;
    let drop_half = r.u8("drop-half flag")? != 0;
    Ok(GuidanceSpec {
        use_y1,
        use_y2,
        mode,
        y2_weight,
        drop_half,
    })
}

fn plane_f32(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for v in [ds.height, ds.width, ds.train.len(), ds.test.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for pair in ds.train.iter().chain(&ds.test) {
        match &pair.provenance {
            Provenance::Original => out.push(0),
            Provenance::Synthetic { seed, guidance } => {
                out.push(1);
                out.extend_from_slice(&seed.to_le_bytes());
                match guidance {
                    None => out.push(0),
                    Some(spec) => {
                        out.push(1);
                        write_guidance(&mut out, spec);
                    }
                }
            }
        }
        plane_f32(&mut out, &pair.image);
        plane_f32(&mut out, &pair.mask);
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.bad(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let n_train = r.u32("train count")? as usize;
    let n_test = r.u32("test count")? as usize;
    if height == 0 || width == 0 || height > 4096 || width > 4096 {
        return Err(r.bad(5, format!("implausible extents {height}x{width}")));
    }
    let n = height * width;
    let mut pairs = Vec::with_capacity((n_train + n_test).min(1 << 16));
    for _ in 0..n_train + n_test {
        let at = r.pos;
        let provenance = match r.u8("provenance")? {
            0 => Provenance::Original,
            1 => {
                let seed = r.u64("synthetic seed")?;
                let guidance = match r.u8("guidance flag")? {
                    0 => None,
                    _ => Some(read_guidance(&mut r)?),
                };
                Provenance::Synthetic { seed, guidance }
            }
            t => return Err(r.bad(at, format!("unknown provenance tag {t}"))),
        };
        let image = r.plane(n, "image plane")?;
        let at = r.pos;
        let mask = r.plane(n, "mask plane")?;
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(r.bad(at, "mask plane is not binary".into()));
        }
        pairs.push(SamplePair {
            image: Tensor::new([1, height, width], image)?,
            mask: Tensor::new([1, height, width], mask)?,
            provenance,
        });
    }
    if r.pos != buf.len() {
        return Err(r.bad(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let test = pairs.split_off(n_train);
    Ok(Dataset {
        height,
        width,
        train: pairs,
        test,
    })
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&fs::read(path)?)
}
