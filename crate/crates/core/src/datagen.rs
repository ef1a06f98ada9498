//! Procedural street-like scenes with exact foreground masks, and the binary
//! dataset container.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "NFGS" | version u32 | count u32 | size u16
//! per record: image  size·size·3 bytes, u8 = round(pixel · 255)
//!             mask   size·size bytes, 0 or 1
//! ```
//!
//! Generated images are already quantized to multiples of 1/255, so a
//! write/read round trip is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"NFGS";
pub const DATASET_VERSION: u32 = 1;
/// First scene index of the held-out split; training scenes start at 0.
pub const TEST_INDEX_BASE: u64 = 1 << 40;
const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMaskPair {
    pub size: usize,
    /// `size × size × 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `size × size`, 1 = foreground.
    pub mask: Vec<u8>,
}

impl ImageMaskPair {
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Gradient,
    NoiseTexture,
    Flat,
    /// Picks one of the other three per scene.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    /// Inclusive range of object counts.
    pub n_objects: (usize, usize),
    pub coverage_bounds: (f64, f64),
    pub background: BackgroundKind,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 96,
            n_objects: (2, 6),
            coverage_bounds: (0.10, 0.45),
            background: BackgroundKind::Mixed,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("coverage bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        if self.size < 8 || self.size > u16::MAX as usize {
            return Err(Error::Config(format!("scene size {} out of range", self.size)));
        }
        if self.n_objects.0 > self.n_objects.1 {
            return Err(Error::Config("object count range is reversed".into()));
        }
        Ok(())
    }
}

type Rgb = [f32; 3];

const BACKGROUND_PALETTE: [Rgb; 6] = [
    [0.55, 0.62, 0.70], // overcast sky
    [0.38, 0.38, 0.40], // asphalt
    [0.30, 0.42, 0.28], // verge
    [0.60, 0.55, 0.48], // facade
    [0.22, 0.24, 0.27], // shadow
    [0.47, 0.50, 0.46], // haze
];

// Mostly saturated, but grey and silver entries overlap the background range.
const FOREGROUND_PALETTE: [Rgb; 8] = [
    [0.82, 0.16, 0.12],
    [0.90, 0.80, 0.16],
    [0.93, 0.93, 0.90],
    [0.16, 0.26, 0.76],
    [0.95, 0.56, 0.10],
    [0.74, 0.22, 0.62],
    [0.26, 0.26, 0.30],
    [0.66, 0.67, 0.70],
];

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f32) -> Rgb {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
    /// Lane-like strip: centre moves from `top_cx` to `bottom_cx` while the
    /// half-width grows from `top_hw` to `bottom_hw`.
    Lane { top_y: f32, bottom_y: f32, top_cx: f32, bottom_cx: f32, top_hw: f32, bottom_hw: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Lane { top_y, bottom_y, top_cx, bottom_cx, top_hw, bottom_hw } => {
                if y < top_y || y >= bottom_y {
                    return false;
                }
                let t = (y - top_y) / (bottom_y - top_y);
                let cx = top_cx + (bottom_cx - top_cx) * t;
                let hw = top_hw + (bottom_hw - top_hw) * t;
                (x - cx).abs() <= hw
            }
        }
    }

    /// Vertical position inside the shape in `[0, 1]`, used for shading.
    fn shade(&self, y: f32) -> f32 {
        let (a, b) = match *self {
            Shape::Rect { y0, y1, .. } => (y0, y1),
            Shape::Disc { cy, r, .. } => (cy - r, cy + r),
            Shape::Lane { top_y, bottom_y, .. } => (top_y, bottom_y),
        };
        ((y - a) / (b - a).max(1.0)).clamp(0.0, 1.0)
    }
}

fn random_shape(rng: &mut ChaCha8Rng, s: f32) -> Shape {
    match rng.gen_range(0..3) {
        0 => {
            let w = rng.gen_range(0.12..0.38) * s;
            let h = rng.gen_range(0.10..0.30) * s;
            let x0 = rng.gen_range(0.0..(s - w));
            let y0 = rng.gen_range(0.25 * s..(s - h).max(0.25 * s + 1.0));
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        1 => {
            let r = rng.gen_range(0.05..0.13) * s;
            Shape::Disc {
                cx: rng.gen_range(r..s - r),
                cy: rng.gen_range(0.3 * s..s - r),
                r,
            }
        }
        _ => {
            let top_y = rng.gen_range(0.35..0.6) * s;
            let top_cx = rng.gen_range(0.2..0.8) * s;
            let bottom_cx = top_cx + rng.gen_range(-0.3..0.3) * s;
            Shape::Lane {
                top_y,
                bottom_y: s,
                top_cx,
                bottom_cx,
                top_hw: rng.gen_range(0.015..0.035) * s,
                bottom_hw: rng.gen_range(0.05..0.10) * s,
            }
        }
    }
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let step = size as f32 / cells as f32;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fx = x as f32 / step;
            let fy = y as f32 / step;
            let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn paint_background(rng: &mut ChaCha8Rng, kind: BackgroundKind, size: usize) -> Vec<Rgb> {
    let kind = match kind {
        BackgroundKind::Mixed => match rng.gen_range(0..3) {
            0 => BackgroundKind::Gradient,
            1 => BackgroundKind::NoiseTexture,
            _ => BackgroundKind::Flat,
        },
        k => k,
    };
    let pick = |rng: &mut ChaCha8Rng| {
        let c = BACKGROUND_PALETTE[rng.gen_range(0..BACKGROUND_PALETTE.len())];
        jitter(rng, c, 0.05)
    };
    let grain: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let mut out = Vec::with_capacity(size * size);
    match kind {
        BackgroundKind::Gradient => {
            let (top, bottom) = (pick(rng), pick(rng));
            for y in 0..size {
                let c = lerp(top, bottom, y as f32 / (size - 1) as f32);
                out.extend(std::iter::repeat_n(c, size));
            }
        }
        BackgroundKind::NoiseTexture => {
            let (a, b) = (pick(rng), pick(rng));
            let noise = value_noise(rng, size, 6);
            out.extend(noise.iter().map(|&n| lerp(a, b, 0.5 + 0.5 * n)));
        }
        BackgroundKind::Flat | BackgroundKind::Mixed => {
            let c = pick(rng);
            out.extend(std::iter::repeat_n(c, size * size));
        }
    }
    for (px, g) in out.iter_mut().zip(grain) {
        *px = px.map(|v| v + g);
    }
    out
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<ImageMaskPair> {
    cfg.validate()?;
    if cfg.n_objects.1 == 0 {
        return Err(Error::CoverageUnsatisfiable { index, retries: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let size = cfg.size;
    let s = size as f32;
    let (lo, hi) = cfg.coverage_bounds;
    for _ in 0..MAX_RETRIES {
        let mut pixels = paint_background(&mut rng, cfg.background, size);
        let mut mask = vec![0u8; size * size];
        let count = rng.gen_range(cfg.n_objects.0.max(1)..=cfg.n_objects.1);
        for _ in 0..count {
            let shape = random_shape(&mut rng, s);
            let base = FOREGROUND_PALETTE[rng.gen_range(0..FOREGROUND_PALETTE.len())];
            let base = jitter(&mut rng, base, 0.06);
            let shaded = base.map(|v| v * 0.7);
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    if shape.contains(px, py) {
                        let i = y * size + x;
                        let c = lerp(base, shaded, shape.shade(py));
                        let grain = rng.gen_range(-0.03..0.03);
                        pixels[i] = c.map(|v| v + grain);
                        mask[i] = 1;
                    }
                }
            }
        }
        let pair = ImageMaskPair {
            size,
            image: pixels.iter().flat_map(|px| px.map(quantize)).collect(),
            mask,
        };
        let cov = pair.coverage();
        if cov >= lo && cov <= hi {
            return Ok(pair);
        }
    }
    Err(Error::CoverageUnsatisfiable {
        index,
        retries: MAX_RETRIES,
    })
}

/// Scenes `start..start + count`.
pub fn generate_dataset(cfg: &SceneConfig, start: u64, count: usize) -> Result<Vec<ImageMaskPair>> {
    (start..start + count as u64).map(|i| generate_scene(cfg, i)).collect()
}

pub fn write_dataset(pairs: &[ImageMaskPair], path: impl AsRef<Path>) -> Result<()> {
    let size = pairs.first().map_or(0, |p| p.size);
    if pairs.iter().any(|p| p.size != size) {
        return Err(Error::Config("all records in a dataset must share one size".into()));
    }
    if size > u16::MAX as usize {
        return Err(Error::Config(format!("size {size} does not fit the header")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(pairs.len() as u32).to_le_bytes())?;
    w.write_all(&(size as u16).to_le_bytes())?;
    for p in pairs {
        let bytes: Vec<u8> = p.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        w.write_all(&p.mask)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ImageMaskPair>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ImageMaskPair>> {
    if bytes.len() < 14 {
        return Err(Error::TruncatedFile(format!("header needs 14 bytes, file has {}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let size = u16::from_le_bytes(bytes[12..14].try_into().expect("2 bytes")) as usize;
    let record = size * size * 4;
    let body = &bytes[14..];
    if body.len() < count * record {
        return Err(Error::TruncatedFile(format!(
            "header promises {count} records of {record} bytes, payload has {}",
            body.len()
        )));
    }
    body.chunks(record)
        .take(count)
        .map(|rec| {
            let (img, mask) = rec.split_at(size * size * 3);
            if mask.iter().any(|&m| m > 1) {
                return Err(Error::Config("mask byte outside {0, 1}".into()));
            }
            Ok(ImageMaskPair {
                size,
                image: img.iter().map(|&b| b as f32 / 255.0).collect(),
                mask: mask.to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_and_index_is_bitwise_identical() {
        let a = generate_scene(&small(), 7).unwrap();
        let b = generate_scene(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&small(), 8).unwrap());
    }

    #[test]
    fn coverage_and_ranges_hold() {
        let cfg = SceneConfig::default();
        for i in 0..40 {
            let p = generate_scene(&cfg, i).unwrap();
            let c = p.coverage();
            assert!((0.10..=0.45).contains(&c), "scene {i} coverage {c}");
            assert!(p.mask.iter().all(|&m| m <= 1));
            assert!(p.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_objects_is_rejected() {
        let cfg = SceneConfig {
            n_objects: (0, 0),
            ..small()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::CoverageUnsatisfiable { .. })));
    }

    #[test]
    fn foreground_and_background_statistics_differ() {
        let cfg = SceneConfig::default();
        let (mut fg, mut bg) = ([0.0f64; 3], [0.0f64; 3]);
        let (mut nf, mut nb) = (0usize, 0usize);
        for i in 0..32 {
            let p = generate_scene(&cfg, i).unwrap();
            for (px, &m) in p.image.chunks(3).zip(&p.mask) {
                let acc = if m == 1 { nf += 1; &mut fg } else { nb += 1; &mut bg };
                for c in 0..3 {
                    acc[c] += px[c] as f64;
                }
            }
        }
        let gap: f64 = (0..3).map(|c| (fg[c] / nf as f64 - bg[c] / nb as f64).abs()).sum::<f64>() / 3.0;
        assert!(gap > 0.05, "mean channel gap {gap}");
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nfgs");
        let pairs = generate_dataset(&small(), 0, 10).unwrap();
        write_dataset(&pairs, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), pairs);

        let mut bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
        bytes[8..12].copy_from_slice(&11u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::TruncatedFile(_))));
    }
}
