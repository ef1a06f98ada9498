//! Binary PPM (P6) rendering of inputs, saliency maps and reconstructions.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]` (clamped on write).
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Rgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::BadImageSize(format!(
                "{width}x{height}x3 needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Rgb { width, height, data })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Blue (low) to red (high) ramp through white.
fn ramp(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let u = t * 2.0;
        [u, u, 1.0]
    } else {
        let u = (1.0 - t) * 2.0;
        [1.0, u, u]
    }
}

/// Token scores painted over the patch grid, min-max normalised per image.
/// Tokens outside `kept` (when given) are darkened to show the selection.
pub fn saliency_map(scores: &[f32], grid: usize, patch: usize, kept: Option<&[usize]>) -> Result<Rgb> {
    if scores.len() != grid * grid {
        return Err(Error::DimMismatch(format!("{} scores for a {grid}x{grid} grid", scores.len())));
    }
    let lo = scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut keep = vec![kept.is_none(); scores.len()];
    for &i in kept.unwrap_or(&[]) {
        keep[i] = true;
    }
    let size = grid * patch;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (y / patch) * grid + x / patch;
            let mut c = ramp((scores[t] - lo) / span);
            if !keep[t] {
                c = c.map(|v| v * 0.25);
            }
            data.extend(c);
        }
    }
    Rgb::new(size, size, data)
}

/// Paths written by [`write_panel`], in order.
pub fn panel_paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    ["input", "saliency", "recon_fore", "recon_back"].map(|k| dir.join(format!("{stem}_{k}.ppm")))
}

/// Writes the four images for one input. Missing reconstructions are
/// written black so every input yields the same four files.
pub fn write_panel(
    dir: &Path,
    stem: &str,
    input: &Rgb,
    saliency: &Rgb,
    recon: Option<(&Rgb, &Rgb)>,
) -> Result<[PathBuf; 4]> {
    let paths = panel_paths(dir, stem);
    let blank = Rgb::new(input.width, input.height, vec![0.0; input.data.len()])?;
    let (fore, back) = recon.unwrap_or((&blank, &blank));
    for (img, path) in [input, saliency, fore, back].into_iter().zip(&paths) {
        img.write_ppm(path)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let img = Rgb::new(2, 1, vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn saliency_map_extremes_and_dimming() {
        let map = saliency_map(&[0.0, 1.0, 0.5, 0.5], 2, 2, Some(&[0, 1])).unwrap();
        assert_eq!((map.width, map.height), (4, 4));
        assert_eq!(&map.data[0..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&map.data[2 * 3..3 * 3], &[1.0, 0.0, 0.0]);
        // bottom-left token dropped: white dimmed
        let px = (2 * 4) * 3;
        assert_eq!(&map.data[px..px + 3], &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn panel_writes_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb::new(4, 4, vec![0.5; 48]).unwrap();
        let paths = write_panel(dir.path(), "s0", &img, &img, None).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);
        assert!(paths.iter().all(|p| p.exists()));
    }
}
