//! Reconstruction losses: MSE, Gaussian-window SSIM, the per-stream
//! weighted combination and the foreground/background mix.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// SSIM weight inside a stream loss.
    pub lambda: f64,
    /// Foreground weight in the total loss.
    pub alpha: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            alpha: 0.5,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "lambda {} and alpha {} must lie in [0, 1]",
                self.lambda, self.alpha
            )));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window {} must be odd and >= 3", self.ssim_window)));
        }
        if self.ssim_sigma <= 0.0 {
            return Err(Error::Config("SSIM sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err("mse", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// `[.., H, W, 3]` → `[(..)·3, H, W]`
fn channel_planes<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match shape.as_slice() {
        [h, w, 3] => {
            let p = g.permute(x, &[2, 0, 1])?;
            g.reshape(p, &[3, *h, *w])
        }
        [b, h, w, 3] => {
            let p = g.permute(x, &[0, 3, 1, 2])?;
            g.reshape(p, &[b * 3, *h, *w])
        }
        _ => Err(shape_err("ssim", format!("expected [H, W, 3] or [B, H, W, 3], got {shape:?}"))),
    }
}

/// Mean local SSIM over every valid window position, channel and batch entry.
pub fn ssim<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err("ssim", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let x = channel_planes(g, a)?;
    let y = channel_planes(g, b)?;
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    if h < cfg.ssim_window || w < cfg.ssim_window {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: cfg.ssim_window,
        });
    }
    let taps: Vec<T> = gaussian_taps(cfg.ssim_window, cfg.ssim_sigma).into_iter().map(T::of).collect();
    let (c1, c2) = (T::of(cfg.c1()), T::of(cfg.c2()));
    let two = T::of(2.0);

    let mu_x = g.filter2d(x, &taps)?;
    let mu_y = g.filter2d(y, &taps)?;
    let xx = g.square(x)?;
    let yy = g.square(y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.filter2d(xx, &taps)?;
    let e_yy = g.filter2d(yy, &taps)?;
    let e_xy = g.filter2d(xy, &taps)?;

    let mu_x2 = g.square(mu_x)?;
    let mu_y2 = g.square(mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_x2)?;
    let var_y = g.sub(e_yy, mu_y2)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let l_num = g.mul_scalar(mu_xy, two)?;
    let l_num = g.add_scalar(l_num, c1)?;
    let c_num = g.mul_scalar(cov, two)?;
    let c_num = g.add_scalar(c_num, c2)?;
    let num = g.mul(l_num, c_num)?;

    let l_den = g.add(mu_x2, mu_y2)?;
    let l_den = g.add_scalar(l_den, c1)?;
    let c_den = g.add(var_x, var_y)?;
    let c_den = g.add_scalar(c_den, c2)?;
    let den = g.mul(l_den, c_den)?;

    let map = g.div(num, den)?;
    g.mean(map)
}

/// `λ·(1 − SSIM) + (1 − λ)·MSE`
pub fn stream_loss<T: Scalar>(g: &mut Graph<T>, gt: Var, pred: Var, cfg: &LossConfig) -> Result<Var> {
    let s = ssim(g, gt, pred, cfg)?;
    let m = mse(g, gt, pred)?;
    let dissim = g.rsub_scalar(T::one(), s)?;
    let a = g.mul_scalar(dissim, T::of(cfg.lambda))?;
    let b = g.mul_scalar(m, T::of(1.0 - cfg.lambda))?;
    g.add(a, b)
}

/// `α·L_fore + (1 − α)·L_back`
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_fore: Var, l_back: Var, cfg: &LossConfig) -> Result<Var> {
    let a = g.mul_scalar(l_fore, T::of(cfg.alpha))?;
    let b = g.mul_scalar(l_back, T::of(1.0 - cfg.alpha))?;
    g.add(a, b)
}

/// Splits an `H×W×3` image by an `H×W` binary mask into the foreground-only
/// and background-only images.
pub fn masked_targets(image: &[f32], mask: &[u8]) -> Result<(Vec<f32>, Vec<f32>)> {
    if image.len() != mask.len() * 3 {
        return Err(shape_err(
            "masked_targets",
            format!("{} image values for {} mask pixels", image.len(), mask.len()),
        ));
    }
    let mut fore = Vec::with_capacity(image.len());
    let mut back = Vec::with_capacity(image.len());
    for (px, &m) in image.chunks(3).zip(mask) {
        let keep = m != 0;
        for &v in px {
            fore.push(if keep { v } else { 0.0 });
            back.push(if keep { 0.0 } else { v });
        }
    }
    Ok((fore, back))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
        g.value(v)[0].f64()
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[4, 4, 3], vec![0.0; 48]).unwrap();
        let b = g.constant(&[4, 4, 3], vec![0.5; 48]).unwrap();
        let m = mse(&mut g, a, a).unwrap();
        assert_eq!(scalar_of(&g, m), 0.0);
        let m = mse(&mut g, a, b).unwrap();
        assert_eq!(scalar_of(&g, m), 0.25);
        let c = g.constant(&[48], vec![0.0; 48]).unwrap();
        assert!(mse(&mut g, a, c).is_err());
    }

    #[test]
    fn ssim_of_identical_and_constant_images() {
        let cfg = LossConfig::default();
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let a = g.constant(&[16, 16, 3], data).unwrap();
        let s = ssim(&mut g, a, a, &cfg).unwrap();
        assert!((scalar_of(&g, s) - 1.0).abs() < 1e-6);
        let c = g.constant(&[16, 16, 3], vec![0.3; 768]).unwrap();
        let s = ssim(&mut g, c, c, &cfg).unwrap();
        assert!((scalar_of(&g, s) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let cfg = LossConfig::default();
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[8, 8, 3], vec![0.0; 192]).unwrap();
        assert!(matches!(ssim(&mut g, a, a, &cfg), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn stream_loss_endpoints() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[12, 12, 3], (0..432).map(|i| (i as f64 * 0.01).sin().abs()).collect()).unwrap();
        let b = g.constant(&[12, 12, 3], (0..432).map(|i| (i as f64 * 0.02).cos().abs()).collect()).unwrap();
        let base = LossConfig::default();
        let z = stream_loss(&mut g, a, a, &base).unwrap();
        assert!(scalar_of(&g, z).abs() < 1e-12);

        let s = ssim(&mut g, a, b, &base).unwrap();
        let m = mse(&mut g, a, b).unwrap();
        let (sv, mv) = (scalar_of(&g, s), scalar_of(&g, m));
        for lambda in [0.0, 0.2, 1.0] {
            let cfg = LossConfig { lambda, ..base };
            let l = stream_loss(&mut g, a, b, &cfg).unwrap();
            let want = lambda * (1.0 - sv) + (1.0 - lambda) * mv;
            assert!((scalar_of(&g, l) - want).abs() < 1e-12, "lambda {lambda}");
        }
    }

    #[test]
    fn total_loss_mixes() {
        let mut g = Graph::<f64>::new();
        let f = g.variable(&[1], vec![0.4]).unwrap();
        let b = g.variable(&[1], vec![0.2]).unwrap();
        let t = total_loss(&mut g, f, b, &LossConfig::default()).unwrap();
        assert!((scalar_of(&g, t) - 0.3).abs() < 1e-15);
        g.backward(t).unwrap();
        assert_eq!(g.grad(f).unwrap(), &[0.5]);
        assert_eq!(g.grad(b).unwrap(), &[0.5]);

        let cfg = LossConfig { alpha: 1.0, ..Default::default() };
        let t = total_loss(&mut g, f, b, &cfg).unwrap();
        assert_eq!(scalar_of(&g, t), 0.4);
        let same = g.variable(&[1], vec![0.7]).unwrap();
        for alpha in [0.0, 0.3, 1.0] {
            let cfg = LossConfig { alpha, ..Default::default() };
            let t = total_loss(&mut g, same, same, &cfg).unwrap();
            assert!((scalar_of(&g, t) - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_targets_partition() {
        let image: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let mask = [1u8, 0, 0, 1];
        let (f, b) = masked_targets(&image, &mask).unwrap();
        for i in 0..12 {
            assert_eq!(f[i] + b[i], image[i]);
        }
        assert_eq!(&f[3..6], &[0.0; 3]);
        let (f, _) = masked_targets(&image, &[1; 4]).unwrap();
        assert_eq!(f, image);
        assert!(masked_targets(&image, &[1; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { ssim_window: 10, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
    }
}
