//! PSNR and SSIM on clamped volumes.
//!
//! Both metrics clip their inputs to the configured range first. PSNR is
//! computed over the whole volume; the 3D SSIM score averages slice-wise 2D
//! SSIM along each axis and then over the three axes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub lo: f32,
    pub hi: f32,
}

impl MetricConfig {
    pub const DENTAL: MetricConfig = MetricConfig { lo: 0.0, hi: 0.090 };
    pub const SPINE: MetricConfig = MetricConfig { lo: 0.0, hi: 0.051 };
    pub const WALNUT: MetricConfig = MetricConfig { lo: 0.0, hi: 0.084 };
    pub const UNIT: MetricConfig = MetricConfig { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        let cfg = MetricConfig { lo, hi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::invalid(format!("clamp range [{}, {}] is empty", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.hi as f64 - self.lo as f64
    }

    #[inline]
    fn clamp(&self, v: f32) -> f64 {
        v.clamp(self.lo, self.hi) as f64
    }
}

fn check_shapes(x: &Volume, reference: &Volume) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

/// Mean squared error after clamping.
pub fn clamped_mse(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(x, reference)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (cfg.clamp(a) - cfg.clamp(b)).powi(2))
        .sum();
    Ok(sum / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the clamped
/// inputs are identical.
pub fn psnr(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<f64> {
    let mse = clamped_mse(x, reference, cfg)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (cfg.range().powi(2) / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Half-sample symmetric reflection (`-1 -> 0`, `n -> n-1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn blur(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kw) in k.iter().enumerate() {
                acc += kw * row[reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, kw) in k.iter().enumerate() {
            let src = reflect(y as isize + t as isize - r, h) * w;
            for x in 0..w {
                out[y * w + x] += kw * tmp[src + x];
            }
        }
    }
    out
}

/// Mean Gaussian-windowed SSIM of two `h × w` images, already clamped.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (blur(a, h, w, &k), blur(b, h, w, &k));
    let (e_aa, e_bb, e_ab) = (blur(&aa, h, w, &k), blur(&bb, h, w, &k), blur(&ab, h, w, &k));
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (h * w) as f64
}

fn check_window(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs every dimension >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// 2D SSIM of single-slice volumes (`nz == 1`).
pub fn ssim2d(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(x, reference)?;
    if x.nz() != 1 {
        return Err(Error::invalid("ssim2d expects a single slice"));
    }
    let (h, w) = (x.ny(), x.nx());
    check_window(h, w)?;
    let a: Vec<f64> = x.data().iter().map(|&v| cfg.clamp(v)).collect();
    let b: Vec<f64> = reference.data().iter().map(|&v| cfg.clamp(v)).collect();
    Ok(ssim_plane(&a, &b, h, w, cfg.range()))
}

fn axis_mean(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> f64 {
    let [n, h, w] = x.shape();
    let per_slice: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|s| {
            let a: Vec<f64> = x.slice(s).iter().map(|&v| cfg.clamp(v)).collect();
            let b: Vec<f64> = reference.slice(s).iter().map(|&v| cfg.clamp(v)).collect();
            ssim_plane(&a, &b, h, w, cfg.range())
        })
        .collect();
    per_slice.iter().sum::<f64>() / n as f64
}

/// Per-axis SSIM means, in `[z, y, x]` slicing order.
pub fn ssim_axes(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<[f64; 3]> {
    cfg.validate()?;
    check_shapes(x, reference)?;
    let [nz, ny, nx] = x.shape();
    for d in [nz, ny, nx] {
        if d < SSIM_WINDOW {
            return Err(Error::invalid(format!(
                "SSIM needs every dimension >= {SSIM_WINDOW}, got {:?}",
                x.shape()
            )));
        }
    }
    let orders = [[0, 1, 2], [1, 0, 2], [2, 0, 1]];
    let mut out = [0.0; 3];
    for (o, order) in out.iter_mut().zip(orders) {
        *o = axis_mean(&x.permuted(order), &reference.permuted(order), cfg);
    }
    Ok(out)
}

/// Mean over the three axes of slice-wise 2D SSIM.
pub fn ssim3(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<f64> {
    let axes = ssim_axes(x, reference, cfg)?;
    Ok(axes.iter().sum::<f64>() / 3.0)
}

/// `ssim2d` for single slices and `ssim3` otherwise.
pub fn ssim(x: &Volume, reference: &Volume, cfg: &MetricConfig) -> Result<f64> {
    if x.nz() == 1 {
        ssim2d(x, reference, cfg)
    } else {
        ssim3(x, reference, cfg)
    }
}

/// Serializes PSNR values with `"inf"` for identical inputs.
pub fn psnr_to_json(value: f64) -> serde_json::Value {
    if value.is_infinite() {
        serde_json::Value::String("inf".into())
    } else {
        serde_json::json!(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        Volume::from_fn(shape, |z, y, x| ((z * 7 + y * 3 + x) % 13) as f32 / 13.0)
    }

    #[test]
    fn identical_inputs_are_infinite() {
        let v = ramp([1, 12, 12]);
        assert_eq!(psnr(&v, &v, &MetricConfig::UNIT).unwrap(), f64::INFINITY);
        assert_eq!(psnr_to_json(f64::INFINITY), serde_json::json!("inf"));
    }

    #[test]
    fn uniform_error_gives_twenty_db() {
        let r = Volume::filled([2, 3, 4], 0.5);
        let x = Volume::filled([2, 3, 4], 0.6);
        let p = psnr(&x, &r, &MetricConfig::UNIT).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
    }

    #[test]
    fn clamping_precedes_mse() {
        let cfg = MetricConfig::WALNUT;
        let r = Volume::from_fn([1, 4, 4], |_, y, x| (y * 4 + x) as f32 * 0.005);
        let x = r.map(|v| v + 10.0 * cfg.hi);
        let expected: f64 = r
            .data()
            .iter()
            .map(|&v| (cfg.hi as f64 - (v.min(cfg.hi)) as f64).powi(2))
            .sum::<f64>()
            / 16.0;
        assert!((clamped_mse(&x, &r, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Volume::zeros([1, 4, 4]);
        let b = Volume::zeros([1, 4, 5]);
        assert!(psnr(&a, &b, &MetricConfig::UNIT).is_err());
        assert!(ssim(&a, &b, &MetricConfig::UNIT).is_err());
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let v = ramp([11, 12, 13]);
        assert_eq!(ssim3(&v, &v, &MetricConfig::UNIT).unwrap(), 1.0);
    }

    #[test]
    fn ssim_requires_window_size() {
        let v = ramp([10, 12, 12]);
        assert!(ssim3(&v, &v, &MetricConfig::UNIT).is_err());
        assert!(ssim2d(&ramp([1, 10, 12]), &ramp([1, 10, 12]), &MetricConfig::UNIT).is_err());
    }

    #[test]
    fn two_constants_reduce_to_luminance() {
        let (a, b) = (0.3f64, 0.7f64);
        let x = Volume::filled([11, 11, 11], a as f32);
        let r = Volume::filled([11, 11, 11], b as f32);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let (a, b) = (a as f32 as f64, b as f32 as f64);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim3(&x, &r, &MetricConfig::UNIT).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
    }
}
