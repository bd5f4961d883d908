//! Analytic reconstruction and projection correction.
//!
//! * [`fbp`]: parallel-beam filtered backprojection.
//! * [`fdk`]: Feldkamp-Davis-Kress for full circular cone-beam scans.
//! * [`beer_lambert`]: flat/dark corrected counts to line integrals.
//!
//! Both reconstructions filter each detector row with a band-limited ramp
//! built from the spatial Ram-Lak kernel, zero-padded to the next power of
//! two at least twice the detector width.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Geometry, ParallelGeometry2D, VolumeGrid};
use crate::projector::Projections;
use crate::volume::Volume;

/// Lower bound applied to the transmittance before taking the logarithm.
pub const MIN_TRANSMITTANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    RamLak,
    Hann,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" | "ramlak" => Ok(FilterKind::RamLak),
            "hann" => Ok(FilterKind::Hann),
            other => Err(Error::invalid(format!("unknown filter `{other}`"))),
        }
    }
}

/// Ramp filter selection; `cutoff` is a fraction of the Nyquist frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoff: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            kind: FilterKind::RamLak,
            cutoff: 1.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::invalid(format!(
                "filter cutoff {} outside (0, 1]",
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// Frequency-domain ramp filter for rows of a fixed length.
struct RampFilter {
    len: usize,
    padded: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    fn new(len: usize, spacing: f64, spec: &FilterSpec) -> Self {
        let padded = (2 * len).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);

        // Spatial Ram-Lak kernel, circularly arranged.
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        let d2 = spacing * spacing;
        kernel[0].re = 1.0 / (4.0 * d2);
        for n in 1..=padded / 2 {
            if n % 2 == 1 {
                let v = -1.0 / (std::f64::consts::PI.powi(2) * (n * n) as f64 * d2);
                kernel[n].re = v;
                kernel[padded - n].re = v;
            }
        }
        fft.process(&mut kernel);

        let response = (0..padded)
            .map(|k| {
                let f = k.min(padded - k) as f64 / padded as f64; // cycles per sample
                let rel = f / (0.5 * spec.cutoff);
                let window = if rel > 1.0 {
                    0.0
                } else {
                    match spec.kind {
                        FilterKind::RamLak => 1.0,
                        FilterKind::Hann => 0.5 * (1.0 + (std::f64::consts::PI * rel).cos()),
                    }
                };
                // spacing converts the discrete convolution into an integral
                kernel[k].re * window * spacing / padded as f64
            })
            .collect();

        RampFilter {
            len,
            padded,
            response,
            fft,
            ifft,
        }
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.ifft.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf[..self.len]) {
            *o = b.re;
        }
    }
}

#[inline]
fn lerp_row(row: &[f64], pos: f64) -> f64 {
    let i0 = pos.floor();
    let w = pos - i0;
    let i0 = i0 as isize;
    let n = row.len() as isize;
    let mut v = 0.0;
    if i0 >= 0 && i0 < n {
        v += (1.0 - w) * row[i0 as usize];
    }
    if i0 + 1 >= 0 && i0 + 1 < n {
        v += w * row[(i0 + 1) as usize];
    }
    v
}

/// Parallel-beam filtered backprojection with `π / K` angular weighting.
pub fn fbp(sino: &Projections, filter: &FilterSpec) -> Result<Volume> {
    filter.validate()?;
    let Geometry::Parallel2d { grid, detector } = &sino.geometry else {
        return Err(Error::invalid("fbp requires a parallel-beam sinogram"));
    };
    fbp_parts(sino, grid, detector, filter)
}

fn fbp_parts(
    sino: &Projections,
    grid: &VolumeGrid,
    detector: &ParallelGeometry2D,
    filter: &FilterSpec,
) -> Result<Volume> {
    let k = sino.angles.count();
    if k == 0 {
        return Err(Error::invalid("fbp needs at least one view"));
    }
    let nd = detector.detector_pixels;
    let ramp = RampFilter::new(nd, detector.detector_spacing, filter);
    let filtered: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|v| {
            let row: Vec<f64> = sino.view(v).iter().map(|&x| x as f64).collect();
            let mut out = vec![0.0; nd];
            ramp.apply(&row, &mut out);
            out
        })
        .collect();
    let trig: Vec<(f64, f64)> = sino
        .angles
        .radians()
        .into_iter()
        .map(|a| (a.cos(), a.sin()))
        .collect();
    let scale = std::f64::consts::PI / k as f64;
    let ps = grid.voxel_size;
    let ds = detector.detector_spacing;
    let centre = 0.5 * (nd as f64 - 1.0);
    let cx = 0.5 * (grid.nx as f64 - 1.0);
    let cy = 0.5 * (grid.ny as f64 - 1.0);
    let mut out = Volume::image_zeros(grid.ny, grid.nx);
    out.data_mut()
        .par_chunks_mut(grid.nx)
        .enumerate()
        .for_each(|(iy, row)| {
            let y = (iy as f64 - cy) * ps;
            for (ix, o) in row.iter_mut().enumerate() {
                let x = (ix as f64 - cx) * ps;
                let mut acc = 0.0;
                for (q, &(c, s)) in filtered.iter().zip(&trig) {
                    let u = x * c + y * s;
                    acc += lerp_row(q, u / ds + centre);
                }
                *o = (acc * scale) as f32;
            }
        });
    Ok(out)
}

/// Feldkamp-Davis-Kress reconstruction for a full 360° circular scan.
pub fn fdk(stack: &Projections, filter: &FilterSpec) -> Result<Volume> {
    filter.validate()?;
    let Geometry::Cone { grid, detector } = &stack.geometry else {
        return Err(Error::invalid("fdk requires a cone-beam projection stack"));
    };
    fdk_parts(stack, grid, detector, filter)
}

fn fdk_parts(
    stack: &Projections,
    grid: &VolumeGrid,
    det: &ConeBeamGeometry,
    filter: &FilterSpec,
) -> Result<Volume> {
    let k = stack.angles.count();
    if k == 0 {
        return Err(Error::invalid("fdk needs at least one view"));
    }
    let (rows, cols) = (det.detector_rows, det.detector_cols);
    let d = det.source_object_distance;
    let mag = det.magnification();
    // detector coordinates rescaled to the rotation axis
    let du = det.detector_spacing / mag;
    let ramp = RampFilter::new(cols, du, filter);

    let filtered: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|v| {
            let view = stack.view(v);
            let mut out = vec![0.0; rows * cols];
            let mut weighted = vec![0.0; cols];
            for r in 0..rows {
                let vv = det.row_center(r) / mag;
                for (c, w) in weighted.iter_mut().enumerate() {
                    let uu = det.col_center(c) / mag;
                    let cosw = d / (d * d + uu * uu + vv * vv).sqrt();
                    *w = view[r * cols + c] as f64 * cosw;
                }
                ramp.apply(&weighted, &mut out[r * cols..(r + 1) * cols]);
            }
            out
        })
        .collect();

    let trig: Vec<(f64, f64)> = stack
        .angles
        .radians()
        .into_iter()
        .map(|a| (a.cos(), a.sin()))
        .collect();
    let scale = std::f64::consts::PI / k as f64;
    let vs = grid.voxel_size;
    let (cx, cy, cz) = (
        0.5 * (grid.nx as f64 - 1.0),
        0.5 * (grid.ny as f64 - 1.0),
        0.5 * (grid.nz as f64 - 1.0),
    );
    let (cu, cv) = (0.5 * (cols as f64 - 1.0), 0.5 * (rows as f64 - 1.0));
    let mut out = Volume::zeros(grid.shape());
    let plane = grid.nx * grid.ny;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(iz, slice)| {
            let z = (iz as f64 - cz) * vs;
            let mut acc = vec![0.0f64; plane];
            for (q, &(c, s)) in filtered.iter().zip(&trig) {
                for iy in 0..grid.ny {
                    let y = (iy as f64 - cy) * vs;
                    for ix in 0..grid.nx {
                        let x = (ix as f64 - cx) * vs;
                        let dist = d - (x * c + y * s);
                        let ratio = d / dist;
                        let u = ratio * (-x * s + y * c);
                        let v = ratio * z;
                        let fu = u / du + cu;
                        let fv = v / du + cv;
                        let iu = fu.floor();
                        let iv = fv.floor();
                        let (wu, wv) = (fu - iu, fv - iv);
                        let (iu, iv) = (iu as isize, iv as isize);
                        let mut val = 0.0;
                        for (rr, wr) in [(iv, 1.0 - wv), (iv + 1, wv)] {
                            if rr < 0 || rr >= rows as isize {
                                continue;
                            }
                            let row = &q[rr as usize * cols..(rr as usize + 1) * cols];
                            for (cc, wc) in [(iu, 1.0 - wu), (iu + 1, wu)] {
                                if cc < 0 || cc >= cols as isize {
                                    continue;
                                }
                                val += wr * wc * row[cc as usize];
                            }
                        }
                        acc[iy * grid.nx + ix] += ratio * ratio * val;
                    }
                }
            }
            for (o, a) in slice.iter_mut().zip(acc) {
                *o = (a * scale) as f32;
            }
        });
    Ok(out)
}

/// Analytic reconstruction matching the projection geometry.
pub fn analytic_reconstruct(p: &Projections, filter: &FilterSpec) -> Result<Volume> {
    match &p.geometry {
        Geometry::Parallel2d { .. } => fbp(p, filter),
        Geometry::Cone { .. } => fdk(p, filter),
    }
}

/// Detector counts with their dark (`I₀`) and flat (`I₁`) calibration frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RawProjection {
    pub counts: Vec<f64>,
    pub dark: Vec<f64>,
    pub flat: Vec<f64>,
}

/// Output of [`beer_lambert`].
#[derive(Clone, Debug, PartialEq)]
pub struct LineIntegrals {
    pub values: Vec<f32>,
    /// Pixels whose transmittance fell below [`MIN_TRANSMITTANCE`] and were
    /// clipped.
    pub saturated: usize,
}

/// `P = -ln((I - I₀) / (I₁ - I₀))` per pixel, with the transmittance clipped
/// below at [`MIN_TRANSMITTANCE`].
pub fn beer_lambert(raw: &RawProjection) -> Result<LineIntegrals> {
    let (values, saturated) = beer_lambert_f64(raw)?;
    Ok(LineIntegrals {
        values: values.into_iter().map(|v| v as f32).collect(),
        saturated,
    })
}

/// Double-precision variant of [`beer_lambert`]; returns the line integrals
/// and the saturated-pixel count.
pub fn beer_lambert_f64(raw: &RawProjection) -> Result<(Vec<f64>, usize)> {
    let n = raw.counts.len();
    if raw.dark.len() != n || raw.flat.len() != n {
        return Err(Error::ShapeMismatch {
            context: "raw projection calibration frames",
            expected: vec![n],
            found: vec![raw.dark.len(), raw.flat.len()],
        });
    }
    let mut saturated = 0;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let (count, dark, flat) = (raw.counts[i], raw.dark[i], raw.flat[i]);
        let open = flat - dark;
        if !(open > 0.0) || !count.is_finite() {
            return Err(Error::invalid(format!(
                "pixel {i}: flat field must exceed dark field and counts must be finite"
            )));
        }
        let mut t = (count - dark) / open;
        if !(t >= MIN_TRANSMITTANCE) {
            t = MIN_TRANSMITTANCE;
            saturated += 1;
        }
        values.push(-t.ln());
    }
    Ok((values, saturated))
}
