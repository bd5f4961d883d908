use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Z, Axis::Y, Axis::X];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Z => "z",
            Axis::Y => "y",
            Axis::X => "x",
        }
    }

    /// Axis order that brings this axis to the front.
    fn order(self) -> [usize; 3] {
        match self {
            Axis::Z => [0, 1, 2],
            Axis::Y => [1, 0, 2],
            Axis::X => [2, 0, 1],
        }
    }
}

/// Display window mapping `[lo, hi]` to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

impl Window {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("window [{lo}, {hi}] is empty")));
        }
        Ok(Window { lo, hi })
    }

    /// Window from centre and width.
    pub fn level(centre: f32, width: f32) -> Result<Self> {
        Self::new(centre - width / 2.0, centre + width / 2.0)
    }

    fn grey(&self, v: f32) -> u8 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        if t.is_nan() {
            0
        } else {
            (t * 255.0).round() as u8
        }
    }
}

/// Tiles every slice along `axis` into a grid with `cols` columns
/// (default: ceil of the square root of the slice count).
pub fn montage(volume: &Volume, axis: Axis, window: Window, cols: Option<usize>) -> Result<GrayImage> {
    if volume.is_empty() {
        return Err(Error::invalid("cannot montage an empty volume"));
    }
    let v = volume.permuted(axis.order());
    let [n, h, w] = v.shape();
    let cols = cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    let mut img = GrayImage::new((cols * w) as u32, (rows * h) as u32);
    for s in 0..n {
        let (r, c) = (s / cols, s % cols);
        let slice = v.slice(s);
        for y in 0..h {
            for x in 0..w {
                let px = Luma([window.grey(slice[y * w + x])]);
                img.put_pixel((c * w + x) as u32, (r * h + y) as u32, px);
            }
        }
    }
    Ok(img)
}

/// Writes `<stem>_<axis>.png` for each axis and returns the paths.
pub fn write_montages(stem: &Path, volume: &Volume, window: Window, axes: &[Axis]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(axes.len());
    for &axis in axes {
        let img = montage(volume, axis, window, None)?;
        let name = format!(
            "{}_{}.png",
            stem.file_name().and_then(|s| s.to_str()).unwrap_or("montage"),
            axis.name()
        );
        let path = stem.with_file_name(name);
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        super::atomic_write(&path, &bytes)?;
        out.push(path);
    }
    Ok(out)
}
