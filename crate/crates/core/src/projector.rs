//! Discrete forward projectors and their exact adjoints.
//!
//! Rays are marched with a fixed step of half a voxel; at every sample the
//! volume is interpolated (bilinear in 2D, trilinear in 3D, zero outside the
//! grid) and the sample is weighted by the step length. Each detector bin is
//! represented by the single ray through its centre.
//!
//! The adjoint scatters exactly the same interpolation weights, so it is the
//! transpose of the forward discretization and not an independent
//! backprojector. Forward values are accumulated in `f64` and stored as
//! `f32`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngleSet, ConeBeamGeometry, Geometry, ParallelGeometry2D, VolumeGrid};
use crate::volume::Volume;

/// Number of partial accumulation buffers used by the adjoint. Fixed so the
/// summation order, and therefore the result, does not depend on the number
/// of worker threads.
const ADJOINT_CHUNKS: usize = 8;

/// A linear operator split into per-view blocks `A_psi`.
pub trait ViewOperator: Send + Sync {
    /// Shape `[nz, ny, nx]` of the domain.
    fn domain_shape(&self) -> [usize; 3];

    /// Shape `[rows, cols]` of one view.
    fn view_shape(&self) -> [usize; 2];

    fn num_views(&self) -> usize;

    /// `out = A_view x`; `out` has `rows * cols` entries.
    fn project_view(&self, x: &[f32], view: usize, out: &mut [f64]);

    /// `acc += A_viewᵀ y`.
    fn backproject_view(&self, y: &[f64], view: usize, acc: &mut [f64]);

    fn domain_len(&self) -> usize {
        self.domain_shape().iter().product()
    }

    fn view_len(&self) -> usize {
        let [r, c] = self.view_shape();
        r * c
    }
}

/// Projects `x` onto the listed views in parallel.
pub fn project_views<O: ViewOperator + ?Sized>(op: &O, x: &[f32], views: &[usize]) -> Vec<Vec<f64>> {
    views
        .par_iter()
        .map(|&v| {
            let mut out = vec![0.0; op.view_len()];
            op.project_view(x, v, &mut out);
            out
        })
        .collect()
}

/// `Σ_i A_{views[i]}ᵀ ys[i]`, accumulated in a thread-count independent order.
pub fn backproject_views<O: ViewOperator + ?Sized>(op: &O, ys: &[Vec<f64>], views: &[usize]) -> Vec<f64> {
    debug_assert_eq!(ys.len(), views.len());
    let n = op.domain_len();
    if views.is_empty() {
        return vec![0.0; n];
    }
    let chunk = views.len().div_ceil(ADJOINT_CHUNKS);
    let partials: Vec<Vec<f64>> = views
        .par_chunks(chunk)
        .zip(ys.par_chunks(chunk))
        .map(|(vs, ys)| {
            let mut acc = vec![0.0; n];
            for (&v, y) in vs.iter().zip(ys) {
                op.backproject_view(y, v, &mut acc);
            }
            acc
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![0.0; n]);
    for p in iter {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Detector readings for a set of views, `[views, rows, cols]`. A 2D
/// parallel-beam sinogram has a single detector row.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub data: Vec<f32>,
    pub angles: AngleSet,
    pub geometry: Geometry,
}

impl Projections {
    pub fn new(data: Vec<f32>, angles: AngleSet, geometry: Geometry) -> Result<Self> {
        let [r, c] = geometry.view_shape();
        let expected = angles.count() * r * c;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "projection data",
                expected: vec![angles.count(), r, c],
                found: vec![data.len()],
            });
        }
        Ok(Projections {
            data,
            angles,
            geometry,
        })
    }

    pub fn zeros(angles: AngleSet, geometry: Geometry) -> Self {
        let [r, c] = geometry.view_shape();
        Projections {
            data: vec![0.0; angles.count() * r * c],
            angles,
            geometry,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let [r, c] = self.geometry.view_shape();
        [self.angles.count(), r, c]
    }

    pub fn view_len(&self) -> usize {
        let [r, c] = self.geometry.view_shape();
        r * c
    }

    pub fn view(&self, i: usize) -> &[f32] {
        let n = self.view_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.view_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Restriction to a subset of views, identified by index.
    pub fn select_views(&self, indices: &[usize]) -> Result<Projections> {
        let angles = self.angles.select(indices)?;
        let mut data = Vec::with_capacity(indices.len() * self.view_len());
        for &i in indices {
            data.extend_from_slice(self.view(i));
        }
        Projections::new(data, angles, self.geometry.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// JSON sidecar describing a raw projection payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeader {
    pub shape: [usize; 3],
    pub angles_deg: AngleSet,
    pub geometry: Geometry,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32le".into()
}

/// Forward/adjoint operator for one geometry and angle set.
#[derive(Clone, Debug)]
pub enum Projector {
    Parallel(ParallelProjector),
    Cone(ConeProjector),
}

impl Projector {
    pub fn new(geometry: &Geometry, angles: &AngleSet) -> Result<Self> {
        geometry.validate()?;
        Ok(match geometry {
            Geometry::Parallel2d { grid, detector } => {
                Projector::Parallel(ParallelProjector::new(*grid, *detector, angles))
            }
            Geometry::Cone { grid, detector } => {
                Projector::Cone(ConeProjector::new(*grid, *detector, angles))
            }
        })
    }

    fn inner(&self) -> &dyn ViewOperator {
        match self {
            Projector::Parallel(p) => p,
            Projector::Cone(c) => c,
        }
    }
}

impl ViewOperator for Projector {
    fn domain_shape(&self) -> [usize; 3] {
        self.inner().domain_shape()
    }
    fn view_shape(&self) -> [usize; 2] {
        self.inner().view_shape()
    }
    fn num_views(&self) -> usize {
        self.inner().num_views()
    }
    fn project_view(&self, x: &[f32], view: usize, out: &mut [f64]) {
        self.inner().project_view(x, view, out)
    }
    fn backproject_view(&self, y: &[f64], view: usize, acc: &mut [f64]) {
        self.inner().backproject_view(y, view, acc)
    }
}

/// Clips the parameter range of `origin + t * dir` to the open interval
/// `(-1, n)` of one index axis. Returns `None` if the ray misses it.
#[inline]
fn clip_axis(origin: f64, dir: f64, n: usize, range: (f64, f64)) -> Option<(f64, f64)> {
    let (lo, hi) = (-1.0, n as f64);
    let (mut t0, mut t1) = range;
    if dir.abs() < 1e-12 {
        if origin <= lo || origin >= hi {
            return None;
        }
        return Some((t0, t1));
    }
    let a = (lo - origin) / dir;
    let b = (hi - origin) / dir;
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    t0 = t0.max(a);
    t1 = t1.min(b);
    (t0 < t1).then_some((t0, t1))
}

/// Linear interpolation weights along one axis, zero-padded. Returns the
/// lower index and the two weights.
#[inline]
fn axis_weights(f: f64) -> (isize, f64, f64) {
    let i0 = f.floor();
    let w1 = f - i0;
    (i0 as isize, 1.0 - w1, w1)
}

/// 2D parallel-beam projector.
#[derive(Clone, Debug)]
pub struct ParallelProjector {
    grid: VolumeGrid,
    detector: ParallelGeometry2D,
    trig: Vec<(f64, f64)>,
}

impl ParallelProjector {
    pub fn new(grid: VolumeGrid, detector: ParallelGeometry2D, angles: &AngleSet) -> Self {
        let trig = angles.radians().into_iter().map(|a| (a.cos(), a.sin())).collect();
        ParallelProjector {
            grid,
            detector,
            trig,
        }
    }

    pub fn step(&self) -> f64 {
        0.5 * self.grid.voxel_size
    }

    /// Visits `(pixel index, weight)` pairs of the ray through `bin` of `view`.
    /// Samples sit at `t = k * step` measured from the detector line through
    /// the rotation centre, so opposing views sample mirrored points.
    #[inline]
    fn trace(&self, view: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let (c, s) = self.trig[view];
        let ps = self.grid.voxel_size;
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let cx = 0.5 * (nx as f64 - 1.0);
        let cy = 0.5 * (ny as f64 - 1.0);
        let u = self.detector.bin_center(bin);
        // index-space origin and direction
        let ox = u * c / ps + cx;
        let oy = u * s / ps + cy;
        let dx = -s / ps;
        let dy = c / ps;
        let Some(r) = clip_axis(ox, dx, nx, (f64::NEG_INFINITY, f64::INFINITY)) else {
            return;
        };
        let Some((t0, t1)) = clip_axis(oy, dy, ny, r) else {
            return;
        };
        let h = self.step();
        let k0 = (t0 / h).ceil() as i64;
        let k1 = (t1 / h).floor() as i64;
        for k in k0..=k1 {
            let t = k as f64 * h;
            let (ix, wx0, wx1) = axis_weights(ox + t * dx);
            let (iy, wy0, wy1) = axis_weights(oy + t * dy);
            for (yy, wy) in [(iy, wy0), (iy + 1, wy1)] {
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                let row = yy as usize * nx;
                for (xx, wx) in [(ix, wx0), (ix + 1, wx1)] {
                    if xx < 0 || xx >= nx as isize {
                        continue;
                    }
                    visit(row + xx as usize, h * wx * wy);
                }
            }
        }
    }
}

impl ViewOperator for ParallelProjector {
    fn domain_shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    fn view_shape(&self) -> [usize; 2] {
        [1, self.detector.detector_pixels]
    }

    fn num_views(&self) -> usize {
        self.trig.len()
    }

    fn project_view(&self, x: &[f32], view: usize, out: &mut [f64]) {
        for (bin, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.trace(view, bin, |i, w| acc += w * x[i] as f64);
            *o = acc;
        }
    }

    fn backproject_view(&self, y: &[f64], view: usize, acc: &mut [f64]) {
        for (bin, &v) in y.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            self.trace(view, bin, |i, w| acc[i] += w * v);
        }
    }
}

/// Circular-trajectory cone-beam projector with a flat detector.
///
/// At view angle `β` the source sits at `L_sb (cos β, sin β, 0)` and the
/// detector centre at `-L_bd (cos β, sin β, 0)`; detector columns run along
/// `(-sin β, cos β, 0)` and rows along `z`.
#[derive(Clone, Debug)]
pub struct ConeProjector {
    grid: VolumeGrid,
    detector: ConeBeamGeometry,
    trig: Vec<(f64, f64)>,
}

impl ConeProjector {
    pub fn new(grid: VolumeGrid, detector: ConeBeamGeometry, angles: &AngleSet) -> Self {
        let trig = angles.radians().into_iter().map(|a| (a.cos(), a.sin())).collect();
        ConeProjector {
            grid,
            detector,
            trig,
        }
    }

    pub fn step(&self) -> f64 {
        0.5 * self.grid.voxel_size
    }

    #[inline]
    fn trace(&self, view: usize, row: usize, col: usize, mut visit: impl FnMut(usize, f64)) {
        let (c, s) = self.trig[view];
        let g = &self.grid;
        let vs = g.voxel_size;
        let lsb = self.detector.source_object_distance;
        let lbd = self.detector.object_detector_distance;
        let u = self.detector.col_center(col);
        let v = self.detector.row_center(row);
        let src = [lsb * c, lsb * s, 0.0];
        let det = [-lbd * c - u * s, -lbd * s + u * c, v];
        let mut dir = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        for d in dir.iter_mut() {
            *d /= len;
        }
        let centre = [
            0.5 * (g.nx as f64 - 1.0),
            0.5 * (g.ny as f64 - 1.0),
            0.5 * (g.nz as f64 - 1.0),
        ];
        let o = [
            src[0] / vs + centre[0],
            src[1] / vs + centre[1],
            src[2] / vs + centre[2],
        ];
        let d = [dir[0] / vs, dir[1] / vs, dir[2] / vs];
        let dims = [g.nx, g.ny, g.nz];
        let mut range = (0.0, len);
        for a in 0..3 {
            match clip_axis(o[a], d[a], dims[a], range) {
                Some(r) => range = r,
                None => return,
            }
        }
        let h = self.step();
        let k0 = (range.0 / h).ceil() as i64;
        let k1 = (range.1 / h).floor() as i64;
        let (nx, ny, nz) = (g.nx as isize, g.ny as isize, g.nz as isize);
        let plane = g.nx * g.ny;
        for k in k0..=k1 {
            let t = k as f64 * h;
            let (ix, wx0, wx1) = axis_weights(o[0] + t * d[0]);
            let (iy, wy0, wy1) = axis_weights(o[1] + t * d[1]);
            let (iz, wz0, wz1) = axis_weights(o[2] + t * d[2]);
            if ix >= 0 && iy >= 0 && iz >= 0 && ix + 1 < nx && iy + 1 < ny && iz + 1 < nz {
                let base = iz as usize * plane + iy as usize * g.nx + ix as usize;
                let wz = [wz0 * h, wz1 * h];
                for (dz, wz) in wz.into_iter().enumerate() {
                    let zb = base + dz * plane;
                    visit(zb, wz * wy0 * wx0);
                    visit(zb + 1, wz * wy0 * wx1);
                    visit(zb + g.nx, wz * wy1 * wx0);
                    visit(zb + g.nx + 1, wz * wy1 * wx1);
                }
                continue;
            }
            for (zz, wz) in [(iz, wz0), (iz + 1, wz1)] {
                if zz < 0 || zz >= nz {
                    continue;
                }
                for (yy, wy) in [(iy, wy0), (iy + 1, wy1)] {
                    if yy < 0 || yy >= ny {
                        continue;
                    }
                    for (xx, wx) in [(ix, wx0), (ix + 1, wx1)] {
                        if xx < 0 || xx >= nx {
                            continue;
                        }
                        let idx = zz as usize * plane + yy as usize * g.nx + xx as usize;
                        visit(idx, h * wx * wy * wz);
                    }
                }
            }
        }
    }
}

impl ViewOperator for ConeProjector {
    fn domain_shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    fn view_shape(&self) -> [usize; 2] {
        [self.detector.detector_rows, self.detector.detector_cols]
    }

    fn num_views(&self) -> usize {
        self.trig.len()
    }

    fn project_view(&self, x: &[f32], view: usize, out: &mut [f64]) {
        let cols = self.detector.detector_cols;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.trace(view, i / cols, i % cols, |j, w| acc += w * x[j] as f64);
            *o = acc;
        }
    }

    fn backproject_view(&self, y: &[f64], view: usize, acc: &mut [f64]) {
        let cols = self.detector.detector_cols;
        for (i, &v) in y.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            self.trace(view, i / cols, i % cols, |j, w| acc[j] += w * v);
        }
    }
}

/// Dense matrix operator whose row blocks act as views; used for small
/// analytic test problems.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    n: usize,
    rows_per_view: usize,
    matrix: Vec<f64>,
}

impl DenseOperator {
    /// `matrix` is row-major with `n` columns and a multiple of
    /// `rows_per_view` rows.
    pub fn new(matrix: Vec<f64>, n: usize, rows_per_view: usize) -> Result<Self> {
        if n == 0 || rows_per_view == 0 || matrix.len() % (n * rows_per_view) != 0 {
            return Err(Error::invalid("dense operator shape is inconsistent"));
        }
        Ok(DenseOperator {
            n,
            rows_per_view,
            matrix,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.len() / self.n
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.n + c]
    }
}

impl ViewOperator for DenseOperator {
    fn domain_shape(&self) -> [usize; 3] {
        [1, 1, self.n]
    }

    fn view_shape(&self) -> [usize; 2] {
        [1, self.rows_per_view]
    }

    fn num_views(&self) -> usize {
        self.rows() / self.rows_per_view
    }

    fn project_view(&self, x: &[f32], view: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let r = view * self.rows_per_view + k;
            let row = &self.matrix[r * self.n..(r + 1) * self.n];
            *o = row.iter().zip(x).map(|(a, &b)| a * b as f64).sum();
        }
    }

    fn backproject_view(&self, y: &[f64], view: usize, acc: &mut [f64]) {
        for (k, &v) in y.iter().enumerate() {
            let r = view * self.rows_per_view + k;
            let row = &self.matrix[r * self.n..(r + 1) * self.n];
            for (a, m) in acc.iter_mut().zip(row) {
                *a += m * v;
            }
        }
    }
}

fn check_domain(x: &Volume, grid: &VolumeGrid) -> Result<()> {
    if x.shape() != grid.shape() {
        return Err(Error::ShapeMismatch {
            context: "projector input",
            expected: grid.shape().to_vec(),
            found: x.shape().to_vec(),
        });
    }
    if !x.is_finite() {
        return Err(Error::invalid("projector input contains non-finite values"));
    }
    Ok(())
}

/// Full forward projection `A x` for any supported geometry.
pub fn forward(x: &Volume, geometry: &Geometry, angles: &AngleSet) -> Result<Projections> {
    check_domain(x, geometry.grid())?;
    let op = Projector::new(geometry, angles)?;
    let views: Vec<usize> = (0..angles.count()).collect();
    let data = project_views(&op, x.data(), &views)
        .into_iter()
        .flatten()
        .map(|v| v as f32)
        .collect();
    Projections::new(data, angles.clone(), geometry.clone())
}

pub fn forward_parallel(
    image: &Volume,
    grid: &VolumeGrid,
    detector: &ParallelGeometry2D,
    angles: &AngleSet,
) -> Result<Projections> {
    forward(
        image,
        &Geometry::Parallel2d {
            grid: *grid,
            detector: *detector,
        },
        angles,
    )
}

pub fn forward_cone(
    volume: &Volume,
    grid: &VolumeGrid,
    detector: &ConeBeamGeometry,
    angles: &AngleSet,
) -> Result<Projections> {
    forward(
        volume,
        &Geometry::Cone {
            grid: *grid,
            detector: *detector,
        },
        angles,
    )
}

/// Single-view projection `A_psi x`.
pub fn forward_view(x: &Volume, geometry: &Geometry, angle_deg: f64) -> Result<Vec<f32>> {
    check_domain(x, geometry.grid())?;
    let angles = AngleSet::new(vec![angle_deg])?;
    let op = Projector::new(geometry, &angles)?;
    let mut out = vec![0.0; op.view_len()];
    op.project_view(x.data(), 0, &mut out);
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Exact adjoint `Aᵀ y` of [`forward`].
pub fn adjoint(p: &Projections) -> Result<Volume> {
    if !p.is_finite() {
        return Err(Error::invalid("adjoint input contains non-finite values"));
    }
    let op = Projector::new(&p.geometry, &p.angles)?;
    let views: Vec<usize> = (0..p.angles.count()).collect();
    let ys: Vec<Vec<f64>> = views
        .iter()
        .map(|&v| p.view(v).iter().map(|&x| x as f64).collect())
        .collect();
    let acc = backproject_views(&op, &ys, &views);
    Volume::from_vec(
        p.geometry.grid().shape(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}
