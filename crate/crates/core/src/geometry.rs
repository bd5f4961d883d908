//! Acquisition geometries, view-angle sets and sampling grids.
//!
//! Angles are kept in degrees everywhere outside the ray computations.
//! Only circular cone-beam trajectories around the z axis are modelled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing view angles in `[0, 360)` degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AngleSet {
    angles: Vec<f64>,
}

impl AngleSet {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::invalid("angle set must contain at least one angle"));
        }
        for (i, &a) in angles.iter().enumerate() {
            if !a.is_finite() || !(0.0..360.0).contains(&a) {
                return Err(Error::invalid(format!("angle {a} outside [0, 360)")));
            }
            if i > 0 && a <= angles[i - 1] {
                return Err(Error::invalid("angles must be strictly increasing"));
            }
        }
        Ok(AngleSet { angles })
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.angles.len()
    }

    #[inline]
    pub fn degrees(&self) -> &[f64] {
        &self.angles
    }

    pub fn radians(&self) -> Vec<f64> {
        self.angles.iter().map(|a| a.to_radians()).collect()
    }

    /// Index of an angle within this set, matched to 1e-9 degrees.
    pub fn position(&self, angle: f64) -> Option<usize> {
        self.angles.iter().position(|&a| (a - angle).abs() < 1e-9)
    }

    /// Indices of `subset` within this set; fails if any angle is absent.
    pub fn indices_of(&self, subset: &AngleSet) -> Result<Vec<usize>> {
        subset
            .angles
            .iter()
            .map(|&a| {
                self.position(a).ok_or_else(|| {
                    Error::invalid(format!("view {a} deg is not part of the acquired set"))
                })
            })
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<AngleSet> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(
                *self
                    .angles
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("view index {i} out of range")))?,
            );
        }
        AngleSet::new(out)
    }
}

impl TryFrom<Vec<f64>> for AngleSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        AngleSet::new(v)
    }
}

impl From<AngleSet> for Vec<f64> {
    fn from(a: AngleSet) -> Vec<f64> {
        a.angles
    }
}

/// `count` equally spaced angles over `[start, end)`.
pub fn uniform_angles(count: usize, start: f64, end: f64) -> Result<AngleSet> {
    if count == 0 {
        return Err(Error::invalid("view count must be at least 1"));
    }
    if !(end > start) || start < 0.0 || end > 360.0 {
        return Err(Error::invalid(format!(
            "angular range [{start}, {end}) must satisfy 0 <= start < end <= 360"
        )));
    }
    let step = (end - start) / count as f64;
    AngleSet::new((0..count).map(|i| start + i as f64 * step).collect())
}

/// Picks `n` views from `available` by rounding `n` equally spaced
/// fractional indices.
pub fn subselect_views(available: &AngleSet, n: usize) -> Result<AngleSet> {
    let total = available.count();
    if n == 0 || n > total {
        return Err(Error::invalid(format!(
            "cannot select {n} views out of {total}"
        )));
    }
    available.select(&subselect_indices(total, n))
}

pub(crate) fn subselect_indices(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| ((2 * i * total + n) / (2 * n)).min(total - 1)).collect()
}

/// Voxel grid centred on the rotation axis, isotropic voxels in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size: f64,
}

impl VolumeGrid {
    pub fn new(nx: usize, ny: usize, nz: usize, voxel_size: f64) -> Result<Self> {
        let g = VolumeGrid {
            nx,
            ny,
            nz,
            voxel_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn cube(n: usize, voxel_size: f64) -> Result<Self> {
        Self::new(n, n, n, voxel_size)
    }

    pub fn image(n: usize, pixel_size: f64) -> Result<Self> {
        Self::new(n, n, 1, pixel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid("grid dimensions must be at least 1"));
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::invalid("voxel size must be positive"));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Radius of the cylinder around the z axis that contains every voxel
    /// corner of an axial slice.
    pub fn transverse_radius(&self) -> f64 {
        0.5 * self.voxel_size * ((self.nx * self.nx + self.ny * self.ny) as f64).sqrt()
    }

    pub fn half_height(&self) -> f64 {
        0.5 * self.voxel_size * self.nz as f64
    }
}

/// Flat 1D detector for 2D parallel-beam acquisitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelGeometry2D {
    pub detector_pixels: usize,
    pub detector_spacing: f64,
}

impl ParallelGeometry2D {
    /// Smallest detector with the given spacing that spans the grid diagonal.
    pub fn covering(grid: &VolumeGrid, detector_spacing: f64) -> Self {
        let width = 2.0 * grid.transverse_radius();
        let pixels = (width / detector_spacing).ceil() as usize + 2;
        ParallelGeometry2D {
            detector_pixels: pixels,
            detector_spacing,
        }
    }

    /// Two detector bins per voxel width.
    pub fn desk_default(grid: &VolumeGrid) -> Self {
        Self::covering(grid, 0.5 * grid.voxel_size)
    }

    pub fn width(&self) -> f64 {
        self.detector_pixels as f64 * self.detector_spacing
    }

    pub fn validate(&self, grid: &VolumeGrid) -> Result<()> {
        grid.validate()?;
        if self.detector_pixels == 0 || !(self.detector_spacing > 0.0) {
            return Err(Error::invalid("detector must have positive size and spacing"));
        }
        if grid.nz != 1 {
            return Err(Error::invalid("parallel-beam geometry expects a single-slice grid"));
        }
        let diagonal = 2.0 * grid.transverse_radius();
        if self.width() + 1e-9 < diagonal {
            return Err(Error::invalid(format!(
                "detector width {:.3} mm does not cover the image diagonal {:.3} mm",
                self.width(),
                diagonal
            )));
        }
        Ok(())
    }

    /// Centre offset of detector bin `j` in mm.
    #[inline]
    pub fn bin_center(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.detector_pixels as f64 - 1.0)) * self.detector_spacing
    }
}

/// Circular cone-beam trajectory with a flat detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub detector_spacing: f64,
    pub source_object_distance: f64,
    pub object_detector_distance: f64,
}

impl ConeBeamGeometry {
    pub fn magnification(&self) -> f64 {
        (self.source_object_distance + self.object_detector_distance) / self.source_object_distance
    }

    pub fn source_detector_distance(&self) -> f64 {
        self.source_object_distance + self.object_detector_distance
    }

    /// Smallest detector with the given spacing whose cone covers `grid`.
    pub fn covering(
        grid: &VolumeGrid,
        source_object_distance: f64,
        object_detector_distance: f64,
        detector_spacing: f64,
    ) -> Result<Self> {
        let mut g = ConeBeamGeometry {
            detector_rows: 1,
            detector_cols: 1,
            detector_spacing,
            source_object_distance,
            object_detector_distance,
        };
        let (u, v) = g.required_half_extent(grid)?;
        g.detector_cols = 2 * (u / detector_spacing).ceil() as usize + 2;
        g.detector_rows = 2 * (v / detector_spacing).ceil() as usize + 2;
        g.validate(grid)?;
        Ok(g)
    }

    /// Desk-scale analogue of a dental CBCT setup: source at 6.25 volume
    /// widths, detector 2.5 widths behind the axis.
    pub fn desk_default(grid: &VolumeGrid) -> Result<Self> {
        let width = grid.nx.max(grid.ny) as f64 * grid.voxel_size;
        Self::covering(grid, 6.25 * width, 2.5 * width, 1.4 * grid.voxel_size)
    }

    /// Half extents `(u, v)` on the detector needed to see every voxel corner.
    fn required_half_extent(&self, grid: &VolumeGrid) -> Result<(f64, f64)> {
        let lsb = self.source_object_distance;
        let r = grid.transverse_radius();
        if r >= lsb {
            return Err(Error::invalid(format!(
                "source at {lsb} mm lies inside the volume (radius {r:.3} mm)"
            )));
        }
        let sdd = self.source_detector_distance();
        let half_fan = (r / lsb).asin();
        let u = sdd * half_fan.tan();
        let v = grid.half_height() * sdd / (lsb - r);
        Ok((u, v))
    }

    pub fn validate(&self, grid: &VolumeGrid) -> Result<()> {
        grid.validate()?;
        if self.detector_rows == 0 || self.detector_cols == 0 || !(self.detector_spacing > 0.0) {
            return Err(Error::invalid("detector must have positive size and spacing"));
        }
        if !(self.source_object_distance > 0.0) || !(self.object_detector_distance >= 0.0) {
            return Err(Error::invalid("require L_sb > 0 and L_bd >= 0"));
        }
        let (u, v) = self.required_half_extent(grid)?;
        let half_w = 0.5 * self.detector_cols as f64 * self.detector_spacing;
        let half_h = 0.5 * self.detector_rows as f64 * self.detector_spacing;
        if u > half_w + 1e-9 || v > half_h + 1e-9 {
            return Err(Error::invalid(format!(
                "cone does not cover the volume: needs half extents ({u:.3}, {v:.3}) mm, \
                 detector has ({half_w:.3}, {half_h:.3}) mm"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn col_center(&self, c: usize) -> f64 {
        (c as f64 - 0.5 * (self.detector_cols as f64 - 1.0)) * self.detector_spacing
    }

    #[inline]
    pub fn row_center(&self, r: usize) -> f64 {
        (r as f64 - 0.5 * (self.detector_rows as f64 - 1.0)) * self.detector_spacing
    }
}

/// Geometry file contents: the acquisition geometry together with the
/// reconstruction grid it was validated against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Parallel2d {
        grid: VolumeGrid,
        #[serde(flatten)]
        detector: ParallelGeometry2D,
    },
    Cone {
        grid: VolumeGrid,
        #[serde(flatten)]
        detector: ConeBeamGeometry,
    },
}

impl Geometry {
    /// `size × size` image with the default parallel-beam detector.
    pub fn desk_parallel(size: usize, voxel_size: f64) -> Result<Self> {
        let grid = VolumeGrid::image(size, voxel_size)?;
        Ok(Geometry::Parallel2d {
            grid,
            detector: ParallelGeometry2D::desk_default(&grid),
        })
    }

    /// `size³` volume with the default cone-beam setup.
    pub fn desk_cone(size: usize, voxel_size: f64) -> Result<Self> {
        let grid = VolumeGrid::cube(size, voxel_size)?;
        Ok(Geometry::Cone {
            grid,
            detector: ConeBeamGeometry::desk_default(&grid)?,
        })
    }

    pub fn grid(&self) -> &VolumeGrid {
        match self {
            Geometry::Parallel2d { grid, .. } | Geometry::Cone { grid, .. } => grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Geometry::Parallel2d { grid, detector } => detector.validate(grid),
            Geometry::Cone { grid, detector } => detector.validate(grid),
        }
    }

    /// Shape of one view's detector readings `[rows, cols]`.
    pub fn view_shape(&self) -> [usize; 2] {
        match self {
            Geometry::Parallel2d { detector, .. } => [1, detector.detector_pixels],
            Geometry::Cone { detector, .. } => [detector.detector_rows, detector.detector_cols],
        }
    }

    /// Parses and validates a geometry JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let g: Geometry = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "geometry",
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_views() {
        let a = uniform_angles(4, 0.0, 360.0).unwrap();
        assert_eq!(a.degrees(), &[0.0, 90.0, 180.0, 270.0]);
        assert_eq!(uniform_angles(1, 0.0, 360.0).unwrap().degrees(), &[0.0]);
    }

    #[test]
    fn twenty_views_are_eighteen_degrees_apart() {
        let a = uniform_angles(20, 0.0, 360.0).unwrap();
        for w in a.degrees().windows(2) {
            assert!((w[1] - w[0] - 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_views_and_bad_range() {
        assert!(uniform_angles(0, 0.0, 360.0).is_err());
        assert!(uniform_angles(4, 10.0, 10.0).is_err());
    }

    #[test]
    fn subselect_matches_index_rounding() {
        let all = uniform_angles(1200, 0.0, 360.0).unwrap();
        let twenty = subselect_views(&all, 20).unwrap();
        // brute force: nearest integer to i * 1200 / 20
        let expected: Vec<f64> = (0..20).map(|i| all.degrees()[i * 60]).collect();
        assert_eq!(twenty.degrees(), expected.as_slice());
        assert_eq!(subselect_views(&all, 1200).unwrap(), all);

        let four = uniform_angles(4, 0.0, 360.0).unwrap();
        assert_eq!(subselect_views(&four, 2).unwrap().degrees(), &[0.0, 180.0]);
        assert!(subselect_views(&four, 5).is_err());
        assert!(subselect_views(&four, 0).is_err());
    }

    #[test]
    fn angle_set_validation() {
        assert!(AngleSet::new(vec![]).is_err());
        assert!(AngleSet::new(vec![10.0, 5.0]).is_err());
        assert!(AngleSet::new(vec![360.0]).is_err());
        assert!(AngleSet::new(vec![-1.0]).is_err());
    }

    #[test]
    fn cone_coverage_rejects_small_detector() {
        let grid = VolumeGrid::cube(32, 1.0).unwrap();
        let mut g = ConeBeamGeometry::desk_default(&grid).unwrap();
        g.validate(&grid).unwrap();
        g.detector_cols -= 4;
        assert!(g.validate(&grid).is_err());
    }

    #[test]
    fn source_inside_volume_rejected() {
        let grid = VolumeGrid::cube(32, 1.0).unwrap();
        assert!(ConeBeamGeometry::covering(&grid, 10.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn geometry_json_round_trip() {
        let grid = VolumeGrid::cube(16, 0.5).unwrap();
        let g = Geometry::Cone {
            grid,
            detector: ConeBeamGeometry::desk_default(&grid).unwrap(),
        };
        let back = Geometry::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parallel_detector_must_cover_diagonal() {
        let grid = VolumeGrid::image(64, 1.0).unwrap();
        let det = ParallelGeometry2D {
            detector_pixels: 64,
            detector_spacing: 1.0,
        };
        assert!(det.validate(&grid).is_err());
        ParallelGeometry2D::covering(&grid, 1.0).validate(&grid).unwrap();
    }
}
