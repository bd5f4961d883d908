//! Synthetic phantoms standing in for clinical and walnut volumes.
//!
//! All phantoms are rasterized with sub-voxel supersampling so that edges
//! carry partial-volume values. Generation only uses seeded ChaCha streams
//! and basic arithmetic, so output is reproducible across platforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    #[serde(rename = "shepp-logan-2d")]
    SheppLogan2d,
    #[serde(rename = "shepp-logan-3d")]
    SheppLogan3d,
    RandomEllipsoids,
    /// Single slice through random ellipsoids centred on the `z = 0` plane.
    #[serde(rename = "random-ellipses-2d")]
    RandomEllipses2d,
    /// Shell with an air gap around lobed kernels, loosely walnut-shaped.
    NestedShells,
    /// Centred solid sphere of radius 0.6 (relative to the half-width).
    Sphere,
    /// Axially constant cylinder of radius 0.6 spanning all slices.
    Cylinder,
    /// Stack of thin disks (radius 0.6) along z, the classic probe for
    /// cone-angle artifacts.
    Defrise,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown phantom kind `{s}`")))
    }
}

impl PhantomKind {
    pub fn is_2d(self) -> bool {
        matches!(self, PhantomKind::SheppLogan2d | PhantomKind::RandomEllipses2d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Values are scaled into `[0, intensity_max]`.
    #[serde(default = "one")]
    pub intensity_max: f32,
}

fn one() -> f32 {
    1.0
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: usize) -> Self {
        PhantomSpec {
            kind,
            size,
            seed: 0,
            intensity_max: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        if self.kind.is_2d() {
            [1, self.size, self.size]
        } else {
            [self.size; 3]
        }
    }
}

/// Ellipsoid in normalized coordinates `[-1, 1]³`, rotated about z by `phi`
/// degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub value: f64,
    pub semi_axes: [f64; 3],
    pub centre: [f64; 3],
    pub phi_deg: f64,
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = p[0] - self.centre[0];
        let dy = p[1] - self.centre[1];
        let dz = p[2] - self.centre[2];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, cc] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / cc).powi(2) <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> [f64; 3] {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let [a, b, cc] = self.semi_axes;
        [
            ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
            ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
            cc,
        ]
    }

    pub fn inside_unit_box(&self) -> bool {
        let h = self.half_extents();
        (0..3).all(|i| self.centre[i] - h[i] >= -1.0 && self.centre[i] + h[i] <= 1.0)
    }
}

/// Modified (higher contrast) Shepp-Logan table: value, a, b, x0, y0, phi.
const SHEPP_LOGAN_2D: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

/// Modified 3D Shepp-Logan: value, a, b, c, x0, y0, z0, phi (rotation
/// about z only).
const SHEPP_LOGAN_3D: [[f64; 8]; 10] = [
    [1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0],
    [-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0],
    [0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0],
    [0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0],
    [0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0],
    [0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0],
    [0.1, 0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0],
];

pub fn shepp_logan_2d_ellipses() -> Vec<Ellipsoid> {
    SHEPP_LOGAN_2D
        .iter()
        .map(|r| Ellipsoid {
            value: r[0],
            semi_axes: [r[1], r[2], f64::INFINITY],
            centre: [r[3], r[4], 0.0],
            phi_deg: r[5],
        })
        .collect()
}

pub fn shepp_logan_3d_ellipsoids() -> Vec<Ellipsoid> {
    SHEPP_LOGAN_3D
        .iter()
        .map(|r| Ellipsoid {
            value: r[0],
            semi_axes: [r[1], r[2], r[3]],
            centre: [r[4], r[5], r[6]],
            phi_deg: r[7],
        })
        .collect()
}

/// Random ellipsoids: a body ellipsoid plus `3..=8` inclusions, each fully
/// inside the grid.
pub fn random_ellipsoids(seed: u64) -> Vec<Ellipsoid> {
    let mut rng = rng::stream(seed, Purpose::Phantom, 1, 0);
    let mut out = vec![Ellipsoid {
        value: rng.random_range(0.35..0.55),
        semi_axes: [
            rng.random_range(0.7..0.85),
            rng.random_range(0.6..0.8),
            rng.random_range(0.7..0.85),
        ],
        centre: [0.0; 3],
        phi_deg: rng.random_range(-20.0..20.0),
    }];
    let count = rng.random_range(3..=8);
    while out.len() < count + 1 {
        let e = Ellipsoid {
            value: rng.random_range(-0.25..0.45),
            semi_axes: [
                rng.random_range(0.06..0.35),
                rng.random_range(0.06..0.35),
                rng.random_range(0.06..0.35),
            ],
            centre: [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            ],
            phi_deg: rng.random_range(0.0..180.0),
        };
        if e.inside_unit_box() {
            out.push(e);
        }
    }
    out
}

fn nested_shells(seed: u64) -> Vec<Ellipsoid> {
    let mut rng = rng::stream(seed, Purpose::Phantom, 2, 0);
    let r = rng.random_range(0.78..0.88);
    let squash = rng.random_range(0.85..1.0);
    let mut out = vec![
        // shell: outer minus inner
        Ellipsoid {
            value: 0.9,
            semi_axes: [r, r * squash, r],
            centre: [0.0; 3],
            phi_deg: 0.0,
        },
        Ellipsoid {
            value: -0.9,
            semi_axes: [r - 0.08, (r - 0.08) * squash, r - 0.08],
            centre: [0.0; 3],
            phi_deg: 0.0,
        },
    ];
    let lobes = rng.random_range(2..=4);
    for i in 0..lobes {
        let angle = 360.0 * i as f64 / lobes as f64 + rng.random_range(-15.0..15.0);
        let (s, c) = (angle as f64).to_radians().sin_cos();
        let d = rng.random_range(0.22..0.3);
        out.push(Ellipsoid {
            value: rng.random_range(0.45..0.65),
            semi_axes: [
                rng.random_range(0.2..0.26),
                rng.random_range(0.12..0.18),
                rng.random_range(0.45..0.6),
            ],
            centre: [d * c, d * s * squash, rng.random_range(-0.1..0.1)],
            phi_deg: angle,
        });
    }
    out
}

fn rasterize(shape: [usize; 3], ellipsoids: &[Ellipsoid], sub: usize, max: f32) -> Volume {
    rasterize_fn(shape, sub, max, |p| {
        ellipsoids.iter().filter(|e| e.contains(p)).map(|e| e.value).sum()
    })
}

/// Supersampled rasterization of a density defined on `[-1, 1]³`.
fn rasterize_fn(shape: [usize; 3], sub: usize, max: f32, density: impl Fn([f64; 3]) -> f64) -> Volume {
    let [nz, ny, nx] = shape;
    let zsub = if nz > 1 { sub } else { 1 };
    let inv = 1.0 / (sub * sub * zsub) as f64;
    let norm = |i: usize, k: usize, n: usize| -> f64 {
        // sub-sample k of voxel i, mapped to [-1, 1]
        let pos = i as f64 + (k as f64 + 0.5) / sub as f64;
        2.0 * pos / n as f64 - 1.0
    };
    Volume::from_fn(shape, |z, y, x| {
        let mut acc = 0.0;
        for kz in 0..zsub {
            let pz = if nz > 1 { norm(z, kz, nz) } else { 0.0 };
            for ky in 0..sub {
                // rows run top to bottom
                let py = -norm(y, ky, ny);
                for kx in 0..sub {
                    acc += density([norm(x, kx, nx), py, pz]);
                }
            }
        }
        ((acc * inv) as f32).clamp(0.0, 1.0) * max
    })
}

/// Disk centres sit at multiples of the period; each disk is half a period
/// thick.
const DEFRISE_PERIOD: f64 = 0.25;
const DEFRISE_RADIUS: f64 = 0.6;

fn defrise(p: [f64; 3]) -> f64 {
    let inside_disk = p[0] * p[0] + p[1] * p[1] <= DEFRISE_RADIUS * DEFRISE_RADIUS;
    let phase = (p[2] / DEFRISE_PERIOD).round();
    let in_slab = (p[2] - phase * DEFRISE_PERIOD).abs() <= DEFRISE_PERIOD / 4.0 && p[2].abs() <= 0.85;
    if inside_disk && in_slab {
        1.0
    } else {
        0.0
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    if spec.size == 0 {
        return Err(Error::invalid("phantom size must be positive"));
    }
    if !(spec.intensity_max > 0.0) {
        return Err(Error::invalid("phantom intensity range must be positive"));
    }
    let shape = spec.shape();
    let max = spec.intensity_max;
    let vol = match spec.kind {
        PhantomKind::SheppLogan2d => rasterize(shape, &shepp_logan_2d_ellipses(), 4, max),
        PhantomKind::SheppLogan3d => rasterize(shape, &shepp_logan_3d_ellipsoids(), 2, max),
        PhantomKind::RandomEllipsoids => rasterize(shape, &random_ellipsoids(spec.seed), 2, max),
        PhantomKind::RandomEllipses2d => {
            let flat: Vec<Ellipsoid> = random_ellipsoids(spec.seed)
                .into_iter()
                .map(|e| Ellipsoid { centre: [e.centre[0], e.centre[1], 0.0], ..e })
                .collect();
            rasterize(shape, &flat, 4, max)
        }
        PhantomKind::NestedShells => rasterize(shape, &nested_shells(spec.seed), 2, max),
        PhantomKind::Sphere => rasterize(
            shape,
            &[Ellipsoid {
                value: 1.0,
                semi_axes: [0.6; 3],
                centre: [0.0; 3],
                phi_deg: 0.0,
            }],
            3,
            max,
        ),
        PhantomKind::Cylinder => rasterize(
            shape,
            &[Ellipsoid {
                value: 1.0,
                semi_axes: [0.6, 0.6, f64::INFINITY],
                centre: [0.0; 3],
                phi_deg: 0.0,
            }],
            3,
            max,
        ),
        PhantomKind::Defrise => rasterize_fn(shape, 3, max, defrise),
    };
    Ok(vol)
}
