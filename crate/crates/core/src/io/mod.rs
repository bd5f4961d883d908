//! Volume and projection persistence, phantoms, count simulation and PNG
//! montages.
//!
//! Arrays are stored as raw little-endian `f32` payloads next to a JSON
//! sidecar with the same stem (`vol.raw` + `vol.json`). Either file name may
//! be passed to the readers. Writes go through a temporary file in the
//! target directory followed by a rename.

mod montage;
mod noise;
mod phantom;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{ProjectionHeader, Projections};
use crate::volume::Volume;

pub use montage::{montage, write_montages, Axis, Window};
pub use noise::{simulate_counts, CountModel};
pub use phantom::{
    make_phantom, random_ellipsoids, shepp_logan_2d_ellipses, shepp_logan_3d_ellipsoids, Ellipsoid,
    PhantomKind, PhantomSpec,
};

pub const DTYPE_F32LE: &str = "f32le";
pub const ORDER_Z_MAJOR: &str = "z-major";

/// Sidecar for a raw volume payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// `[nz, ny, nx]`
    pub shape: [usize; 3],
    pub voxel_size_mm: f64,
    pub dtype: String,
    pub order: String,
}

impl VolumeHeader {
    pub fn new(shape: [usize; 3], voxel_size_mm: f64) -> Self {
        VolumeHeader {
            shape,
            voxel_size_mm,
            dtype: DTYPE_F32LE.into(),
            order: ORDER_Z_MAJOR.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let h: VolumeHeader = serde_json::from_str(text).map_err(|e| parse_error("volume sidecar", &e))?;
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, message: String| Error::Parse {
            what: "volume sidecar",
            field: field.into(),
            message,
        };
        if self.dtype != DTYPE_F32LE {
            return Err(field("dtype", format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.order != ORDER_Z_MAJOR {
            return Err(field("order", format!("unsupported order `{}`", self.order)));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(field("shape", "dimensions must be positive".into()));
        }
        if self.shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(field("shape", "payload size overflows".into()));
        }
        if !(self.voxel_size_mm > 0.0) || !self.voxel_size_mm.is_finite() {
            return Err(field("voxel_size_mm", "must be positive".into()));
        }
        Ok(())
    }

    pub fn payload_bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

fn parse_error(what: &'static str, e: &serde_json::Error) -> Error {
    // serde_json names the offending field in its message
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    Error::Parse {
        what,
        field,
        message: msg,
    }
}

/// `(sidecar, payload)` paths for either member of the pair.
pub fn paired_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.to_path_buf(), path.with_extension("raw"))
    } else {
        (path.with_extension("json"), path.to_path_buf())
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_volume(path: &Path, volume: &Volume, voxel_size_mm: f64) -> Result<()> {
    let (sidecar, payload) = paired_paths(path);
    let header = VolumeHeader::new(volume.shape(), voxel_size_mm);
    header.validate()?;
    atomic_write(&payload, &f32_to_le_bytes(volume.data()))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    atomic_write(&sidecar, text.as_bytes())
}

/// Decodes a volume from sidecar text and payload bytes.
pub fn decode_volume(sidecar: &str, payload: &[u8]) -> Result<(Volume, VolumeHeader)> {
    let header = VolumeHeader::from_json(sidecar)?;
    if payload.len() != header.payload_bytes() {
        return Err(Error::Parse {
            what: "volume sidecar",
            field: "shape".into(),
            message: format!(
                "shape {:?} implies {} payload bytes, found {}",
                header.shape,
                header.payload_bytes(),
                payload.len()
            ),
        });
    }
    let volume = Volume::from_vec(header.shape, f32_from_le_bytes(payload))?;
    Ok((volume, header))
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let (sidecar, payload) = paired_paths(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    decode_volume(&text, &bytes)
}

pub fn write_projections(path: &Path, p: &Projections) -> Result<()> {
    let (sidecar, payload) = paired_paths(path);
    let header = ProjectionHeader {
        shape: p.shape(),
        angles_deg: p.angles.clone(),
        geometry: p.geometry.clone(),
        dtype: DTYPE_F32LE.into(),
    };
    atomic_write(&payload, &f32_to_le_bytes(&p.data))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    atomic_write(&sidecar, text.as_bytes())
}

pub fn decode_projection_header(sidecar: &str) -> Result<ProjectionHeader> {
    let header: ProjectionHeader =
        serde_json::from_str(sidecar).map_err(|e| parse_error("projection sidecar", &e))?;
    header.geometry.validate()?;
    let [r, c] = header.geometry.view_shape();
    if header.shape != [header.angles_deg.count(), r, c] {
        return Err(Error::Parse {
            what: "projection sidecar",
            field: "shape".into(),
            message: format!(
                "shape {:?} disagrees with {} angles and a {r}x{c} detector",
                header.shape,
                header.angles_deg.count()
            ),
        });
    }
    if header.dtype != DTYPE_F32LE {
        return Err(Error::Parse {
            what: "projection sidecar",
            field: "dtype".into(),
            message: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    Ok(header)
}

pub fn decode_projections(sidecar: &str, payload: &[u8]) -> Result<Projections> {
    let header = decode_projection_header(sidecar)?;
    let expected = header.shape.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::Parse {
            what: "projection sidecar",
            field: "shape".into(),
            message: format!("expected {expected} payload bytes, found {}", payload.len()),
        });
    }
    Projections::new(f32_from_le_bytes(payload), header.angles_deg, header.geometry)
}

pub fn read_projections(path: &Path) -> Result<Projections> {
    let (sidecar, payload) = paired_paths(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    decode_projections(&text, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{uniform_angles, Geometry, ParallelGeometry2D, VolumeGrid};

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let v = Volume::from_fn([3, 4, 5], |z, y, x| (z as f32 - 1.3) * (y as f32 + 0.1) / (x as f32 + 0.7));
        write_volume(&path, &v, 0.5).unwrap();
        let (back, header) = read_volume(&dir.path().join("v.json")).unwrap();
        assert_eq!(header.shape, [3, 4, 5]);
        assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn payload_size_mismatch_names_shape() {
        let sidecar = serde_json::to_string(&VolumeHeader::new([2, 2, 2], 1.0)).unwrap();
        let err = decode_volume(&sidecar, &[0u8; 28]).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "shape"), "{err}");
    }

    #[test]
    fn malformed_sidecar_reports_field() {
        let err = VolumeHeader::from_json(r#"{"shape":[1,2,3],"dtype":"f32le","order":"z-major"}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "voxel_size_mm"), "{err}");
        let err = VolumeHeader::from_json(
            r#"{"shape":[1,2,3],"voxel_size_mm":1.0,"dtype":"f64","order":"z-major"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "dtype"), "{err}");
    }

    #[test]
    fn projections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = VolumeGrid::image(8, 1.0).unwrap();
        let g = Geometry::Parallel2d {
            grid,
            detector: ParallelGeometry2D::covering(&grid, 1.0),
        };
        let a = uniform_angles(3, 0.0, 180.0).unwrap();
        let mut p = Projections::zeros(a, g);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = i as f32 * 0.25;
        }
        let path = dir.path().join("sino.json");
        write_projections(&path, &p).unwrap();
        assert_eq!(read_projections(&path).unwrap(), p);
    }
}
