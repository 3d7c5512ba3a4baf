//! CT volumes and their on-disk format.
//!
//! A volume is stored as two files sharing a stem: `<name>.json` holds the
//! metadata and `<name>.raw` holds the voxels as headerless little-endian
//! int16, one axial slice after another, rows within a slice, columns fastest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;
pub const AIR_HU: i16 = -1000;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CBCT")]
    Cbct,
    #[serde(rename = "PlanCT")]
    PlanCt,
    #[serde(rename = "SynPlanCT")]
    SynPlanCt,
    #[serde(rename = "PhantomTruth")]
    PhantomTruth,
    #[serde(rename = "PhantomCBCT")]
    PhantomCbct,
}

/// A 3D field of Hounsfield units.
///
/// Voxels are indexed `[slice, row, col]`; `spacing` is `(dx, dy, dz)` in mm,
/// i.e. column spacing, row spacing and slice spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    voxels: Array3<i16>,
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub patient_id: String,
}

impl CtVolume {
    pub fn new(voxels: Array3<i16>, spacing: [f64; 3], modality: Modality, patient_id: impl Into<String>) -> Result<Self> {
        let vol = CtVolume {
            voxels,
            spacing,
            modality,
            patient_id: patient_id.into(),
        };
        vol.validate()?;
        Ok(vol)
    }

    /// Builds a volume from slices of equal shape.
    pub fn from_slices(slices: &[Array2<i16>], spacing: [f64; 3], modality: Modality, patient_id: impl Into<String>) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::invalid("voxels", "no slices"))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::<i16>::zeros((slices.len(), h, w));
        for (i, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::shape(first.shape(), s.shape()));
            }
            voxels.index_axis_mut(ndarray::Axis(0), i).assign(s);
        }
        CtVolume::new(voxels, spacing, modality, patient_id)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("dims", format!("all dimensions must be positive, got [{h}, {w}, {d}]")));
        }
        if let Some(bad) = self.spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid("spacing", format!("components must be > 0, got {bad}")));
        }
        if let Some(v) = self.voxels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(Error::invalid("voxels", format!("HU value {v} outside [{HU_MIN}, {HU_MAX}]")));
        }
        Ok(())
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<i16> {
        self.voxels
    }

    /// `(rows, cols, slices)`.
    pub fn dims(&self) -> [usize; 3] {
        let (d, h, w) = self.voxels.dim();
        [h, w, d]
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice(&self, k: usize) -> ArrayView2<'_, i16> {
        self.voxels.index_axis(ndarray::Axis(0), k)
    }

    /// A copy with different voxels but the same geometry and patient.
    pub fn with_voxels(&self, voxels: Array3<i16>, modality: Modality) -> Result<Self> {
        if voxels.dim() != self.voxels.dim() {
            return Err(Error::shape(voxels.shape(), self.voxels.shape()));
        }
        CtVolume::new(voxels, self.spacing, modality, self.patient_id.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    #[serde(default)]
    patient_id: String,
    #[serde(default = "default_dtype")]
    dtype: String,
    #[serde(default = "default_byte_order")]
    byte_order: String,
    #[serde(default = "default_version")]
    version: u32,
}

fn default_dtype() -> String {
    "int16".into()
}

fn default_byte_order() -> String {
    "little".into()
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Resolves `path` (with or without `.json`/`.raw` extension) to the sidecar
/// and payload paths.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let (json_path, raw_path) = volume_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Sidecar {
        path: json_path.clone(),
        source,
    })?;
    let format_err = |message: String| Error::Format {
        path: json_path.clone(),
        message,
    };
    if sidecar.dtype != "int16" {
        return Err(format_err(format!("dtype: unsupported value {:?}, expected \"int16\"", sidecar.dtype)));
    }
    if sidecar.byte_order != "little" {
        return Err(format_err(format!("byte_order: unsupported value {:?}, expected \"little\"", sidecar.byte_order)));
    }
    if sidecar.version > FORMAT_VERSION {
        return Err(format_err(format!("version: {} is newer than supported {FORMAT_VERSION}", sidecar.version)));
    }
    let [h, w, d] = sidecar.dims;
    if h == 0 || w == 0 || d == 0 {
        return Err(format_err(format!("dims: all dimensions must be positive, got {:?}", sidecar.dims)));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = h * w * d * 2;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: raw_path,
            message: format!("dims: sidecar dims {:?} need {expected} bytes, payload has {}", sidecar.dims, bytes.len()),
        });
    }
    let values: Vec<i16> = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    let voxels = Array3::from_shape_vec((d, h, w), values).expect("length checked above");
    CtVolume::new(voxels, sidecar.spacing, sidecar.modality, sidecar.patient_id).map_err(|e| match e {
        Error::Invalid { field, message } => format_err(format!("{field}: {message}")),
        other => other,
    })
}

/// Writes the sidecar and payload; returns the sidecar path.
pub fn save_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<PathBuf> {
    vol.validate()?;
    let (json_path, raw_path) = volume_paths(path.as_ref());
    if let Some(dir) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sidecar = Sidecar {
        dims: vol.dims(),
        spacing: vol.spacing,
        modality: vol.modality,
        patient_id: vol.patient_id.clone(),
        dtype: default_dtype(),
        byte_order: default_byte_order(),
        version: FORMAT_VERSION,
    };
    let mut bytes = Vec::with_capacity(vol.voxels.len() * 2);
    for v in vol.voxels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CtVolume {
        let voxels = Array3::from_shape_fn((2, 4, 4), |(k, r, c)| (k as i16 * 100) - (r as i16 * 7) + c as i16 - 1000);
        CtVolume::new(voxels, [0.9, 0.9, 2.5], Modality::Cbct, "p01").unwrap()
    }

    #[test]
    fn sidecar_and_payload_load() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("v.json");
        fs::write(&json, r#"{"dims":[4,4,2],"spacing":[1,1,1],"modality":"CBCT"}"#).unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 64]).unwrap();
        let vol = load_volume(&json).unwrap();
        assert_eq!(vol.voxels().len(), 32);
        assert_eq!(vol.dims(), [4, 4, 2]);
        assert_eq!(vol.modality, Modality::Cbct);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.json"), r#"{"dims":[4,4,2],"spacing":[1,1,1],"modality":"CBCT"}"#).unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 63]).unwrap();
        let err = load_volume(dir.path().join("v")).unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
    }

    #[test]
    fn out_of_range_payload_names_field() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.json"), r#"{"dims":[1,1,1],"spacing":[1,1,1],"modality":"PlanCT"}"#).unwrap();
        fs::write(dir.path().join("v.raw"), 4000i16.to_le_bytes()).unwrap();
        let err = load_volume(dir.path().join("v.json")).unwrap_err();
        assert!(err.to_string().contains("voxels"), "{err}");
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample();
        let path = save_volume(&vol, dir.path().join("a")).unwrap();
        assert_eq!(load_volume(path).unwrap(), vol);
    }

    #[test]
    fn payload_is_little_endian_slice_major() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample();
        save_volume(&vol, dir.path().join("a")).unwrap();
        let bytes = fs::read(dir.path().join("a.raw")).unwrap();
        // second slice, row 1, col 2
        let idx = (16 + 4 + 2) * 2;
        let v = i16::from_le_bytes([bytes[idx], bytes[idx + 1]]);
        assert_eq!(v, vol.voxels()[[1, 1, 2]]);
    }

    #[test]
    fn zero_spacing_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = sample();
        vol.spacing[1] = 0.0;
        assert!(save_volume(&vol, dir.path().join("z")).is_err());
        assert!(!dir.path().join("z.raw").exists());
    }

    #[test]
    fn large_slice_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let vol = CtVolume::new(Array3::zeros((1, 512, 512)), [1.0; 3], Modality::PlanCt, "x").unwrap();
        save_volume(&vol, dir.path().join("big")).unwrap();
        assert_eq!(fs::metadata(dir.path().join("big.raw")).unwrap().len(), 524_288);
    }

    #[test]
    fn modality_names_match_format() {
        assert_eq!(serde_json::to_string(&Modality::SynPlanCt).unwrap(), "\"SynPlanCT\"");
        assert_eq!(serde_json::to_string(&Modality::PhantomCbct).unwrap(), "\"PhantomCBCT\"");
    }
}
