//! Volume and landmark file formats.
//!
//! Two volume containers are supported:
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`), with geometry taken from the sform, or the
//!   qform when no sform is set. Oblique axes are snapped to the nearest
//!   anatomical axis.
//! * A plain format: a JSON header `{shape, spacing, origin, orientation,
//!   dtype, data_file}` next to a little-endian, row-major (last axis
//!   fastest) binary grid.

use ndarray::{Array3, ArrayD, Ix3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use super::{CTVolume, Direction, LandmarkPair, Orientation, Point3};
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    #[default]
    F32,
    I16,
    U16,
}

impl RawDtype {
    fn size(self) -> usize {
        match self {
            RawDtype::F32 => 4,
            RawDtype::I16 | RawDtype::U16 => 2,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    spacing: Option<[f64; 3]>,
    origin: Point3,
    orientation: Orientation,
    dtype: RawDtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_file: Option<String>,
}

/// Load a volume, choosing the container from the file extension.
pub fn load_volume(path: &Path) -> Result<CTVolume> {
    let name = path.to_string_lossy().to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else if name.ends_with(".json") {
        load_raw(path)
    } else {
        Err(Error::Format(format!(
            "{}: unrecognised volume extension (expected .nii, .nii.gz or .json)",
            path.display()
        )))
    }
}

fn raw_data_path(header_path: &Path, data_file: Option<&str>) -> PathBuf {
    match data_file {
        Some(f) => header_path.with_file_name(f),
        None => header_path.with_extension("raw"),
    }
}

fn load_raw(path: &Path) -> Result<CTVolume> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: RawHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: bad volume header: {e}", path.display())))?;
    let spacing = header
        .spacing
        .ok_or_else(|| Error::Format(format!("{}: header has no spacing", path.display())))?;
    let data_path = raw_data_path(path, header.data_file.as_deref());
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n: usize = header.shape.iter().product();
    let expected = n * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = match header.dtype {
        RawDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        RawDtype::I16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        RawDtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    let [a, b, c] = header.shape;
    let voxels = Array3::from_shape_vec((a, b, c), values)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    CTVolume::new(voxels, spacing, header.origin, header.orientation)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write the plain format: `header_path` (JSON) plus a sibling `.raw` file.
/// Integer dtypes round to nearest and saturate.
pub fn save_raw(volume: &CTVolume, header_path: &Path, dtype: RawDtype) -> Result<()> {
    let data_path = header_path.with_extension("raw");
    let data_file = data_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned());
    let mut bytes = Vec::with_capacity(volume.voxels().len() * dtype.size());
    for &v in volume.voxels().iter() {
        match dtype {
            RawDtype::F32 => bytes.extend_from_slice(&v.to_le_bytes()),
            RawDtype::I16 => bytes.extend_from_slice(&(v.round() as i16).to_le_bytes()),
            RawDtype::U16 => bytes.extend_from_slice(&(v.round() as u16).to_le_bytes()),
        }
    }
    write_atomic(&data_path, &bytes)?;
    let header = RawHeader {
        shape: volume.shape(),
        spacing: Some(volume.spacing()),
        origin: volume.origin(),
        orientation: volume.orientation(),
        dtype,
        data_file,
    };
    write_json(header_path, &header)
}

// NIfTI world coordinates are RAS; ours are LPS.
fn ras_to_lps(v: [f64; 3]) -> [f64; 3] {
    [-v[0], -v[1], v[2]]
}

fn quaternion_rotation(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ]
}

fn load_nifti(path: &Path) -> Result<CTVolume> {
    let obj = nifti::ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    use nifti::{IntoNdArray, NiftiObject};
    let header = obj.header().clone();
    let data: ArrayD<f32> = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let shape = data.shape().to_vec();
    let data = match shape.len() {
        3 => data,
        4 if shape[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        _ => {
            return Err(Error::Format(format!(
                "{}: expected a 3-D volume, got shape {shape:?}",
                path.display()
            )))
        }
    };
    let voxels = data
        .as_standard_layout()
        .into_owned()
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(e.to_string()))?;

    let pixdim = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    if pixdim.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Format(format!(
            "{}: header carries no voxel spacing",
            path.display()
        )));
    }

    // Columns of the 3x3 part map grid axes to RAS world directions.
    let (columns, translation) = if header.sform_code != 0 {
        let rows = [header.srow_x, header.srow_y, header.srow_z];
        let mut cols = [[0.0; 3]; 3];
        for (a, col) in cols.iter_mut().enumerate() {
            for r in 0..3 {
                col[r] = rows[r][a] as f64;
            }
        }
        (
            cols,
            [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64],
        )
    } else if header.qform_code != 0 {
        let rot = quaternion_rotation(
            header.quatern_b as f64,
            header.quatern_c as f64,
            header.quatern_d as f64,
        );
        let qfac = if header.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut cols = [[0.0; 3]; 3];
        for (a, col) in cols.iter_mut().enumerate() {
            let scale = pixdim[a] * if a == 2 { qfac } else { 1.0 };
            for r in 0..3 {
                col[r] = rot[r][a] * scale;
            }
        }
        (
            cols,
            [
                header.quatern_x as f64,
                header.quatern_y as f64,
                header.quatern_z as f64,
            ],
        )
    } else {
        let mut cols = [[0.0; 3]; 3];
        for a in 0..3 {
            cols[a][a] = pixdim[a];
        }
        (cols, [0.0; 3])
    };

    let mut dirs = [Direction::Left; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        let lps = ras_to_lps(columns[a]);
        let (axis, comp) = lps
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("three components");
        dirs[a] = Direction::from_axis(axis, *comp > 0.0);
        let norm = lps.iter().map(|v| v * v).sum::<f64>().sqrt();
        spacing[a] = if norm > 0.0 { norm } else { pixdim[a] };
    }
    let orientation = Orientation::new(dirs)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    CTVolume::new(voxels, spacing, ras_to_lps(translation), orientation)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write a NIfTI-1 file with a scanner-aligned sform.
pub fn save_nifti(volume: &CTVolume, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spacing = volume.spacing();
    let mut header = nifti::NiftiHeader::default();
    header.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header.sform_code = 1;
    header.qform_code = 0;
    header.xyzt_units = 2; // mm
    let mut rows = [[0f32; 4]; 3];
    let origin_ras = ras_to_lps(volume.origin());
    for (a, d) in volume.orientation().directions().iter().enumerate() {
        let mut lps = [0.0; 3];
        lps[d.axis()] = d.sign() * spacing[a];
        let ras = ras_to_lps(lps);
        for r in 0..3 {
            rows[r][a] = ras[r] as f32;
        }
    }
    for r in 0..3 {
        rows[r][3] = origin_ras[r] as f32;
    }
    header.srow_x = rows[0];
    header.srow_y = rows[1];
    header.srow_z = rows[2];
    let gz = path.to_string_lossy().to_ascii_lowercase().ends_with(".gz");
    let stem = path
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .replace('.', "_");
    // The writer derives the extension itself.
    let tmp_base = path.with_file_name(format!(".tmp_{stem}"));
    let tmp = tmp_base.with_extension(if gz { "nii.gz" } else { "nii" });
    nifti::writer::WriterOptions::new(&tmp_base)
        .reference_header(&header)
        .compress(gz)
        .write_nifti(volume.voxels())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarksFile {
    patient_id: String,
    right_fhc: Option<Point3>,
    left_fhc: Option<Point3>,
}

/// Read a landmarks file `{patient_id, right_fhc, left_fhc}`; either
/// coordinate may be null for unilateral studies.
pub fn load_landmarks(path: &Path) -> Result<(String, LandmarkPair)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let f: LandmarksFile = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let pair = LandmarkPair {
        right_fhc: f.right_fhc,
        left_fhc: f.left_fhc,
    };
    if pair.right_fhc.is_none() && pair.left_fhc.is_none() {
        return Err(Error::Format(format!("{}: no landmarks", path.display())));
    }
    Ok((f.patient_id, pair))
}

pub fn save_landmarks(path: &Path, patient_id: &str, pair: &LandmarkPair) -> Result<()> {
    write_json(
        path,
        &LandmarksFile {
            patient_id: patient_id.to_string(),
            right_fhc: pair.right_fhc,
            left_fhc: pair.left_fhc,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(i, j, k)| (i * 100 + j * 10 + k) as f32 * 0.5 - 3.0)
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = CTVolume::new(ramp((3, 4, 5)), [0.8, 0.8, 1.0], [1.0, 2.0, 3.0], "RAS".parse().unwrap())
            .unwrap();
        let p = dir.path().join("v.json");
        save_raw(&v, &p, RawDtype::F32).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing(), [0.8, 0.8, 1.0]);
    }

    #[test]
    fn raw_integer_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let v = CTVolume::new(ramp((2, 2, 2)).mapv(|x| x.round()), [1.0; 3], [0.0; 3], Orientation::LPS)
            .unwrap();
        let p = dir.path().join("v.json");
        save_raw(&v, &p, RawDtype::I16).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = CTVolume::new(ramp((3, 4, 5)), [1.0; 3], [0.0; 3], Orientation::LPS).unwrap();
        let p = dir.path().join("v.json");
        save_raw(&v, &p, RawDtype::F32).unwrap();
        let raw = p.with_extension("raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_spacing_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        fs::write(
            &p,
            r#"{"shape":[1,1,1],"origin":[0,0,0],"orientation":"LPS","dtype":"f32"}"#,
        )
        .unwrap();
        fs::write(p.with_extension("raw"), 0f32.to_le_bytes()).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_volume(Path::new("/nonexistent/v.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (code, ext) in [("LPS", "nii"), ("RAS", "nii.gz"), ("LAI", "nii")] {
            let v = CTVolume::new(ramp((4, 3, 5)), [0.8, 0.8, 1.0], [5.0, -2.0, 10.0], code.parse().unwrap())
                .unwrap();
            let p = dir.path().join(format!("v_{code}.{ext}"));
            save_nifti(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.voxels(), v.voxels());
            assert_eq!(back.orientation(), v.orientation());
            for a in 0..3 {
                assert!((back.spacing()[a] - v.spacing()[a]).abs() < 1e-6);
                assert!((back.origin()[a] - v.origin()[a]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn landmarks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        let pair = LandmarkPair {
            right_fhc: Some([1.0, 2.0, 3.0]),
            left_fhc: None,
        };
        save_landmarks(&p, "p001", &pair).unwrap();
        let (id, back) = load_landmarks(&p).unwrap();
        assert_eq!(id, "p001");
        assert_eq!(back, pair);
    }
}
