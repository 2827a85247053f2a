//! Digitally reconstructed radiographs.
//!
//! A 150 mm cube centred on the femoral-head centre is resampled to 1 mm
//! isotropic voxels, averaged along the antero-posterior axis, and min-max
//! normalised to `[0, 1]`. Left hips are mirrored so every image shows a
//! right hip: superior at the top, lateral on the left.

mod augment;
mod export;

pub use augment::{augment, standardize, AugmentationParams};
pub use export::{load_drr_png, save_drr, DrrSidecar};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CTVolume, Point3, Side};

/// Samples per side of the ROI cube and of the projected image.
pub const DRR_SIZE: usize = 150;
/// Physical edge length of the ROI cube.
pub const ROI_MM: f64 = 150.0;

/// A resampled ROI cube, indexed `[lr, ap, si]` with indices increasing
/// toward the patient's left, posterior and superior.
#[derive(Debug, Clone)]
pub struct Roi {
    pub data: Array3<f32>,
    pub side: Side,
    /// Part of the cube fell outside the volume and was zero-filled.
    pub padded: bool,
}

struct AxisSamples {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f32>,
    inside: Vec<bool>,
}

fn axis_samples(volume: &CTVolume, fhc: Point3, patient_axis: usize) -> (usize, AxisSamples) {
    const EPS: f64 = 1e-6;
    let grid_axis = volume.orientation().grid_axis_for(patient_axis);
    let dir = volume.orientation().directions()[grid_axis];
    let n = volume.shape()[grid_axis];
    let step = ROI_MM / DRR_SIZE as f64;
    let mut s = AxisSamples {
        lo: Vec::with_capacity(DRR_SIZE),
        hi: Vec::with_capacity(DRR_SIZE),
        w: Vec::with_capacity(DRR_SIZE),
        inside: Vec::with_capacity(DRR_SIZE),
    };
    for i in 0..DRR_SIZE {
        let pos = fhc[patient_axis] + (i as f64 - 0.5 * (DRR_SIZE - 1) as f64) * step;
        let idx = dir.sign() * (pos - volume.origin()[patient_axis])
            / volume.spacing()[grid_axis];
        let inside = idx >= -EPS && idx <= (n - 1) as f64 + EPS;
        let clamped = idx.clamp(0.0, (n - 1) as f64);
        let lo = clamped.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        s.lo.push(lo);
        s.hi.push(hi);
        s.w.push((clamped - lo as f64) as f32);
        s.inside.push(inside);
    }
    (grid_axis, s)
}

/// Resample the 150 mm cube centred on `fhc` by trilinear interpolation.
/// Samples outside the volume are zero and set [`Roi::padded`].
pub fn extract_roi(volume: &CTVolume, fhc: Point3, side: Side) -> Result<Roi> {
    if !volume.contains(fhc) {
        return Err(Error::Input(format!("FHC {fhc:?} lies outside the volume")));
    }
    let vox = volume.voxels().as_standard_layout();
    let flat = vox.as_slice().expect("standard layout");
    let shape = volume.shape();
    let strides = [shape[1] * shape[2], shape[2], 1];

    let axes: Vec<(usize, AxisSamples)> = (0..3).map(|p| axis_samples(volume, fhc, p)).collect();
    let offsets = |p: usize| -> (Vec<usize>, Vec<usize>) {
        let (g, s) = &axes[p];
        (
            s.lo.iter().map(|&i| i * strides[*g]).collect(),
            s.hi.iter().map(|&i| i * strides[*g]).collect(),
        )
    };
    let (x0, x1) = offsets(0);
    let (y0, y1) = offsets(1);
    let (z0, z1) = offsets(2);
    let (wx, wy, wz) = (&axes[0].1.w, &axes[1].1.w, &axes[2].1.w);
    let (ix, iy, iz) = (&axes[0].1.inside, &axes[1].1.inside, &axes[2].1.inside);
    let padded = ix.iter().chain(iy).chain(iz).any(|&b| !b);

    let mut data = Array3::<f32>::zeros((DRR_SIZE, DRR_SIZE, DRR_SIZE));
    let out = data.as_slice_mut().expect("fresh array");
    for i in 0..DRR_SIZE {
        if !ix[i] {
            continue;
        }
        let (ax, bx) = (1.0 - wx[i], wx[i]);
        for j in 0..DRR_SIZE {
            if !iy[j] {
                continue;
            }
            let (ay, by) = (1.0 - wy[j], wy[j]);
            let row = (i * DRR_SIZE + j) * DRR_SIZE;
            let c00 = x0[i] + y0[j];
            let c01 = x0[i] + y1[j];
            let c10 = x1[i] + y0[j];
            let c11 = x1[i] + y1[j];
            for k in 0..DRR_SIZE {
                if !iz[k] {
                    continue;
                }
                let (az, bz) = (1.0 - wz[k], wz[k]);
                let v = |base: usize| az * flat[base + z0[k]] + bz * flat[base + z1[k]];
                out[row + k] = ax * (ay * v(c00) + by * v(c01)) + bx * (ay * v(c10) + by * v(c11));
            }
        }
    }
    Ok(Roi { data, side, padded })
}

/// Mean projection along the AP axis. Row 0 is the most superior row;
/// column 0 is lateral (the patient's right for a right hip; left hips
/// are mirrored). Values are not normalised.
pub fn project_ap(roi: &Roi) -> Result<Array2<f32>> {
    let shape = roi.data.shape();
    if shape[0] != DRR_SIZE || shape[1] != DRR_SIZE || shape[2] != DRR_SIZE {
        return Err(Error::Input(format!("ROI must be 150^3, got {shape:?}")));
    }
    let mean = roi
        .data
        .mean_axis(Axis(1))
        .expect("non-empty AP axis");
    let n = DRR_SIZE;
    Ok(Array2::from_shape_fn((n, n), |(r, c)| {
        let lr = match roi.side {
            Side::Right => c,
            Side::Left => n - 1 - c,
        };
        mean[[lr, n - 1 - r]]
    }))
}

/// Min-max rescale to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(image: &Array2<f32>) -> Result<Array2<f32>> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("image contains NaN or infinite values".into()));
    }
    let (min, max) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if !(range > 0.0) {
        return Ok(Array2::zeros(image.raw_dim()));
    }
    Ok(image.mapv(|v| ((v - min) / range).clamp(0.0, 1.0)))
}

/// A normalised 150x150 radiograph with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DRRImage {
    pixels: Array2<f32>,
    pub patient_id: String,
    pub side: Side,
    pub source: String,
    pub padded: bool,
}

impl DRRImage {
    pub fn new(
        pixels: Array2<f32>,
        patient_id: impl Into<String>,
        side: Side,
        source: impl Into<String>,
        padded: bool,
    ) -> Result<Self> {
        if pixels.dim() != (DRR_SIZE, DRR_SIZE) {
            return Err(Error::Input(format!(
                "DRR must be 150x150, got {:?}",
                pixels.dim()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("DRR pixels must lie in [0, 1]".into()));
        }
        Ok(DRRImage {
            pixels,
            patient_id: patient_id.into(),
            side,
            source: source.into(),
            padded,
        })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }
}

/// Full DRR pipeline for one hip: crop, project, normalise.
pub fn render_drr(
    volume: &CTVolume,
    fhc: Point3,
    side: Side,
    patient_id: &str,
    source: &str,
) -> Result<DRRImage> {
    let roi = extract_roi(volume, fhc, side)?;
    let projected = project_ap(&roi)?;
    let source = if roi.padded {
        format!("{source} [zero-padded]")
    } else {
        source.to_string()
    };
    DRRImage::new(normalize(&projected)?, patient_id, side, source, roi.padded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, Orientation, PhantomSpec};
    use ndarray::s;

    fn ramp_volume(shape: usize, spacing: f64) -> CTVolume {
        let v = Array3::from_shape_fn((shape, shape, shape), |(i, j, k)| {
            (i as f32) * 1.0 + (j as f32) * 3.0 + (k as f32) * 7.0 + ((i * j) % 5) as f32
        });
        CTVolume::new(v, [spacing; 3], [0.0; 3], Orientation::LPS).unwrap()
    }

    #[test]
    fn native_spacing_is_a_raw_block() {
        let v = ramp_volume(200, 1.0);
        let roi = extract_roi(&v, v.center(), Side::Right).unwrap();
        assert!(!roi.padded);
        assert_eq!(roi.data, v.voxels().slice(s![25..175, 25..175, 25..175]));
    }

    /// Hand-written trilinear interpolation, independent of the sampler.
    fn trilinear(v: &CTVolume, idx: [f64; 3]) -> f64 {
        let f = |i: usize, j: usize, k: usize| v.voxels()[[i, j, k]] as f64;
        let (i, j, k) = (idx[0].floor(), idx[1].floor(), idx[2].floor());
        let (dx, dy, dz) = (idx[0] - i, idx[1] - j, idx[2] - k);
        let (i, j, k) = (i as usize, j as usize, k as usize);
        let mut acc = 0.0;
        for (di, wx) in [(0, 1.0 - dx), (1, dx)] {
            for (dj, wy) in [(0, 1.0 - dy), (1, dy)] {
                for (dk, wz) in [(0, 1.0 - dz), (1, dz)] {
                    acc += wx * wy * wz * f(i + di, j + dj, k + dk);
                }
            }
        }
        acc
    }

    #[test]
    fn coarse_spacing_interpolates() {
        let v = ramp_volume(100, 2.0);
        let fhc = [98.3, 99.1, 100.7];
        let roi = extract_roi(&v, fhc, Side::Right).unwrap();
        assert_eq!(roi.data.dim(), (150, 150, 150));
        for &(i, j, k) in &[(0, 0, 0), (149, 149, 149), (0, 77, 149), (31, 2, 90)] {
            let p = [
                fhc[0] + i as f64 - 74.5,
                fhc[1] + j as f64 - 74.5,
                fhc[2] + k as f64 - 74.5,
            ];
            let expect = trilinear(&v, v.point_to_index(p));
            let got = roi.data[[i, j, k]] as f64;
            assert!((got - expect).abs() < 1e-3 * expect.abs().max(1.0), "{got} vs {expect}");
        }
    }

    #[test]
    fn overhanging_cube_is_zero_padded() {
        let v = CTVolume::new(Array3::from_elem((200, 200, 200), 5.0), [1.0; 3], [0.0; 3], Orientation::LPS)
            .unwrap();
        // Cube spans z in [-10, 140]: ten 1 mm slices fall below the volume.
        let fhc = [99.5, 99.5, 64.5];
        let roi = extract_roi(&v, fhc, Side::Right).unwrap();
        assert!(roi.padded);
        assert!(roi.data.slice(s![.., .., 0..10]).iter().all(|&x| x == 0.0));
        assert!(roi.data.slice(s![.., .., 10..]).iter().all(|&x| x == 5.0));
        // FHC 10 mm from the lower face.
        let roi = extract_roi(&v, [99.5, 99.5, 10.0], Side::Right).unwrap();
        assert!(roi.padded);
        let outside = roi.data.slice(s![.., .., 0..64]);
        assert!(outside.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fhc_outside_is_input_error() {
        let v = ramp_volume(20, 1.0);
        assert!(matches!(
            extract_roi(&v, [50.0, 5.0, 5.0], Side::Right),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn projection_basics() {
        let mut data = Array3::from_elem((150, 150, 150), 3.0f32);
        let roi = Roi { data: data.clone(), side: Side::Right, padded: false };
        assert!(project_ap(&roi).unwrap().iter().all(|&x| (x - 3.0).abs() < 1e-6));
        data.fill(0.0);
        data[[10, 40, 20]] = 6.0;
        let roi = Roi { data, side: Side::Right, padded: false };
        let p = project_ap(&roi).unwrap();
        let nonzero: Vec<_> = p.indexed_iter().filter(|(_, &v)| v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        let ((r, c), &v) = nonzero[0];
        assert_eq!((r, c), (149 - 20, 10));
        assert!((v - 6.0 / 150.0).abs() < 1e-7);
    }

    #[test]
    fn normalize_rules() {
        let img = Array2::from_shape_vec((1, 3), vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize(&img).unwrap().into_raw_vec_and_offset().0, vec![0.0, 0.5, 1.0]);
        let c = Array2::from_elem((4, 4), 7.0f32);
        assert!(normalize(&c).unwrap().iter().all(|&x| x == 0.0));
        let unit = Array2::from_shape_vec((2, 2), vec![0.0, 0.25, 0.75, 1.0]).unwrap();
        assert_eq!(normalize(&unit).unwrap(), unit);
        let bad = Array2::from_shape_vec((1, 2), vec![0.0, f32::NAN]).unwrap();
        assert!(normalize(&bad).is_err());
    }

    fn blob_centroid_row(img: &Array2<f32>) -> f64 {
        let max = img.iter().cloned().fold(f32::MIN, f32::max);
        let (mut acc, mut n) = (0.0, 0.0);
        for ((r, _), &v) in img.indexed_iter() {
            if v >= 0.9 * max {
                acc += r as f64;
                n += 1.0;
            }
        }
        acc / n
    }

    #[test]
    fn dislocated_head_projects_higher() {
        let (v1, _, _) = generate_phantom(&PhantomSpec::sample(1, 1).unwrap()).unwrap();
        let (v7, _, _) = generate_phantom(&PhantomSpec::sample(7, 1).unwrap()).unwrap();
        // Fixed crop at the grid centre so head position is comparable.
        let p1 = normalize(&project_ap(&extract_roi(&v1, v1.center(), Side::Right).unwrap()).unwrap()).unwrap();
        let p7 = normalize(&project_ap(&extract_roi(&v7, v7.center(), Side::Right).unwrap()).unwrap()).unwrap();
        assert!(blob_centroid_row(&p7) < blob_centroid_row(&p1));
    }

    #[test]
    fn projection_is_scale_invariant_after_normalize() {
        let spec = PhantomSpec { shape: [160, 160, 200], ..PhantomSpec::sample(3, 4).unwrap() };
        let (v, _, lm) = generate_phantom(&spec).unwrap();
        let fhc = lm.right_fhc.unwrap();
        let a = render_drr(&v, fhc, Side::Right, "p", "t").unwrap();
        let b = render_drr(&v.scaled(3.7), fhc, Side::Right, "p", "t").unwrap();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn left_hip_mirrors_to_right() {
        let spec = PhantomSpec {
            bilateral: true,
            noise_sd: 30.0,
            shape: [220, 160, 200],
            ..PhantomSpec::sample(5, 9).unwrap()
        };
        let (v, _, lm) = generate_phantom(&spec).unwrap();
        let left = project_ap(&extract_roi(&v, lm.left_fhc.unwrap(), Side::Left).unwrap()).unwrap();
        let flipped = v.mirrored_left_right();
        let c = v.center();
        let l = lm.left_fhc.unwrap();
        let mirrored_fhc = [2.0 * c[0] - l[0], l[1], l[2]];
        let right = project_ap(&extract_roi(&flipped, mirrored_fhc, Side::Right).unwrap()).unwrap();
        for (x, y) in left.iter().zip(right.iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn drr_image_invariants() {
        assert!(DRRImage::new(Array2::zeros((150, 149)), "p", Side::Right, "", false).is_err());
        assert!(DRRImage::new(Array2::from_elem((150, 150), 1.5), "p", Side::Right, "", false).is_err());
        assert!(DRRImage::new(Array2::from_elem((150, 150), 0.5), "p", Side::Right, "", false).is_ok());
    }
}
