//! Femoral-head-centre detection for phantom volumes.
//!
//! The head is the brightest structure in a phantom. The volume is box
//! smoothed to suppress noise, thresholded near its maximum, and each
//! ball-shaped connected component is reduced to its intensity-weighted
//! centroid. This is only meant for synthetic data; clinical studies supply
//! landmarks from a file.

use ndarray::{Array3, Axis};

use super::{CTVolume, LandmarkPair, Point3, Side};
use crate::error::{Error, Result};

const THRESHOLD_FRACTION: f32 = 0.85;
/// Components smaller than a 4 mm-radius ball are noise.
const MIN_RADIUS_MM: f64 = 4.0;

fn box_smooth(v: &Array3<f32>) -> Array3<f32> {
    let mut out = v.clone();
    for axis in 0..3 {
        let src = out.clone();
        let n = src.len_of(Axis(axis));
        for (mut dst_lane, src_lane) in out
            .lanes_mut(Axis(axis))
            .into_iter()
            .zip(src.lanes(Axis(axis)))
        {
            for i in 0..n {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                let sum: f32 = (lo..=hi).map(|j| src_lane[j]).sum();
                dst_lane[i] = sum / (hi - lo + 1) as f32;
            }
        }
    }
    out
}

struct Component {
    voxels: Vec<[usize; 3]>,
}

fn components(mask: &Array3<bool>) -> Vec<Component> {
    let shape = mask.shape();
    let (nx, ny, nz) = (shape[0], shape[1], shape[2]);
    let mut seen = Array3::<bool>::from_elem((nx, ny, nz), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m || seen[[i, j, k]] {
            continue;
        }
        seen[[i, j, k]] = true;
        stack.push([i, j, k]);
        let mut voxels = Vec::new();
        while let Some(p) = stack.pop() {
            voxels.push(p);
            let [x, y, z] = p;
            let mut visit = |q: [usize; 3]| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit([x - 1, y, z]);
            }
            if x + 1 < nx {
                visit([x + 1, y, z]);
            }
            if y > 0 {
                visit([x, y - 1, z]);
            }
            if y + 1 < ny {
                visit([x, y + 1, z]);
            }
            if z > 0 {
                visit([x, y, z - 1]);
            }
            if z + 1 < nz {
                visit([x, y, z + 1]);
            }
        }
        out.push(Component { voxels });
    }
    out
}

/// A component is ball-like when its bounding box is roughly cubic and its
/// fill ratio is near that of a sphere in a cube (pi/6).
fn is_ball(c: &Component, spacing: [f64; 3]) -> bool {
    let voxel_volume = spacing[0] * spacing[1] * spacing[2];
    let volume = c.voxels.len() as f64 * voxel_volume;
    let r_eq = (3.0 * volume / (4.0 * std::f64::consts::PI)).cbrt();
    if r_eq < MIN_RADIUS_MM {
        return false;
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for v in &c.voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let mut box_volume = 1.0;
    for a in 0..3 {
        let side = (hi[a] - lo[a] + 1) as f64 * spacing[a];
        if side < 1.2 * r_eq || side > 3.2 * r_eq {
            return false;
        }
        box_volume *= side;
    }
    let fill = volume / box_volume;
    (0.3..=0.8).contains(&fill)
}

/// Detect femoral-head centres in a phantom volume.
pub fn detect_fhc_phantom(volume: &CTVolume) -> Result<LandmarkPair> {
    let smoothed = box_smooth(volume.voxels());
    let (min, max) = smoothed
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(max - min > 1e-3 * (max.abs() + 1.0)) {
        return Err(Error::Detection("volume has no intensity contrast".into()));
    }
    let threshold = min + THRESHOLD_FRACTION * (max - min);
    let mask = smoothed.mapv(|v| v >= threshold);

    let mut balls: Vec<Component> = components(&mask)
        .into_iter()
        .filter(|c| is_ball(c, volume.spacing()))
        .collect();
    if balls.is_empty() {
        return Err(Error::Detection("no spherical component found".into()));
    }
    balls.sort_by(|a, b| b.voxels.len().cmp(&a.voxels.len()));
    balls.truncate(2);

    let raw = volume.voxels();
    let mut centers: Vec<Point3> = balls
        .iter()
        .map(|c| {
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0f64;
            for v in &c.voxels {
                let w = raw[*v].max(0.0) as f64;
                for a in 0..3 {
                    acc[a] += w * v[a] as f64;
                }
                wsum += w;
            }
            let idx = if wsum > 0.0 {
                [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]
            } else {
                let n = c.voxels.len() as f64;
                let mut m = [0.0; 3];
                for v in &c.voxels {
                    for a in 0..3 {
                        m[a] += v[a] as f64 / n;
                    }
                }
                m
            };
            volume.index_to_point(idx)
        })
        .collect();

    // Patient right is -x in LPS.
    centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut pair = LandmarkPair::default();
    match centers.as_slice() {
        [only] => {
            let side = if only[0] <= volume.center()[0] {
                Side::Right
            } else {
                Side::Left
            };
            pair.set(side, *only);
        }
        [right, left] => {
            pair.set(Side::Right, *right);
            pair.set(Side::Left, *left);
        }
        _ => unreachable!("at most two components are kept"),
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{distance, generate_phantom, Orientation, PhantomSpec};

    #[test]
    fn centroid_of_noiseless_head() {
        let spec = PhantomSpec {
            head_center_mm: Some([75.0, 75.0, 75.0]),
            shape: [150, 150, 150],
            ..Default::default()
        };
        let (v, _, truth) = generate_phantom(&spec).unwrap();
        let found = detect_fhc_phantom(&v).unwrap();
        // The head sits just left of the grid midline (74.5 mm).
        assert!(found.right_fhc.is_none());
        let p = found.left_fhc.unwrap();
        assert!(distance(p, [75.0, 75.0, 75.0]) <= 2.0, "{p:?}");
        assert!(distance(p, truth.right_fhc.unwrap()) <= 2.0);
    }

    #[test]
    fn bilateral_heads_are_assigned_by_side() {
        let spec = PhantomSpec {
            bilateral: true,
            shape: [200, 100, 140],
            ..PhantomSpec::sample(5, 2).unwrap()
        };
        let (v, _, truth) = generate_phantom(&spec).unwrap();
        let found = detect_fhc_phantom(&v).unwrap();
        assert!(distance(found.right_fhc.unwrap(), truth.right_fhc.unwrap()) <= 2.0);
        assert!(distance(found.left_fhc.unwrap(), truth.left_fhc.unwrap()) <= 2.0);
    }

    #[test]
    fn uniform_volume_fails() {
        let v = CTVolume::new(
            Array3::from_elem((20, 20, 20), 300.0),
            [1.0; 3],
            [0.0; 3],
            Orientation::LPS,
        )
        .unwrap();
        assert!(matches!(detect_fhc_phantom(&v), Err(Error::Detection(_))));
    }

    #[test]
    fn thin_slab_is_not_a_ball() {
        let mut a = Array3::<f32>::zeros((40, 40, 40));
        a.slice_mut(ndarray::s![5..35, 5..35, 18..21]).fill(1000.0);
        let v = CTVolume::new(a, [1.0; 3], [0.0; 3], Orientation::LPS).unwrap();
        assert!(matches!(detect_fhc_phantom(&v), Err(Error::Detection(_))));
    }
}
