//! Synthetic hip phantoms with a known grade.
//!
//! Each hip is a solid sphere (femoral head) under a hemispherical shell
//! (acetabular cup) opening inferiorly. Severity is encoded geometrically:
//! classes 1 to 4 narrow the head-cup gap with the head seated, classes 5
//! to 7 close the gap and displace the head superiorly out of the cup by a
//! growing fraction of its diameter.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CTVolume, LandmarkPair, Orientation, Point3, Side};
use crate::error::{Error, Result};
use crate::labels::{CombinedClass, GradeLabel};

/// Intensity of the femoral head.
pub const BONE_INTENSITY: f32 = 1000.0;
/// Intensity of the acetabular cup. Kept below the head so the head can be
/// isolated by thresholding.
pub const CUP_INTENSITY: f32 = 700.0;

const GEOMETRY_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub target_class: u8,
    /// Gap between head surface and cup inner surface.
    pub joint_space_mm: f64,
    /// Superior displacement of the head centre from the cup centre.
    pub dislocation_mm: f64,
    pub head_radius_mm: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Hip modelled by a unilateral phantom.
    pub side: Side,
    /// Model both hips with identical (mirrored) geometry.
    pub bilateral: bool,
    /// Centre distance between the two hips of a bilateral phantom.
    pub hip_separation_mm: f64,
    pub shell_thickness_mm: f64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Head centre of the modelled (or right, if bilateral) hip. Defaults to a
    /// position that keeps a 150 mm cube around the head inside the grid.
    pub head_center_mm: Option<Point3>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            target_class: 1,
            joint_space_mm: 4.5,
            dislocation_mm: 0.0,
            head_radius_mm: 25.0,
            noise_sd: 0.0,
            seed: 0,
            side: Side::Right,
            bilateral: false,
            hip_separation_mm: 90.0,
            shell_thickness_mm: 8.0,
            shape: [200, 200, 200],
            spacing: [1.0, 1.0, 1.0],
            head_center_mm: None,
        }
    }
}

/// Joint-space band (mm) for a class.
pub fn joint_space_band(class: u8) -> (f64, f64) {
    match class {
        1 => (4.0, 5.0),
        2 => (2.5, 3.5),
        3 => (1.0, 2.0),
        4 => (0.0, 0.5),
        _ => (0.0, 0.0),
    }
}

/// Dislocation band (mm) for a class, given the head diameter.
pub fn dislocation_band(class: u8, head_diameter_mm: f64) -> (f64, f64) {
    let d = head_diameter_mm;
    match class {
        5 => (0.25 * d, 0.5 * d),
        6 => (0.5 * d, 0.75 * d),
        7 => (0.75 * d, d),
        _ => (0.0, 0.0),
    }
}

fn in_band(x: f64, (lo, hi): (f64, f64)) -> bool {
    const EPS: f64 = 1e-9;
    x >= lo - EPS && x <= hi + EPS
}

impl PhantomSpec {
    /// Draw joint space and dislocation uniformly from the class bands.
    pub fn sample(class: u8, seed: u64) -> Result<Self> {
        CombinedClass::new(class)?;
        let base = PhantomSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ GEOMETRY_STREAM);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        let joint_space_mm = draw(&mut rng, joint_space_band(class));
        let dislocation_mm = draw(
            &mut rng,
            dislocation_band(class, 2.0 * base.head_radius_mm),
        );
        Ok(PhantomSpec {
            target_class: class,
            joint_space_mm,
            dislocation_mm,
            seed,
            ..base
        })
    }

    pub fn validate(&self) -> Result<()> {
        let class = CombinedClass::new(self.target_class)
            .map_err(|e| Error::Spec(e.to_string()))?
            .get();
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Spec(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("joint_space_mm", self.joint_space_mm)?;
        finite_nonneg("dislocation_mm", self.dislocation_mm)?;
        finite_nonneg("noise_sd", self.noise_sd)?;
        if !(self.head_radius_mm.is_finite() && self.head_radius_mm > 0.0) {
            return Err(Error::Spec(format!(
                "head_radius_mm must be > 0, got {}",
                self.head_radius_mm
            )));
        }
        if !(self.shell_thickness_mm.is_finite() && self.shell_thickness_mm > 0.0) {
            return Err(Error::Spec("shell_thickness_mm must be > 0".into()));
        }
        if self.shape.contains(&0) || self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Spec("grid shape and spacing must be positive".into()));
        }
        let js = joint_space_band(class);
        if !in_band(self.joint_space_mm, js) {
            return Err(Error::Spec(format!(
                "class {class} needs joint space in [{}, {}] mm, got {}",
                js.0, js.1, self.joint_space_mm
            )));
        }
        let dl = dislocation_band(class, 2.0 * self.head_radius_mm);
        if !in_band(self.dislocation_mm, dl) {
            return Err(Error::Spec(format!(
                "class {class} needs dislocation in [{}, {}] mm, got {}",
                dl.0, dl.1, self.dislocation_mm
            )));
        }
        Ok(())
    }

    fn grid_center(&self) -> Point3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = 0.5 * (self.shape[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    /// Head centres per side.
    fn head_centers(&self) -> Vec<(Side, Point3)> {
        let c = self.grid_center();
        let half = 0.5 * self.hip_separation_mm;
        let default_head = |x: f64| [x, c[1], c[2] + 0.5 * self.dislocation_mm];
        if self.bilateral {
            // Patient right is -x in LPS.
            let right = self.head_center_mm.unwrap_or_else(|| default_head(c[0] - half));
            let left = [2.0 * c[0] - right[0], right[1], right[2]];
            vec![(Side::Right, right), (Side::Left, left)]
        } else {
            vec![(self.side, self.head_center_mm.unwrap_or_else(|| default_head(c[0])))]
        }
    }
}

/// Signed distance to a ball.
fn ball_sdf(p: Point3, c: Point3, r: f64) -> f64 {
    super::distance(p, c) - r
}

/// Signed distance (approximate outside) to the superior half of a shell.
fn cup_sdf(p: Point3, c: Point3, inner: f64, thickness: f64) -> f64 {
    let r = super::distance(p, c);
    let shell = (r - (inner + 0.5 * thickness)).abs() - 0.5 * thickness;
    let half_space = c[2] - p[2];
    shell.max(half_space)
}

fn occupancy(sdf: f64, voxel: f64) -> f32 {
    (0.5 - sdf / voxel).clamp(0.0, 1.0) as f32
}

/// Build a phantom volume, its label, and the exact head-centre landmarks.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(CTVolume, GradeLabel, LandmarkPair)> {
    spec.validate()?;
    let class = CombinedClass::new(spec.target_class)?;
    let [nx, ny, nz] = spec.shape;
    let sp = spec.spacing;
    let voxel = (sp[0] + sp[1] + sp[2]) / 3.0;
    let r = spec.head_radius_mm;
    let inner = r + spec.joint_space_mm;
    let outer = inner + spec.shell_thickness_mm;

    let hips = spec.head_centers();
    let extent_max = [
        (nx - 1) as f64 * sp[0],
        (ny - 1) as f64 * sp[1],
        (nz - 1) as f64 * sp[2],
    ];
    for (side, h) in &hips {
        for a in 0..3 {
            if h[a] - r < 0.0 || h[a] + r > extent_max[a] {
                return Err(Error::Spec(format!(
                    "{side} femoral head at {h:?} (radius {r} mm) leaves the grid"
                )));
            }
        }
    }

    let mut voxels = Array3::<f32>::zeros((nx, ny, nz));
    let margin = 1.5 * voxel;
    for (_, head) in &hips {
        let cup = [head[0], head[1], head[2] - spec.dislocation_mm];
        let lo = [
            head[0].min(cup[0]) - outer - margin,
            head[1].min(cup[1]) - outer - margin,
            (head[2] - r).min(cup[2]) - margin,
        ];
        let hi = [
            head[0].max(cup[0]) + outer + margin,
            head[1].max(cup[1]) + outer + margin,
            (head[2] + r).max(cup[2] + outer) + margin,
        ];
        let range = |a: usize, n: usize| {
            let s = (lo[a] / sp[a]).floor().max(0.0) as usize;
            let e = ((hi[a] / sp[a]).ceil() as usize).min(n - 1);
            s..=e
        };
        let (ri, rj, rk) = (range(0, nx), range(1, ny), range(2, nz));
        for i in ri {
            let x = i as f64 * sp[0];
            for j in rj.clone() {
                let y = j as f64 * sp[1];
                for k in rk.clone() {
                    let p = [x, y, k as f64 * sp[2]];
                    let h = occupancy(ball_sdf(p, *head, r), voxel) * BONE_INTENSITY;
                    let c = occupancy(cup_sdf(p, cup, inner, spec.shell_thickness_mm), voxel)
                        * CUP_INTENSITY;
                    let v = &mut voxels[[i, j, k]];
                    *v = v.max(h.max(c));
                }
            }
        }
    }

    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.noise_sd as f32)
            .map_err(|e| Error::Spec(format!("noise: {e}")))?;
        for v in voxels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let volume = CTVolume::new(voxels, sp, [0.0; 3], Orientation::LPS)?;
    let mut landmarks = LandmarkPair::default();
    for (side, h) in hips {
        landmarks.set(side, h);
    }
    Ok((volume, GradeLabel::from_combined(class), landmarks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(class: u8, seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: [96, 96, 128],
            ..PhantomSpec::sample(class, seed).unwrap()
        }
    }

    #[test]
    fn class_one_label() {
        let spec = PhantomSpec {
            target_class: 1,
            joint_space_mm: 4.0,
            dislocation_mm: 0.0,
            shape: [96, 96, 96],
            ..Default::default()
        };
        let (_, label, lm) = generate_phantom(&spec).unwrap();
        assert_eq!((label.crowe, label.kl), (1, 1));
        assert!(lm.right_fhc.is_some() && lm.left_fhc.is_none());
    }

    #[test]
    fn class_seven_is_displaced() {
        let spec = small(7, 3);
        assert!(spec.dislocation_mm >= 0.75 * 2.0 * spec.head_radius_mm);
        let (_, label, _) = generate_phantom(&spec).unwrap();
        assert_eq!((label.crowe, label.kl), (4, 4));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec {
            noise_sd: 50.0,
            ..small(3, 11)
        };
        let (a, _, _) = generate_phantom(&spec).unwrap();
        let (b, _, _) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _, _) = generate_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_geometry_stays_in_band() {
        for class in 1..=7 {
            for seed in 0..20 {
                PhantomSpec::sample(class, seed).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn bands_separate_classes() {
        let d = 50.0;
        for a in 1..=7u8 {
            for b in (a + 1)..=7 {
                assert!(
                    joint_space_band(a) != joint_space_band(b)
                        || dislocation_band(a, d) != dislocation_band(b, d)
                );
            }
        }
    }

    #[test]
    fn rejects_inconsistent_geometry() {
        let bad = PhantomSpec {
            target_class: 2,
            joint_space_mm: 4.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Spec(_))));
        let neg = PhantomSpec {
            head_radius_mm: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn head_outside_grid_is_spec_error() {
        let spec = PhantomSpec {
            head_center_mm: Some([10.0, 50.0, 50.0]),
            shape: [96, 96, 96],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn head_center_is_bright() {
        let spec = small(1, 0);
        let (v, _, lm) = generate_phantom(&spec).unwrap();
        let idx = v.point_to_index(lm.right_fhc.unwrap());
        let val = v.voxels()[[
            idx[0].round() as usize,
            idx[1].round() as usize,
            idx[2].round() as usize,
        ]];
        assert_eq!(val, BONE_INTENSITY);
    }
}
