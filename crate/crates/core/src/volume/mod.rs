//! CT volumes, synthetic hip phantoms and femoral-head-center landmarks.

mod detect;
mod io;
mod phantom;

pub use detect::detect_fhc_phantom;
pub use io::{load_landmarks, load_volume, save_landmarks, save_nifti, save_raw, RawDtype};
pub use phantom::{generate_phantom, PhantomSpec, BONE_INTENSITY, CUP_INTENSITY};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A point in patient space, millimetres, LPS axes (+x toward the patient's
/// left, +y posterior, +z superior).
pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Right => "right",
            Side::Left => "left",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "right" | "r" => Ok(Side::Right),
            "left" | "l" => Ok(Side::Left),
            other => Err(Error::Input(format!("unknown side {other:?}"))),
        }
    }
}

/// Anatomical direction a grid index moves toward as it increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Posterior,
    Anterior,
    Superior,
    Inferior,
}

impl Direction {
    /// Index of the LPS patient axis (0 = LR, 1 = AP, 2 = SI).
    pub fn axis(self) -> usize {
        match self {
            Direction::Left | Direction::Right => 0,
            Direction::Posterior | Direction::Anterior => 1,
            Direction::Superior | Direction::Inferior => 2,
        }
    }

    /// +1 when the direction agrees with the LPS axis, -1 otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Left | Direction::Posterior | Direction::Superior => 1.0,
            _ => -1.0,
        }
    }

    fn letter(self) -> char {
        match self {
            Direction::Left => 'L',
            Direction::Right => 'R',
            Direction::Posterior => 'P',
            Direction::Anterior => 'A',
            Direction::Superior => 'S',
            Direction::Inferior => 'I',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'L' => Direction::Left,
            'R' => Direction::Right,
            'P' => Direction::Posterior,
            'A' => Direction::Anterior,
            'S' => Direction::Superior,
            'I' => Direction::Inferior,
            _ => return None,
        })
    }

    pub(crate) fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Direction::Left,
            (0, false) => Direction::Right,
            (1, true) => Direction::Posterior,
            (1, false) => Direction::Anterior,
            (_, true) => Direction::Superior,
            (_, false) => Direction::Inferior,
        }
    }
}

/// Maps each grid axis to the anatomical direction its index increases
/// toward. Serialized as a three-letter code such as `"LPS"` or `"RAS"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Orientation([Direction; 3]);

impl Orientation {
    pub const LPS: Orientation = Orientation([
        Direction::Left,
        Direction::Posterior,
        Direction::Superior,
    ]);

    pub fn new(dirs: [Direction; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for d in dirs {
            if std::mem::replace(&mut seen[d.axis()], true) {
                return Err(Error::Input(format!(
                    "orientation {} repeats an anatomical axis",
                    Orientation(dirs)
                )));
            }
        }
        Ok(Orientation(dirs))
    }

    pub fn directions(&self) -> [Direction; 3] {
        self.0
    }

    /// Grid axis that runs along the given LPS patient axis.
    pub fn grid_axis_for(&self, patient_axis: usize) -> usize {
        self.0
            .iter()
            .position(|d| d.axis() == patient_axis)
            .expect("orientation is a permutation")
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{}", d.letter())?;
        }
        Ok(())
    }
}

impl FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let dirs: Vec<Direction> = s.chars().filter_map(Direction::from_letter).collect();
        if dirs.len() != 3 || s.chars().count() != 3 {
            return Err(Error::Format(format!("bad orientation code {s:?}")));
        }
        Orientation::new([dirs[0], dirs[1], dirs[2]])
    }
}

impl TryFrom<String> for Orientation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Orientation> for String {
    fn from(o: Orientation) -> String {
        o.to_string()
    }
}

/// A CT volume with its voxel geometry. `origin` is the patient-space
/// position of the centre of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CTVolume {
    voxels: Array3<f32>,
    spacing: [f64; 3],
    origin: Point3,
    orientation: Orientation,
}

impl CTVolume {
    pub fn new(
        voxels: Array3<f32>,
        spacing: [f64; 3],
        origin: Point3,
        orientation: Orientation,
    ) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::Input("volume grid is empty".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Input(format!("non-positive voxel spacing {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Input(format!("non-finite origin {origin:?}")));
        }
        Ok(CTVolume {
            voxels,
            spacing,
            origin,
            orientation,
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Patient-space position of a (possibly fractional) grid index.
    pub fn index_to_point(&self, index: [f64; 3]) -> Point3 {
        let mut p = self.origin;
        for (a, d) in self.orientation.0.iter().enumerate() {
            p[d.axis()] += d.sign() * index[a] * self.spacing[a];
        }
        p
    }

    /// Continuous grid index of a patient-space point.
    pub fn point_to_index(&self, p: Point3) -> [f64; 3] {
        let mut idx = [0.0; 3];
        for (a, d) in self.orientation.0.iter().enumerate() {
            let ax = d.axis();
            idx[a] = d.sign() * (p[ax] - self.origin[ax]) / self.spacing[a];
        }
        idx
    }

    /// Whether a point lies within the box spanned by the voxel centres.
    pub fn contains(&self, p: Point3) -> bool {
        const EPS: f64 = 1e-6;
        let shape = self.shape();
        self.point_to_index(p)
            .iter()
            .zip(shape)
            .all(|(&i, n)| i >= -EPS && i <= (n - 1) as f64 + EPS)
    }

    /// Patient-space bounding box (min, max) of the voxel centres.
    pub fn extent(&self) -> (Point3, Point3) {
        let shape = self.shape();
        let a = self.index_to_point([0.0; 3]);
        let b = self.index_to_point([
            (shape[0] - 1) as f64,
            (shape[1] - 1) as f64,
            (shape[2] - 1) as f64,
        ]);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            lo[i] = a[i].min(b[i]);
            hi[i] = a[i].max(b[i]);
        }
        (lo, hi)
    }

    /// Patient-space centre of the grid.
    pub fn center(&self) -> Point3 {
        let (lo, hi) = self.extent();
        [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ]
    }

    /// Copy of the volume with every intensity multiplied by `k`.
    pub fn scaled(&self, k: f32) -> CTVolume {
        CTVolume {
            voxels: self.voxels.mapv(|v| v * k),
            ..self.clone()
        }
    }

    /// Copy of the volume with intensities clamped to `[lo, hi]`. Nothing in
    /// the pipeline clips by default; this is for windowed clinical input.
    pub fn clipped(&self, lo: f32, hi: f32) -> Result<CTVolume> {
        if !(lo < hi) {
            return Err(Error::Input(format!("clip bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        Ok(CTVolume {
            voxels: self.voxels.mapv(|v| v.clamp(lo, hi)),
            ..self.clone()
        })
    }

    /// Copy of the volume with the patient's left and right swapped, keeping
    /// the grid geometry. Voxel data is reflected about the mid-sagittal
    /// plane of the grid.
    pub fn mirrored_left_right(&self) -> CTVolume {
        let axis = self.orientation.grid_axis_for(0);
        let mut voxels = self.voxels.clone();
        voxels.invert_axis(ndarray::Axis(axis));
        CTVolume {
            voxels,
            ..self.clone()
        }
    }
}

/// Femoral-head-centre landmarks in patient space. A unilateral study
/// carries only one of the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LandmarkPair {
    pub right_fhc: Option<Point3>,
    pub left_fhc: Option<Point3>,
}

impl LandmarkPair {
    pub fn get(&self, side: Side) -> Option<Point3> {
        match side {
            Side::Right => self.right_fhc,
            Side::Left => self.left_fhc,
        }
    }

    pub fn set(&mut self, side: Side, p: Point3) {
        match side {
            Side::Right => self.right_fhc = Some(p),
            Side::Left => self.left_fhc = Some(p),
        }
    }

    /// Check that every present landmark lies inside the volume.
    pub fn validate(&self, volume: &CTVolume) -> Result<()> {
        if self.right_fhc.is_none() && self.left_fhc.is_none() {
            return Err(Error::Input("landmark pair is empty".into()));
        }
        for (side, p) in [(Side::Right, self.right_fhc), (Side::Left, self.left_fhc)] {
            if let Some(p) = p {
                if !volume.contains(p) {
                    return Err(Error::Input(format!(
                        "{side} FHC {p:?} lies outside the volume"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_codes() {
        let o: Orientation = "RAS".parse().unwrap();
        assert_eq!(o.to_string(), "RAS");
        assert_eq!(o.grid_axis_for(2), 2);
        let o: Orientation = "SLA".parse().unwrap();
        assert_eq!(o.grid_axis_for(0), 1);
        assert!("LLS".parse::<Orientation>().is_err());
        assert!("LP".parse::<Orientation>().is_err());
        assert!("LPX".parse::<Orientation>().is_err());
    }

    #[test]
    fn index_point_round_trip() {
        let v = CTVolume::new(
            Array3::zeros((4, 5, 6)),
            [0.8, 0.8, 1.0],
            [10.0, -3.0, 7.0],
            "RAI".parse().unwrap(),
        )
        .unwrap();
        let idx = [1.5, 2.0, 4.25];
        let back = v.point_to_index(v.index_to_point(idx));
        for i in 0..3 {
            assert!((back[i] - idx[i]).abs() < 1e-12);
        }
        // R axis: increasing index moves toward patient right (-x in LPS).
        assert_eq!(v.index_to_point([1.0, 0.0, 0.0])[0], 10.0 - 0.8);
        assert!(v.contains(v.center()));
        assert!(!v.contains([100.0, 0.0, 0.0]));
    }

    #[test]
    fn rejects_bad_geometry() {
        let o = Orientation::LPS;
        assert!(CTVolume::new(Array3::zeros((0, 1, 1)), [1.0; 3], [0.0; 3], o).is_err());
        assert!(CTVolume::new(Array3::zeros((1, 1, 1)), [1.0, 0.0, 1.0], [0.0; 3], o).is_err());
    }

    #[test]
    fn clipping_bounds_intensities() {
        let v = CTVolume::new(Array3::from_shape_fn((2, 2, 2), |(i, j, k)| (i * 4 + j * 2 + k) as f32 * 500.0 - 1500.0), [1.0; 3], [0.0; 3], Orientation::LPS)
            .unwrap();
        let c = v.clipped(-1000.0, 1000.0).unwrap();
        assert_eq!(c.voxels().iter().cloned().fold(f32::MAX, f32::min), -1000.0);
        assert_eq!(c.voxels().iter().cloned().fold(f32::MIN, f32::max), 1000.0);
        assert_eq!(c.voxels()[[0, 1, 1]], 0.0);
        assert!(v.clipped(1.0, 1.0).is_err());
    }
}
