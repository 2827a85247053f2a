//! Manifests and in-memory samples.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::drr::{load_drr_png, render_drr, save_drr};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::labels::GradeLabel;
use crate::volume::{
    detect_fhc_phantom, generate_phantom, load_landmarks, load_volume, save_landmarks, save_nifti, save_raw,
    PhantomSpec, RawDtype, Side,
};

/// One hip: where its image lives and its grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub side: Side,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub crowe: u8,
    pub kl: u8,
    pub combined_class: u8,
}

impl ManifestRow {
    pub fn label(&self) -> Result<GradeLabel> {
        GradeLabel::from_parts(self.crowe, self.kl, self.combined_class)
    }

    pub fn image_id(&self) -> String {
        image_id(&self.patient_id, self.side)
    }
}

pub fn image_id(patient_id: &str, side: Side) -> String {
    format!("{patient_id}_{}", side.as_str())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        for r in &rows {
            r.label()?;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { rows, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_csv(&self.rows, path)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        resolve(&self.base_dir, &row.image_path)
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One hip of a CT study. `landmarks_path` may be empty, in which case the
/// phantom landmark detector is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub patient_id: String,
    pub side: Side,
    pub volume_path: String,
    pub landmarks_path: String,
    pub crowe: u8,
    pub kl: u8,
    pub combined_class: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeManifest {
    pub rows: Vec<VolumeRow>,
    pub base_dir: PathBuf,
}

impl VolumeManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let rows = csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<VolumeRow>, _>>()?;
        for r in &rows {
            GradeLabel::from_parts(r.crowe, r.kl, r.combined_class)?;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(VolumeManifest { rows, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_csv(&self.rows, path)
    }
}

/// On-disk container for generated volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    /// JSON header plus little-endian int16 grid.
    Raw,
}

/// Write `per_class` phantoms of each class (volume, landmarks) under `dir`
/// and return their manifest, saved as `dir/volumes.csv`.
pub fn generate_phantom_dataset(
    classes: &[u8],
    per_class: usize,
    seed: u64,
    noise_sd: f64,
    format: VolumeFormat,
    dir: &Path,
) -> Result<VolumeManifest> {
    let jobs: Vec<(u8, usize)> = classes.iter().flat_map(|&c| (0..per_class).map(move |i| (c, i))).collect();
    std::fs::create_dir_all(dir.join("volumes")).map_err(|e| Error::io(dir, e))?;
    let rows = jobs
        .par_iter()
        .map(|&(class, i)| {
            let spec = phantom_spec(class, i, seed, noise_sd)?;
            let (volume, label, landmarks) = generate_phantom(&spec)?;
            let pid = phantom_patient_id(class, i);
            let volume_path = match format {
                VolumeFormat::Nifti => format!("volumes/{pid}.nii"),
                VolumeFormat::NiftiGz => format!("volumes/{pid}.nii.gz"),
                VolumeFormat::Raw => format!("volumes/{pid}.json"),
            };
            match format {
                VolumeFormat::Raw => save_raw(&volume, &dir.join(&volume_path), RawDtype::I16)?,
                _ => save_nifti(&volume, &dir.join(&volume_path))?,
            }
            let landmarks_path = format!("volumes/{pid}_landmarks.json");
            save_landmarks(&dir.join(&landmarks_path), &pid, &landmarks)?;
            Ok(VolumeRow {
                patient_id: pid,
                side: spec.side,
                volume_path,
                landmarks_path,
                crowe: label.crowe,
                kl: label.kl,
                combined_class: label.combined.map_or(0, |c| c.get()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = VolumeManifest { rows, base_dir: dir.to_path_buf() };
    manifest.save(&dir.join("volumes.csv"))?;
    Ok(manifest)
}

/// Render one DRR per volume-manifest row into `dir/drr/` and return the
/// image manifest, saved as `dir/manifest.csv`.
pub fn render_dataset(volumes: &VolumeManifest, hu_clip: Option<(f32, f32)>, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("drr")).map_err(|e| Error::io(dir, e))?;
    let rows = volumes
        .rows
        .par_iter()
        .map(|row| {
            let label = GradeLabel::from_parts(row.crowe, row.kl, row.combined_class)?;
            let mut volume = load_volume(&resolve(&volumes.base_dir, &row.volume_path))?;
            if let Some((lo, hi)) = hu_clip {
                volume = volume.clipped(lo, hi)?;
            }
            let landmarks = if row.landmarks_path.is_empty() {
                detect_fhc_phantom(&volume)?
            } else {
                load_landmarks(&resolve(&volumes.base_dir, &row.landmarks_path))?.1
            };
            let fhc = landmarks.get(row.side).ok_or_else(|| {
                Error::Detection(format!("{}: no {} landmark", row.patient_id, row.side.as_str()))
            })?;
            let drr = render_drr(&volume, fhc, row.side, &row.patient_id, &row.volume_path)?;
            let image_path = format!("drr/{}.png", image_id(&row.patient_id, row.side));
            save_drr(&drr, &label, &dir.join(&image_path))?;
            Ok(ManifestRow {
                patient_id: row.patient_id.clone(),
                side: row.side,
                image_path,
                crowe: row.crowe,
                kl: row.kl,
                combined_class: row.combined_class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { rows, base_dir: dir.to_path_buf() };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// A DRR with its identity and label, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub patient_id: String,
    pub side: Side,
    pub pixels: Array2<f32>,
    pub label: GradeLabel,
}

/// Read every image of a DRR manifest.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let pixels = load_drr_png(&manifest.resolve(row))?;
            Ok(Sample {
                image_id: row.image_id(),
                patient_id: row.patient_id.clone(),
                side: row.side,
                pixels,
                label: row.label()?,
            })
        })
        .collect()
}

/// Distinct patient ids of `samples`, sorted.
pub fn patients_of<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Vec<String> {
    samples.into_iter().map(|s| s.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Phantom spec for the `index`-th phantom of `class`: geometry drawn from
/// the class bands, side alternating, each seeded from `seed`.
pub fn phantom_spec(class: u8, index: usize, seed: u64, noise_sd: f64) -> Result<PhantomSpec> {
    let s = super::derive_seed(seed, &[class as u64, index as u64]);
    let mut spec = PhantomSpec::sample(class, s)?;
    spec.noise_sd = noise_sd;
    spec.side = if index % 2 == 0 { Side::Right } else { Side::Left };
    Ok(spec)
}

pub fn phantom_patient_id(class: u8, index: usize) -> String {
    format!("phantom_c{class}_{index:04}")
}

/// Generate phantoms and render their DRRs in memory, one patient per phantom.
pub fn phantom_samples(classes: &[u8], per_class: usize, seed: u64, noise_sd: f64) -> Result<Vec<Sample>> {
    let jobs: Vec<(u8, usize)> = classes.iter().flat_map(|&c| (0..per_class).map(move |i| (c, i))).collect();
    jobs.par_iter()
        .map(|&(class, i)| {
            let spec = phantom_spec(class, i, seed, noise_sd)?;
            let (volume, label, landmarks) = generate_phantom(&spec)?;
            let fhc = landmarks
                .get(spec.side)
                .ok_or_else(|| Error::Detection(format!("phantom has no {} landmark", spec.side.as_str())))?;
            let patient_id = phantom_patient_id(class, i);
            let drr = render_drr(&volume, fhc, spec.side, &patient_id, "phantom")?;
            Ok(Sample {
                image_id: image_id(&patient_id, spec.side),
                patient_id,
                side: spec.side,
                pixels: drr.pixels().clone(),
                label,
            })
        })
        .collect()
}

/// Replace the label of a `fraction` of samples with a different class drawn
/// uniformly at random. Returns the indices that were changed.
pub fn inject_label_noise(samples: &mut [Sample], fraction: f64, seed: u64) -> Vec<usize> {
    use crate::labels::{CombinedClass, NUM_CLASSES};
    use rand::seq::index::sample;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ((samples.len() as f64) * fraction).round() as usize;
    let mut picked = sample(&mut rng, samples.len(), n.min(samples.len())).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        let current = samples[i].label.combined.map(|c| c.index()).unwrap_or(0);
        let shift = rng.gen_range(1..NUM_CLASSES);
        let new = (current + shift) % NUM_CLASSES;
        samples[i].label = GradeLabel::from_combined(CombinedClass::from_index(new).expect("in range"));
    }
    picked
}
