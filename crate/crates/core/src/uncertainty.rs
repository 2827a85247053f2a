//! Monte-Carlo dropout sampling and variance-based uncertainty.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grading::{predict_from_head, GradingModel, HeadOutput, HeadSpec};
use crate::io_util::write_atomic;
use crate::labels::GradeLabel;

/// Default number of dropout samples.
pub const DEFAULT_MC_SAMPLES: usize = 50;

/// `T` stochastic outputs for one image, flattened per [`HeadOutput::to_vec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCSampleSet {
    samples: Vec<Vec<f64>>,
    seed: u64,
}

impl MCSampleSet {
    pub fn new(samples: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Input("a sample set needs at least one sample".into()));
        };
        if samples.iter().any(|s| s.len() != first.len()) {
            return Err(Error::Input("samples have differing lengths".into()));
        }
        Ok(MCSampleSet { samples, seed })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Run `t` forward passes with dropout active. Pass `i` draws its dropout
/// masks from stream `i` of a ChaCha generator keyed by `seed`, so the result
/// does not depend on evaluation order.
pub fn mc_sample(model: &GradingModel, image: &Array3<f32>, t: usize, seed: u64) -> Result<MCSampleSet> {
    if t < 1 {
        return Err(Error::Input("MC sample count must be at least 1".into()));
    }
    let samples = (0..t)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            model.forward_mc(image, &mut rng).map(|o| o.head.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    MCSampleSet::new(samples, seed)
}

/// Element-wise mean of the samples, accumulated as offsets from the first
/// sample so that identical samples reproduce that sample exactly.
pub fn predictive_mean(set: &MCSampleSet) -> Vec<f64> {
    let t = set.samples.len() as f64;
    let first = &set.samples[0];
    let mut offset = vec![0.0; first.len()];
    for s in &set.samples[1..] {
        offset.iter_mut().zip(s).zip(first).for_each(|((o, v), f)| *o += v - f);
    }
    first.iter().zip(&offset).map(|(f, o)| f + o / t).collect()
}

/// Element-wise population variance `(1/T) sum (y_i - mean)^2`.
pub fn variance(set: &MCSampleSet) -> Vec<f64> {
    let mean = predictive_mean(set);
    let t = set.samples.len() as f64;
    let mut var = vec![0.0; mean.len()];
    for s in &set.samples {
        var.iter_mut().zip(s).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
    }
    var.iter_mut().for_each(|v| *v /= t);
    var
}

/// Mean of the per-output variances. For two-head outputs of equal width this
/// is also the mean of the two heads' scalar uncertainties.
pub fn scalar_uncertainty(var: &[f64]) -> f64 {
    if var.is_empty() {
        return 0.0;
    }
    var.iter().sum::<f64>() / var.len() as f64
}

/// One row of the prediction export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub setting: String,
    /// `None` when a separated prediction has no combined class.
    pub predicted_class: Option<u8>,
    pub predicted_crowe: u8,
    pub predicted_kl: u8,
    pub probs_or_value: Vec<f64>,
    pub per_class_variance: Vec<f64>,
    pub uncertainty: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<u8>,
}

/// Predict one image. With `samples == 1` the deterministic (dropout-off)
/// pass is used and the variance is zero; otherwise the mean of `samples`
/// dropout passes is reported.
pub fn predict_image(
    model: &GradingModel,
    image: &Array3<f32>,
    samples: usize,
    seed: u64,
) -> Result<(GradeLabel, Vec<f64>, Vec<f64>)> {
    let head: &HeadSpec = model.head();
    let (mean, var) = if samples == 1 {
        let out = model.forward(image)?.head.to_vec();
        let n = out.len();
        (out, vec![0.0; n])
    } else {
        let set = mc_sample(model, image, samples, seed)?;
        (predictive_mean(&set), variance(&set))
    };
    let label = predict_from_head(&HeadOutput::from_vec(head, &mean)?, head)?;
    Ok((label, mean, var))
}

pub fn prediction_record(
    model: &GradingModel,
    image: &Array3<f32>,
    image_id: &str,
    samples: usize,
    seed: u64,
) -> Result<PredictionRecord> {
    let (label, mean, var) = predict_image(model, image, samples, seed)?;
    let head = model.head();
    Ok(PredictionRecord {
        image_id: image_id.to_string(),
        setting: format!("{}-{}", head.scheme, head.task),
        predicted_class: label.combined.map(|c| c.get()),
        predicted_crowe: label.crowe,
        predicted_kl: label.kl,
        uncertainty: scalar_uncertainty(&var),
        probs_or_value: mean,
        per_class_variance: var,
        samples,
        true_class: None,
    })
}

/// Write records as JSON lines.
pub fn write_records(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &buf)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: Vec<Vec<f64>>) -> MCSampleSet {
        MCSampleSet::new(s, 0).unwrap()
    }

    #[test]
    fn examples() {
        let same = set(vec![vec![0.2, 0.8]; 3]);
        assert_eq!(predictive_mean(&same), vec![0.2, 0.8]);
        assert_eq!(variance(&same), vec![0.0, 0.0]);

        let two = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(predictive_mean(&two), vec![0.5, 0.5]);
        assert_eq!(variance(&two), vec![0.25, 0.25]);

        let reg = set(vec![vec![3.0], vec![4.0]]);
        assert_eq!(predictive_mean(&reg), vec![3.5]);
        let reg = set(vec![vec![3.0], vec![5.0]]);
        assert_eq!(variance(&reg), vec![1.0]);
        assert_eq!(scalar_uncertainty(&[1.0]), 1.0);

        let u = scalar_uncertainty(&[0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((u - 0.5 / 7.0).abs() < 1e-15);
        assert_eq!(scalar_uncertainty(&[0.0; 7]), 0.0);
    }

    #[test]
    fn empty_and_ragged_sets_rejected() {
        assert!(MCSampleSet::new(vec![], 0).is_err());
        assert!(MCSampleSet::new(vec![vec![1.0], vec![1.0, 2.0]], 0).is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = PredictionRecord {
            image_id: "p1_right".into(),
            setting: "combined-cls".into(),
            predicted_class: Some(3),
            predicted_crowe: 1,
            predicted_kl: 3,
            probs_or_value: vec![0.1; 7],
            per_class_variance: vec![0.0; 7],
            uncertainty: 0.0,
            samples: 50,
            true_class: Some(4),
        };
        let path = dir.path().join("p.jsonl");
        write_records(&[r.clone(), r.clone()], &path).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![r.clone(), r]);
    }
}
