//! Exact and one-neighbour class accuracy, balanced accuracy, regression
//! error, confusion matrices and per-grade accuracies.
//!
//! Everything is computed on the combined 1–7 scale. Separated predictions
//! that fall off the progression path are "invalid" and count as misses for
//! every accuracy.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grading::Scheme;
use crate::io_util::write_atomic;
use crate::labels::{GradeLabel, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    predictions: Vec<GradeLabel>,
    truths: Vec<GradeLabel>,
    setting: Scheme,
}

impl EvalSet {
    pub fn new(predictions: Vec<GradeLabel>, truths: Vec<GradeLabel>, setting: Scheme) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::Input(format!(
                "{} predictions vs {} truths",
                predictions.len(),
                truths.len()
            )));
        }
        if let Some(t) = truths.iter().find(|t| !t.is_valid()) {
            return Err(Error::Input(format!("truth label {t} is not a valid class")));
        }
        Ok(EvalSet { predictions, truths, setting })
    }

    pub fn predictions(&self) -> &[GradeLabel] {
        &self.predictions
    }

    pub fn truths(&self) -> &[GradeLabel] {
        &self.truths
    }

    pub fn setting(&self) -> Scheme {
        self.setting
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn invalid_count(&self) -> usize {
        self.predictions.iter().filter(|p| !p.is_valid()).count()
    }

    /// `(truth class, predicted class or None)` pairs.
    fn pairs(&self) -> impl Iterator<Item = (u8, Option<u8>)> + '_ {
        self.truths.iter().zip(&self.predictions).map(|(t, p)| {
            (t.combined.expect("validated").get(), p.combined.map(|c| c.get()))
        })
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Input("evaluation set is empty".into()))
        } else {
            Ok(())
        }
    }
}

fn hit(truth: u8, pred: Option<u8>, neighbor: bool) -> bool {
    match pred {
        None => false,
        Some(p) if neighbor => p.abs_diff(truth) <= 1,
        Some(p) => p == truth,
    }
}

fn accuracy(set: &EvalSet, neighbor: bool) -> Result<f64> {
    set.require_nonempty()?;
    let hits = set.pairs().filter(|&(t, p)| hit(t, p, neighbor)).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Exact class accuracy.
pub fn eca(set: &EvalSet) -> Result<f64> {
    accuracy(set, false)
}

/// One-neighbour class accuracy: `|pred - truth| <= 1`.
pub fn onca(set: &EvalSet) -> Result<f64> {
    accuracy(set, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Classes with no truths, left out of the average.
    pub excluded: Vec<u8>,
}

/// Mean per-class recall over the classes present among the truths.
pub fn balanced_accuracy(set: &EvalSet, neighbor: bool) -> Result<BalancedAccuracy> {
    set.require_nonempty()?;
    let mut total = [0usize; NUM_CLASSES];
    let mut hits = [0usize; NUM_CLASSES];
    for (t, p) in set.pairs() {
        total[t as usize - 1] += 1;
        if hit(t, p, neighbor) {
            hits[t as usize - 1] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    let mut excluded = Vec::new();
    for c in 0..NUM_CLASSES {
        if total[c] == 0 {
            excluded.push(c as u8 + 1);
        } else {
            sum += hits[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    Ok(BalancedAccuracy { value: sum / present as f64, excluded })
}

/// Mean absolute class error over valid predictions. Invalid predictions
/// have no position on the ordinal scale and are skipped (see
/// [`EvalSet::invalid_count`]); a set with no valid prediction is an error.
pub fn regression_se(set: &EvalSet) -> Result<f64> {
    set.require_nonempty()?;
    let (sum, n) = set
        .pairs()
        .filter_map(|(t, p)| p.map(|p| p.abs_diff(t) as u64))
        .fold((0u64, 0usize), |(s, n), e| (s + e, n + 1));
    if n == 0 {
        return Err(Error::Input("no valid predictions to score".into()));
    }
    Ok(sum as f64 / n as f64)
}

/// Absolute class errors, `None` for invalid predictions.
pub fn abs_errors(set: &EvalSet) -> Vec<Option<u8>> {
    set.pairs().map(|(t, p)| p.map(|p| p.abs_diff(t))).collect()
}

/// Exact accuracy of each grade head: `(crowe, kl)`.
pub fn per_grade_accuracy(set: &EvalSet) -> Result<(f64, f64)> {
    set.require_nonempty()?;
    let n = set.len() as f64;
    let crowe = set.truths.iter().zip(&set.predictions).filter(|(t, p)| t.crowe == p.crowe).count();
    let kl = set.truths.iter().zip(&set.predictions).filter(|(t, p)| t.kl == p.kl).count();
    Ok((crowe as f64 / n, kl as f64 / n))
}

/// Truth-by-prediction counts; `invalid[t]` counts invalid predictions for
/// truth class `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub invalid: [u64; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.invalid.iter().sum::<u64>()
    }

    pub fn diagonal(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Count of cells with `|truth - prediction| <= 1`.
    pub fn neighbor_band(&self) -> u64 {
        (0..NUM_CLASSES)
            .flat_map(|t| (0..NUM_CLASSES).map(move |p| (t, p)))
            .filter(|(t, p)| t.abs_diff(*p) <= 1)
            .map(|(t, p)| self.counts[t][p])
            .sum()
    }

    /// CSV with a header of predicted classes, one row per true class and a
    /// trailing `invalid` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\pred,1,2,3,4,5,6,7,invalid\n");
        for t in 0..NUM_CLASSES {
            out.push_str(&(t + 1).to_string());
            for p in 0..NUM_CLASSES {
                out.push_str(&format!(",{}", self.counts[t][p]));
            }
            out.push_str(&format!(",{}\n", self.invalid[t]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

pub fn confusion(set: &EvalSet) -> ConfusionMatrix {
    let mut m = ConfusionMatrix { counts: [[0; NUM_CLASSES]; NUM_CLASSES], invalid: [0; NUM_CLASSES] };
    for (t, p) in set.pairs() {
        match p {
            Some(p) => m.counts[t as usize - 1][p as usize - 1] += 1,
            None => m.invalid[t as usize - 1] += 1,
        }
    }
    m
}

/// All metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub setting: Scheme,
    pub eca: f64,
    pub onca: f64,
    pub balanced_exact: f64,
    pub balanced_neighbor: f64,
    pub excluded_classes: Vec<u8>,
    /// `None` when no prediction is valid.
    pub se: Option<f64>,
    pub crowe_accuracy: f64,
    pub kl_accuracy: f64,
    pub invalid_predictions: usize,
}

pub fn summarize(set: &EvalSet) -> Result<MetricsReport> {
    let be = balanced_accuracy(set, false)?;
    let bn = balanced_accuracy(set, true)?;
    let (crowe_accuracy, kl_accuracy) = per_grade_accuracy(set)?;
    Ok(MetricsReport {
        n: set.len(),
        setting: set.setting,
        eca: eca(set)?,
        onca: onca(set)?,
        balanced_exact: be.value,
        balanced_neighbor: bn.value,
        excluded_classes: be.excluded,
        se: regression_se(set).ok(),
        crowe_accuracy,
        kl_accuracy,
        invalid_predictions: set.invalid_count(),
    })
}
