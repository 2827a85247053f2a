//! The experiment protocol: patient-wise cross-validation repeated with
//! fresh shuffles, external evaluation, ablations and feature embeddings.

mod config;
mod data;
mod embed;
mod split;
mod train;

pub use config::{ExperimentConfig, Scheduler};
pub use data::{
    generate_phantom_dataset, image_id, inject_label_noise, load_samples, patients_of, phantom_patient_id,
    phantom_samples, phantom_spec, render_dataset, Manifest, ManifestRow, Sample, VolumeFormat, VolumeManifest,
    VolumeRow,
};
pub use embed::{embed_features, embed_matrix, Embedder, Embedding};
pub use split::{split_patientwise, Partition, PatientSplit};
pub use train::{evaluate, train, EpochLog, Evaluation, TrainOutcome};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::grading::GradingModel;
use crate::io_util::{write_atomic, write_json};
use crate::labels::{CombinedClass, GradeLabel};
use crate::metrics::{confusion, summarize, ConfusionMatrix, EvalSet, MetricsReport};
use crate::plot;
use crate::uncertainty::{write_records, PredictionRecord};

/// Mix `tags` into `base` (SplitMix64 finaliser per step) to get
/// independent, reproducible sub-seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len();
        if n == 0 {
            return MeanSd { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, n }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.sd)
    }
}

/// Metric names carried in summaries.
pub const SUMMARY_METRICS: [&str; 8] = [
    "eca",
    "onca",
    "balanced_exact",
    "balanced_neighbor",
    "se",
    "crowe_accuracy",
    "kl_accuracy",
    "mean_uncertainty",
];

fn metric_value(r: &MetricsReport, records: &[&PredictionRecord], name: &str) -> Option<f64> {
    match name {
        "eca" => Some(r.eca),
        "onca" => Some(r.onca),
        "balanced_exact" => Some(r.balanced_exact),
        "balanced_neighbor" => Some(r.balanced_neighbor),
        "se" => r.se,
        "crowe_accuracy" => Some(r.crowe_accuracy),
        "kl_accuracy" => Some(r.kl_accuracy),
        "mean_uncertainty" => {
            Some(records.iter().map(|r| r.uncertainty).sum::<f64>() / records.len().max(1) as f64)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repeat: usize,
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub single: MetricsReport,
    pub mc: Option<MetricsReport>,
    pub history: Vec<EpochLog>,
}

/// Metrics of one repeat, pooled over its test folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub setting: String,
    pub folds: usize,
    pub repeats: usize,
    pub mc_samples: usize,
    pub fold_reports: Vec<FoldReport>,
    pub repeat_single: Vec<RepeatReport>,
    pub repeat_mc: Vec<RepeatReport>,
    /// Mean ± SD over repeats of each pooled metric (1 sample).
    pub summary_single: BTreeMap<String, MeanSd>,
    /// As `summary_single` for the MC-dropout predictions (empty if none).
    pub summary_mc: BTreeMap<String, MeanSd>,
    /// `(repeat, record)` for every test prediction, deterministic pass.
    #[serde(skip)]
    pub records_single: Vec<(usize, PredictionRecord)>,
    #[serde(skip)]
    pub records_mc: Vec<(usize, PredictionRecord)>,
}

fn pooled(repeat: usize, records: &[&PredictionRecord], scheme: crate::grading::Scheme) -> Result<RepeatReport> {
    let preds = records
        .iter()
        .map(|r| GradeLabel::from_separated(r.predicted_crowe, r.predicted_kl))
        .collect::<Result<Vec<_>>>()?;
    let truths = records
        .iter()
        .map(|r| {
            let c = r.true_class.ok_or_else(|| Error::Input(format!("{} has no truth", r.image_id)))?;
            Ok(GradeLabel::from_combined(CombinedClass::new(c)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let set = EvalSet::new(preds, truths, scheme)?;
    Ok(RepeatReport { repeat, metrics: summarize(&set)?, confusion: confusion(&set) })
}

fn summarize_repeats(
    reports: &[RepeatReport],
    records: &[(usize, PredictionRecord)],
) -> BTreeMap<String, MeanSd> {
    let mut out = BTreeMap::new();
    for name in SUMMARY_METRICS {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|rep| {
                let recs: Vec<&PredictionRecord> =
                    records.iter().filter(|(r, _)| *r == rep.repeat).map(|(_, p)| p).collect();
                metric_value(&rep.metrics, &recs, name)
            })
            .collect();
        if !values.is_empty() {
            out.insert(name.to_string(), MeanSd::of(&values));
        }
    }
    out
}

impl RunReport {
    fn assemble(
        config: &ExperimentConfig,
        fold_reports: Vec<FoldReport>,
        records_single: Vec<(usize, PredictionRecord)>,
        records_mc: Vec<(usize, PredictionRecord)>,
        repeats: usize,
        folds: usize,
    ) -> Result<RunReport> {
        let scheme = config.head.scheme;
        let per_repeat = |records: &[(usize, PredictionRecord)]| -> Result<Vec<RepeatReport>> {
            (0..repeats)
                .filter_map(|rep| {
                    let recs: Vec<&PredictionRecord> =
                        records.iter().filter(|(r, _)| *r == rep).map(|(_, p)| p).collect();
                    (!recs.is_empty()).then(|| pooled(rep, &recs, scheme))
                })
                .collect()
        };
        let repeat_single = per_repeat(&records_single)?;
        let repeat_mc = per_repeat(&records_mc)?;
        Ok(RunReport {
            config_hash: config.hash(),
            setting: config.setting_name(),
            folds,
            repeats,
            mc_samples: config.mc_samples,
            summary_single: summarize_repeats(&repeat_single, &records_single),
            summary_mc: summarize_repeats(&repeat_mc, &records_mc),
            fold_reports,
            repeat_single,
            repeat_mc,
            records_single,
            records_mc,
        })
    }

    /// Per-repeat values of a pooled metric, for significance testing.
    pub fn per_repeat(&self, metric: &str, mc: bool) -> Vec<f64> {
        let (reports, records) = if mc {
            (&self.repeat_mc, &self.records_mc)
        } else {
            (&self.repeat_single, &self.records_single)
        };
        reports
            .iter()
            .filter_map(|rep| {
                let recs: Vec<&PredictionRecord> =
                    records.iter().filter(|(r, _)| *r == rep.repeat).map(|(_, p)| p).collect();
                metric_value(&rep.metrics, &recs, metric)
            })
            .collect()
    }

    /// Write `report.json`, `folds.csv`, per-repeat CSVs, prediction JSON
    /// lines and SVG plots into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        let mut csv = String::from("repeat,fold,n_train,n_val,n_test,best_epoch,best_val_metric,eca,onca,balanced_exact,balanced_neighbor,se,crowe_accuracy,kl_accuracy,eca_mc,onca_mc\n");
        for f in &self.fold_reports {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{}\n",
                f.repeat,
                f.fold,
                f.n_train,
                f.n_val,
                f.n_test,
                f.best_epoch,
                opt(f.best_val_metric),
                f.single.eca,
                f.single.onca,
                f.single.balanced_exact,
                f.single.balanced_neighbor,
                opt(f.single.se),
                f.single.crowe_accuracy,
                f.single.kl_accuracy,
                opt(f.mc.as_ref().map(|m| m.eca)),
                opt(f.mc.as_ref().map(|m| m.onca)),
            ));
        }
        write_atomic(&dir.join("folds.csv"), csv.as_bytes())?;

        for (tag, reps, recs) in [
            ("s1", &self.repeat_single, &self.records_single),
            ("mc", &self.repeat_mc, &self.records_mc),
        ] {
            if reps.is_empty() {
                continue;
            }
            for rep in reps {
                rep.confusion.write_csv(&dir.join(format!("confusion_{tag}_r{}.csv", rep.repeat)))?;
            }
            let flat: Vec<PredictionRecord> = recs.iter().map(|(_, r)| r.clone()).collect();
            write_records(&flat, &dir.join(format!("predictions_{tag}.jsonl")))?;
            plot::write_confusion_heatmap(&reps[0].confusion, &format!("Confusion ({tag}, repeat 0)"), &dir.join(format!("confusion_{tag}.svg")))?;
            plot::write_error_histogram(&flat, &dir.join(format!("errors_{tag}.svg")))?;
            if tag == "mc" {
                plot::write_uncertainty_boxplot(&flat, &dir.join("uncertainty_mc.svg"))?;
            }
        }
        Ok(())
    }
}

fn select<'a>(samples: &'a [Sample], ids: &std::collections::BTreeSet<String>) -> Vec<&'a Sample> {
    samples.iter().filter(|s| ids.contains(&s.patient_id)).collect()
}

/// Patient-wise cross-validation: `config.repeats` reshuffles, each split
/// into `config.folds` folds, training one model per (repeat, fold) and
/// evaluating it on the held-out fold with 1 and `config.mc_samples` passes.
pub fn run_cv(config: &ExperimentConfig, samples: &[Sample]) -> Result<RunReport> {
    config.validate()?;
    let patients = patients_of(samples);
    let mut fold_reports = Vec::new();
    let mut records_single = Vec::new();
    let mut records_mc = Vec::new();
    for repeat in 0..config.repeats {
        let split = split_patientwise(&patients, config.folds, derive_seed(config.seed, &[10, repeat as u64]))?;
        for fold in 0..config.folds {
            let started = Instant::now();
            let part = split.partition(fold, repeat)?;
            let (tr, va, te) = (select(samples, &part.train), select(samples, &part.val), select(samples, &part.test));
            let run_seed = derive_seed(config.seed, &[11, repeat as u64, fold as u64]);
            let outcome = train(config, &tr, &va, run_seed)?;
            let single = evaluate(&outcome.model, &te, 1, run_seed)?;
            let mc = if config.mc_samples > 1 {
                Some(evaluate(&outcome.model, &te, config.mc_samples, run_seed)?)
            } else {
                None
            };
            log::info!(
                "repeat {repeat} fold {fold}: eca {:.3} onca {:.3} (best epoch {}, {:.0?})",
                single.report.eca,
                single.report.onca,
                outcome.best_epoch,
                started.elapsed()
            );
            records_single.extend(single.records.into_iter().map(|r| (repeat, r)));
            let mc_report = mc.map(|m| {
                records_mc.extend(m.records.into_iter().map(|r| (repeat, r)));
                m.report
            });
            fold_reports.push(FoldReport {
                repeat,
                fold,
                n_train: tr.len(),
                n_val: va.len(),
                n_test: te.len(),
                best_epoch: outcome.best_epoch,
                best_val_metric: outcome.best_val_metric,
                single: single.report,
                mc: mc_report,
                history: outcome.history,
            });
        }
    }
    RunReport::assemble(config, fold_reports, records_single, records_mc, config.repeats, config.folds)
}

/// Train on every sample (no validation; the final epoch is kept), as done
/// for the model applied to external data.
pub fn train_full(config: &ExperimentConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    let all: Vec<&Sample> = samples.iter().collect();
    train(config, &all, &[], derive_seed(config.seed, &[12]))
}

/// Single-pass evaluation of a trained model on an external set.
pub fn evaluate_external(config: &ExperimentConfig, model: &GradingModel, samples: &[Sample]) -> Result<RunReport> {
    let data: Vec<&Sample> = samples.iter().collect();
    let seed = derive_seed(config.seed, &[13]);
    let single = evaluate(model, &data, 1, seed)?;
    let mc = if config.mc_samples > 1 { Some(evaluate(model, &data, config.mc_samples, seed)?) } else { None };
    if !single.report.excluded_classes.is_empty() {
        log::warn!("classes absent from external set: {:?}", single.report.excluded_classes);
    }
    let mut records_mc = Vec::new();
    let mc_report = mc.map(|m| {
        records_mc = m.records.into_iter().map(|r| (0, r)).collect();
        m.report
    });
    let fold = FoldReport {
        repeat: 0,
        fold: 0,
        n_train: 0,
        n_val: 0,
        n_test: data.len(),
        best_epoch: 0,
        best_val_metric: None,
        single: single.report,
        mc: mc_report,
        history: Vec::new(),
    };
    let records_single = single.records.into_iter().map(|r| (0, r)).collect();
    RunReport::assemble(config, vec![fold], records_single, records_mc, 1, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParameter {
    /// Crowe-loss weight of the separated heads.
    Alpha,
    DropoutRate,
}

impl std::str::FromStr for AblationParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationParameter::Alpha),
            "dropout_rate" | "dropout" => Ok(AblationParameter::DropoutRate),
            _ => Err(Error::Input(format!("unknown ablation parameter {s:?} (alpha or dropout_rate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub config_hash: String,
    pub single: BTreeMap<String, MeanSd>,
    pub mc: BTreeMap<String, MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub parameter: AblationParameter,
    pub rows: Vec<AblationRow>,
}

/// Run cross-validation once per value of `parameter`.
pub fn ablate(
    config: &ExperimentConfig,
    parameter: AblationParameter,
    values: &[f64],
    samples: &[Sample],
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Input("ablation needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match parameter {
                AblationParameter::Alpha => c.head.alpha = v,
                AblationParameter::DropoutRate => c.backbone.dropout_rate = v,
            }
            let report = run_cv(&c, samples)?;
            Ok(AblationRow {
                value: v,
                config_hash: report.config_hash.clone(),
                single: report.summary_single,
                mc: report.summary_mc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { parameter, rows })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,eca_mean,eca_sd,onca_mean,onca_sd,eca_mc_mean,eca_mc_sd,onca_mc_mean,onca_mc_sd\n");
        let get = |m: &BTreeMap<String, MeanSd>, k: &str| {
            m.get(k).map_or(",".to_string(), |v| format!("{:.6},{:.6}", v.mean, v.sd))
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.value,
                get(&r.single, "eca"),
                get(&r.single, "onca"),
                get(&r.mc, "eca"),
                get(&r.mc, "onca")
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("ablation.json"), self)?;
        write_atomic(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        let xs: Vec<f64> = self.rows.iter().map(|r| r.value).collect();
        let series_of = |m: fn(&AblationRow) -> &BTreeMap<String, MeanSd>, k: &str| -> Vec<f64> {
            self.rows.iter().map(|r| m(r).get(k).map_or(f64::NAN, |v| v.mean)).collect()
        };
        let mut series = vec![
            ("ECA".to_string(), series_of(|r| &r.single, "eca")),
            ("ONCA".to_string(), series_of(|r| &r.single, "onca")),
        ];
        if self.rows.iter().any(|r| !r.mc.is_empty()) {
            series.push(("ECA (MC)".to_string(), series_of(|r| &r.mc, "eca")));
            series.push(("ONCA (MC)".to_string(), series_of(|r| &r.mc, "onca")));
        }
        let name = match self.parameter {
            AblationParameter::Alpha => "alpha",
            AblationParameter::DropoutRate => "dropout rate",
        };
        let svg = plot::line_plot(&xs, &series, &format!("Accuracy vs {name}"), name, "accuracy");
        write_atomic(&dir.join("ablation.svg"), svg.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0]);
        assert_ne!(a, derive_seed(1, &[1]));
        assert_ne!(a, derive_seed(2, &[0]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(a, derive_seed(1, &[0]));
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.sd, m.n), (2.0, 1.0, 3));
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }
}
