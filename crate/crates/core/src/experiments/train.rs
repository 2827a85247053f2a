//! Training loop and evaluation of a model on a set of samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig, Sample};
use crate::drr::{augment, standardize, AugmentationParams};
use crate::error::{Error, Result};
use crate::grading::optim::{cosine_lr, Adam};
use crate::grading::{GradingModel, Task};
use crate::metrics::{confusion, eca, regression_se, summarize, ConfusionMatrix, EvalSet, MetricsReport};
use crate::uncertainty::{prediction_record, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation ECA (classification) or SE (regression).
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GradingModel,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Selection score, higher is better: ECA for classification, negated SE for
/// regression (a set with no valid prediction scores -inf).
fn selection_score(task: Task, metric: f64) -> f64 {
    match task {
        Task::Classification => metric,
        Task::Regression => -metric,
    }
}

fn validation_metric(model: &GradingModel, val: &[&Sample]) -> Result<f64> {
    let (preds, truths) = predict_deterministic(model, val)?;
    let set = EvalSet::new(preds, truths, model.head().scheme)?;
    Ok(match model.head().task {
        Task::Classification => eca(&set)?,
        Task::Regression => regression_se(&set).unwrap_or(f64::INFINITY),
    })
}

fn predict_deterministic(
    model: &GradingModel,
    samples: &[&Sample],
) -> Result<(Vec<crate::labels::GradeLabel>, Vec<crate::labels::GradeLabel>)> {
    let plain = AugmentationParams::disabled();
    let preds = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&standardize(&s.pixels, &plain))?;
            crate::grading::predict_class(&out, model.head())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, samples.iter().map(|s| s.label).collect()))
}

/// Train a fresh model. The weights of the epoch with the best validation
/// score are returned (earliest epoch on ties); without validation samples
/// the final epoch is kept. All randomness derives from `seed`.
pub fn train(config: &ExperimentConfig, train: &[&Sample], val: &[&Sample], seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut model = GradingModel::new(
        config.backbone.clone(),
        config.head.clone(),
        config.hidden,
        derive_seed(seed, &[0]),
    )?;
    let n_params = model.num_params();
    let mut opt = Adam::new(n_params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, f64, Vec<f32>)> = None;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.base_lr, epoch, config.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64, i as u64]));
                    let x = augment(&train[i].pixels, &config.augmentation, &mut rng);
                    let mut grad = vec![0.0f32; n_params];
                    let loss = model.loss_and_grad(
                        x.as_slice().expect("standard layout"),
                        &train[i].label,
                        &mut rng,
                        &mut grad,
                    )?;
                    Ok((loss, grad))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f32;
            let mut grad = vec![0.0f32; n_params];
            for (loss, g) in &results {
                loss_sum += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("epoch {epoch}, batch {b}: non-finite gradient")));
            }
            opt.step(model.params_mut(), &grad, lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence(format!("epoch {epoch}: loss {train_loss}")));
        }
        let val_metric = if val.is_empty() { None } else { Some(validation_metric(&model, val)?) };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.4} val {val_metric:?}");
        history.push(EpochLog { epoch, lr, train_loss, val_metric });

        let score = val_metric.map_or(epoch as f64, |m| selection_score(config.head.task, m));
        if best.as_ref().map_or(true, |(s, ..)| score > *s) {
            best = Some((score, epoch, val_metric.unwrap_or(f64::NAN), model.params().to_vec()));
        }
    }
    let (_, best_epoch, metric, params) = best.expect("at least one epoch");
    model.params_mut().copy_from_slice(&params);
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_metric: (!val.is_empty()).then_some(metric),
        history,
    })
}

/// Predictions and metrics of one model on one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub records: Vec<PredictionRecord>,
}

/// Predict every sample with `samples` dropout passes (1 = deterministic)
/// and score the predictions.
pub fn evaluate(model: &GradingModel, data: &[&Sample], samples: usize, seed: u64) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let plain = AugmentationParams::disabled();
    let records = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let x = standardize(&s.pixels, &plain);
            let mut r = prediction_record(model, &x, &s.image_id, samples, derive_seed(seed, &[3, i as u64]))?;
            r.true_class = s.label.combined.map(|c| c.get());
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = records
        .iter()
        .map(|r| crate::labels::GradeLabel::from_separated(r.predicted_crowe, r.predicted_kl))
        .collect::<Result<Vec<_>>>()?;
    let set = EvalSet::new(preds, data.iter().map(|s| s.label).collect(), model.head().scheme)?;
    Ok(Evaluation { samples, report: summarize(&set)?, confusion: confusion(&set), records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grading::Scheme;
    use crate::labels::{CombinedClass, GradeLabel};
    use crate::volume::Side;
    use ndarray::Array2;

    /// Images whose class is encoded by the period of horizontal stripes.
    fn toy(n_per_class: usize, classes: &[u8]) -> Vec<Sample> {
        let mut out = Vec::new();
        for &c in classes {
            for i in 0..n_per_class {
                let period = 2 + 2 * c as usize;
                let pixels =
                    Array2::from_shape_fn((150, 150), |(r, _)| if ((r + i) / period) % 2 == 0 { 1.0 } else { 0.1 });
                out.push(Sample {
                    image_id: format!("{c}_{i}"),
                    patient_id: format!("{c}_{i}"),
                    side: Side::Right,
                    pixels,
                    label: GradeLabel::from_combined(CombinedClass::new(c).unwrap()),
                });
            }
        }
        out
    }

    fn quick_config(task: Task, scheme: Scheme) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_setting("small_cnn", task, scheme).unwrap();
        c.epochs = 15;
        c.batch_size = 8;
        c.hidden = 32;
        c.base_lr = 3e-3;
        c.augmentation.enabled = false;
        c
    }

    #[test]
    fn learns_separable_toy_problem() {
        let data = toy(8, &[1, 4, 7]);
        let refs: Vec<&Sample> = data.iter().collect();
        let cfg = quick_config(Task::Classification, Scheme::Combined);
        let out = train(&cfg, &refs, &refs, 5).unwrap();
        assert_eq!(out.history.len(), 15);
        let best = out.history.iter().filter_map(|h| h.val_metric).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_metric, Some(best));
        // Returned weights reproduce the recorded best validation score.
        assert_eq!(validation_metric(&out.model, &refs).unwrap(), best);
        assert!(best >= 0.99, "{:?}", out.history);
        let ev = evaluate(&out.model, &refs, 1, 0).unwrap();
        assert_eq!(ev.report.eca, best);
        assert_eq!(ev.records.len(), refs.len());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(3, &[2, 6]);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut cfg = quick_config(Task::Regression, Scheme::Separated);
        cfg.epochs = 2;
        cfg.augmentation.enabled = true;
        let a = train(&cfg, &refs, &[], 9).unwrap();
        let b = train(&cfg, &refs, &[], 9).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.best_epoch, 1);
        assert_eq!(a.best_val_metric, None);
    }

    #[test]
    fn regression_selects_lowest_error() {
        let data = toy(4, &[1, 3, 5]);
        let refs: Vec<&Sample> = data.iter().collect();
        let cfg = quick_config(Task::Regression, Scheme::Combined);
        let out = train(&cfg, &refs, &refs, 2).unwrap();
        let best = out.history.iter().filter_map(|h| h.val_metric).fold(f64::MAX, f64::min);
        assert_eq!(out.best_val_metric, Some(best));
        let first = out.history.iter().position(|h| h.val_metric == Some(best)).unwrap();
        assert_eq!(out.best_epoch, first);
    }
}
