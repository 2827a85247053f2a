//! Grading models: backbone registry, classification and regression heads,
//! losses, class prediction and checkpoints.

mod nn;
pub mod optim;

use base64::Engine;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::drr::DRR_SIZE;
use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};
use crate::labels::{CombinedClass, GradeLabel, NUM_CLASSES, NUM_GRADES};

use nn::{Arch, Dropout, Net};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Channel count of model inputs.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Combined,
    Separated,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "cls",
            Task::Regression => "reg",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "reg" | "regression" => Ok(Task::Regression),
            _ => Err(Error::Input(format!("unknown task {s:?} (expected cls or reg)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Combined => "combined",
            Scheme::Separated => "separated",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" | "com" => Ok(Scheme::Combined),
            "separated" | "sep" => Ok(Scheme::Separated),
            _ => Err(Error::Input(format!(
                "unknown setting {s:?} (expected combined or separated)"
            ))),
        }
    }
}

/// Published defaults and availability of a registered backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneInfo {
    pub name: &'static str,
    pub dropout_placement: &'static str,
    pub dropout_cls: f64,
    pub dropout_reg: f64,
    pub epochs_cls: usize,
    pub epochs_reg: usize,
    pub lr_cls: f64,
    pub lr_reg: f64,
    /// Crowe-loss weight for separated regression (classification uses 2).
    pub alpha_reg: f64,
    /// Whether this build can instantiate and train the network.
    pub trainable: bool,
}

pub const BACKBONES: [BackboneInfo; 4] = [
    BackboneInfo {
        name: "vit_b16",
        dropout_placement: "transformer_default",
        dropout_cls: 0.1,
        dropout_reg: 0.1,
        epochs_cls: 200,
        epochs_reg: 300,
        lr_cls: 5e-5,
        lr_reg: 5e-5,
        alpha_reg: 7.0,
        trainable: false,
    },
    BackboneInfo {
        name: "vgg16",
        dropout_placement: "after_final_relu_per_resolution",
        dropout_cls: 0.3,
        dropout_reg: 0.1,
        epochs_cls: 200,
        epochs_reg: 300,
        lr_cls: 5e-5,
        lr_reg: 8e-5,
        alpha_reg: 35.0,
        trainable: false,
    },
    BackboneInfo {
        name: "densenet161",
        dropout_placement: "after_transition_layers",
        dropout_cls: 0.2,
        dropout_reg: 0.2,
        epochs_cls: 200,
        epochs_reg: 300,
        lr_cls: 5e-5,
        lr_reg: 8e-5,
        alpha_reg: 35.0,
        trainable: false,
    },
    BackboneInfo {
        name: "small_cnn",
        dropout_placement: "after_each_block",
        dropout_cls: 0.2,
        dropout_reg: 0.2,
        epochs_cls: 30,
        epochs_reg: 30,
        lr_cls: 3e-3,
        lr_reg: 3e-3,
        alpha_reg: 2.0,
        trainable: true,
    },
];

pub fn backbone_info(name: &str) -> Result<&'static BackboneInfo> {
    BACKBONES.iter().find(|b| b.name == name).ok_or_else(|| {
        let names: Vec<_> = BACKBONES.iter().map(|b| b.name).collect();
        Error::Input(format!("unknown backbone {name:?}; registered: {}", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    #[serde(default)]
    pub pretrained: bool,
    pub dropout_rate: f64,
    #[serde(default)]
    pub dropout_placement: String,
}

impl BackboneSpec {
    /// Registered defaults for `name` under `task`.
    pub fn for_task(name: &str, task: Task) -> Result<Self> {
        let info = backbone_info(name)?;
        Ok(BackboneSpec {
            name: info.name.to_string(),
            pretrained: false,
            dropout_rate: match task {
                Task::Classification => info.dropout_cls,
                Task::Regression => info.dropout_reg,
            },
            dropout_placement: info.dropout_placement.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        backbone_info(&self.name)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Input(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    pub scheme: Scheme,
    /// Crowe-loss weight; separated scheme only.
    #[serde(default = "one")]
    pub alpha: f64,
    /// KL-loss weight; separated scheme only.
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "two")]
    pub focal_gamma: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}

impl HeadSpec {
    /// Defaults: focal gamma 2, beta 1, alpha 2 for classification and the
    /// backbone's registered value for regression.
    pub fn for_setting(task: Task, scheme: Scheme, backbone: &str) -> Result<Self> {
        let info = backbone_info(backbone)?;
        Ok(HeadSpec {
            task,
            scheme,
            alpha: match task {
                Task::Classification => 2.0,
                Task::Regression => info.alpha_reg,
            },
            beta: 1.0,
            focal_gamma: 2.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("focal_gamma", self.focal_gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Width of the raw output layer.
    pub fn num_outputs(&self) -> usize {
        match (self.task, self.scheme) {
            (Task::Classification, Scheme::Combined) => NUM_CLASSES,
            (Task::Classification, Scheme::Separated) => 2 * NUM_GRADES,
            (Task::Regression, Scheme::Combined) => 1,
            (Task::Regression, Scheme::Separated) => 2,
        }
    }
}

/// Head-specific model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadOutput {
    Combined { probs: Vec<f64> },
    Separated { crowe: Vec<f64>, kl: Vec<f64> },
    Regression { value: f64 },
    SeparatedRegression { crowe: f64, kl: f64 },
}

impl HeadOutput {
    /// Flatten to one vector: probabilities (Crowe then KL when separated) or scalars.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            HeadOutput::Combined { probs } => probs.clone(),
            HeadOutput::Separated { crowe, kl } => crowe.iter().chain(kl).copied().collect(),
            HeadOutput::Regression { value } => vec![*value],
            HeadOutput::SeparatedRegression { crowe, kl } => vec![*crowe, *kl],
        }
    }

    /// Inverse of [`HeadOutput::to_vec`] for the layout implied by `head`.
    pub fn from_vec(head: &HeadSpec, v: &[f64]) -> Result<Self> {
        if v.len() != head.num_outputs() {
            return Err(Error::Input(format!(
                "output vector has {} entries, head expects {}",
                v.len(),
                head.num_outputs()
            )));
        }
        Ok(match (head.task, head.scheme) {
            (Task::Classification, Scheme::Combined) => HeadOutput::Combined { probs: v.to_vec() },
            (Task::Classification, Scheme::Separated) => HeadOutput::Separated {
                crowe: v[..NUM_GRADES].to_vec(),
                kl: v[NUM_GRADES..].to_vec(),
            },
            (Task::Regression, Scheme::Combined) => HeadOutput::Regression { value: v[0] },
            (Task::Regression, Scheme::Separated) => {
                HeadOutput::SeparatedRegression { crowe: v[0], kl: v[1] }
            }
        })
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, HeadOutput::Combined { .. } | HeadOutput::Separated { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub head: HeadOutput,
    /// Penultimate (feature-layer) activations.
    pub features: Vec<f32>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Round half up, then clamp to `[1, max]`. Non-finite values clamp to the
/// nearest end (NaN goes to 1).
pub fn round_clamp(value: f64, max: u8) -> u8 {
    if value.is_nan() {
        return 1;
    }
    (value + 0.5).floor().clamp(1.0, max as f64) as u8
}

/// Map a model output to a grade label. Separated predictions that fall off
/// the progression path come back with `combined == None`.
pub fn predict_class(output: &ModelOutput, head: &HeadSpec) -> Result<GradeLabel> {
    predict_from_head(&output.head, head)
}

pub fn predict_from_head(output: &HeadOutput, head: &HeadSpec) -> Result<GradeLabel> {
    let mismatch = || Error::Input(format!("output does not match head {:?}/{:?}", head.task, head.scheme));
    match (output, head.task, head.scheme) {
        (HeadOutput::Combined { probs }, Task::Classification, Scheme::Combined) => {
            if probs.len() != NUM_CLASSES {
                return Err(mismatch());
            }
            Ok(GradeLabel::from_combined(CombinedClass::from_index(argmax(probs))?))
        }
        (HeadOutput::Separated { crowe, kl }, Task::Classification, Scheme::Separated) => {
            if crowe.len() != NUM_GRADES || kl.len() != NUM_GRADES {
                return Err(mismatch());
            }
            GradeLabel::from_separated(argmax(crowe) as u8 + 1, argmax(kl) as u8 + 1)
        }
        (HeadOutput::Regression { value }, Task::Regression, Scheme::Combined) => {
            let c = round_clamp(*value, NUM_CLASSES as u8);
            Ok(GradeLabel::from_combined(CombinedClass::new(c)?))
        }
        (HeadOutput::SeparatedRegression { crowe, kl }, Task::Regression, Scheme::Separated) => {
            GradeLabel::from_separated(
                round_clamp(*crowe, NUM_GRADES as u8),
                round_clamp(*kl, NUM_GRADES as u8),
            )
        }
        _ => Err(mismatch()),
    }
}

fn check_target(n: usize, target: usize) -> Result<()> {
    if target >= n {
        return Err(Error::Input(format!("target index {target} out of range for {n} classes")));
    }
    Ok(())
}

/// Focal loss `-(1 - p_t)^gamma * ln(p_t)` with unit class weight; `p_t` is
/// clamped to [`PROB_EPS`] before the logarithm.
pub fn focal_loss(probs: &[f64], target: usize, gamma: f64) -> Result<f64> {
    check_target(probs.len(), target)?;
    let pt = probs[target].max(PROB_EPS);
    Ok(-(1.0 - pt).max(0.0).powf(gamma) * pt.ln())
}

/// Focal loss of `softmax(logits)` and its gradient with respect to the logits.
pub fn focal_loss_with_grad(logits: &[f64], target: usize, gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_target(logits.len(), target)?;
    let p = softmax(logits);
    let pt = p[target].max(PROB_EPS);
    let q = (1.0 - p[target]).max(0.0);
    let loss = -q.powf(gamma) * pt.ln();
    // dL/dp_t * p_t, written so that the q -> 0 limit stays finite.
    let mut s = -q.powf(gamma);
    if gamma > 0.0 && q > 0.0 {
        s += gamma * q.powf(gamma - 1.0) * p[target] * pt.ln();
    }
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| s * (if j == target { 1.0 } else { 0.0 } - pj))
        .collect();
    Ok((loss, grad))
}

/// Weighted sum of the Crowe and KL head losses.
pub fn two_head_loss(loss_crowe: f64, loss_kl: f64, alpha: f64, beta: f64) -> f64 {
    alpha * loss_crowe + beta * loss_kl
}

pub fn regression_loss(pred: f64, target: f64) -> f64 {
    (pred - target).abs()
}

/// Mean absolute error over a batch.
pub fn regression_loss_batch(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Input("regression batch must be non-empty with matching lengths".into()));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| regression_loss(*p, *t)).sum::<f64>() / preds.len() as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Default width of the fully-connected feature layer.
pub const DEFAULT_HIDDEN: usize = 256;
const SMALL_CNN_CHANNELS: [usize; 5] = [INPUT_CHANNELS, 16, 32, 64, 64];

/// A backbone plus grading head with its parameters.
#[derive(Debug, Clone)]
pub struct GradingModel {
    backbone: BackboneSpec,
    head: HeadSpec,
    hidden: usize,
    net: Net,
    params: Vec<f32>,
}

impl GradingModel {
    /// Build a freshly initialised model. Only `small_cnn` can be
    /// instantiated; the other registered backbones need pretrained weights
    /// that this build does not ship.
    pub fn new(backbone: BackboneSpec, head: HeadSpec, hidden: usize, seed: u64) -> Result<Self> {
        let net = Self::build(&backbone, &head, hidden)?;
        let out_bias: Vec<f32> = match (head.task, head.scheme) {
            (Task::Classification, _) => vec![0.0; head.num_outputs()],
            (Task::Regression, Scheme::Combined) => vec![(NUM_CLASSES as f32 + 1.0) / 2.0],
            (Task::Regression, Scheme::Separated) => vec![(NUM_GRADES as f32 + 1.0) / 2.0; 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init(&mut rng, &out_bias);
        Ok(GradingModel { backbone, head, hidden, net, params })
    }

    fn build(backbone: &BackboneSpec, head: &HeadSpec, hidden: usize) -> Result<Net> {
        backbone.validate()?;
        head.validate()?;
        let info = backbone_info(&backbone.name)?;
        if !info.trainable || backbone.pretrained {
            return Err(Error::Unsupported(format!(
                "backbone {}{} needs pretrained weights, which are not bundled; use small_cnn",
                backbone.name,
                if backbone.pretrained { " (pretrained)" } else { "" }
            )));
        }
        if hidden == 0 {
            return Err(Error::Input("hidden width must be positive".into()));
        }
        Ok(Net::new(Arch {
            channels: SMALL_CNN_CHANNELS.to_vec(),
            hidden,
            n_out: head.num_outputs(),
            input_hw: (DRR_SIZE, DRR_SIZE),
        }))
    }

    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn head(&self) -> &HeadSpec {
        &self.head
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden
    }

    fn check_input(&self, input: &Array3<f32>) -> Result<()> {
        let want = (INPUT_CHANNELS, DRR_SIZE, DRR_SIZE);
        if input.dim() != want {
            return Err(Error::Input(format!(
                "model input has shape {:?}, expected {:?}",
                input.dim(),
                want
            )));
        }
        Ok(())
    }

    fn to_output(&self, logits: &[f32], features: Vec<f32>) -> ModelOutput {
        let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let head = match (self.head.task, self.head.scheme) {
            (Task::Classification, Scheme::Combined) => HeadOutput::Combined { probs: softmax(&z) },
            (Task::Classification, Scheme::Separated) => HeadOutput::Separated {
                crowe: softmax(&z[..NUM_GRADES]),
                kl: softmax(&z[NUM_GRADES..]),
            },
            (Task::Regression, Scheme::Combined) => HeadOutput::Regression { value: z[0] },
            (Task::Regression, Scheme::Separated) => HeadOutput::SeparatedRegression { crowe: z[0], kl: z[1] },
        };
        ModelOutput { head, features }
    }

    /// Deterministic inference with dropout inactive.
    pub fn forward(&self, input: &Array3<f32>) -> Result<ModelOutput> {
        self.check_input(input)?;
        let x = input.as_standard_layout();
        let t = self.net.forward::<ChaCha8Rng>(&self.params, x.as_slice().expect("standard layout"), Dropout::Off);
        Ok(self.to_output(&t.logits, t.features))
    }

    /// One stochastic pass with dropout active at the configured rate.
    pub fn forward_mc<R: Rng>(&self, input: &Array3<f32>, rng: &mut R) -> Result<ModelOutput> {
        self.check_input(input)?;
        let x = input.as_standard_layout();
        let rate = self.backbone.dropout_rate as f32;
        let dropout = if rate > 0.0 { Dropout::On { rate, rng } } else { Dropout::Off };
        let t = self.net.forward(&self.params, x.as_slice().expect("standard layout"), dropout);
        Ok(self.to_output(&t.logits, t.features))
    }

    /// Training loss for one sample, with its parameter gradient added to
    /// `grad`. Dropout is active when `rate > 0`.
    pub(crate) fn loss_and_grad<R: Rng>(
        &self,
        input: &[f32],
        target: &GradeLabel,
        rng: &mut R,
        grad: &mut [f32],
    ) -> Result<f64> {
        let rate = self.backbone.dropout_rate as f32;
        let dropout = if rate > 0.0 { Dropout::On { rate, rng } } else { Dropout::Off };
        let t = self.net.forward(&self.params, input, dropout);
        let z: Vec<f64> = t.logits.iter().map(|&v| v as f64).collect();
        let h = &self.head;
        let (loss, dz) = match (h.task, h.scheme) {
            (Task::Classification, Scheme::Combined) => {
                let class = target
                    .combined
                    .ok_or_else(|| Error::Input(format!("training target {target} has no combined class")))?;
                focal_loss_with_grad(&z, class.index(), h.focal_gamma)?
            }
            (Task::Classification, Scheme::Separated) => {
                let (lc, gc) = focal_loss_with_grad(&z[..NUM_GRADES], target.crowe as usize - 1, h.focal_gamma)?;
                let (lk, gk) = focal_loss_with_grad(&z[NUM_GRADES..], target.kl as usize - 1, h.focal_gamma)?;
                let g = gc.iter().map(|g| h.alpha * g).chain(gk.iter().map(|g| h.beta * g)).collect();
                (two_head_loss(lc, lk, h.alpha, h.beta), g)
            }
            (Task::Regression, Scheme::Combined) => {
                let class = target
                    .combined
                    .ok_or_else(|| Error::Input(format!("training target {target} has no combined class")))?;
                let y = class.get() as f64;
                (regression_loss(z[0], y), vec![sign(z[0] - y)])
            }
            (Task::Regression, Scheme::Separated) => {
                let (yc, yk) = (target.crowe as f64, target.kl as f64);
                let loss = two_head_loss(regression_loss(z[0], yc), regression_loss(z[1], yk), h.alpha, h.beta);
                (loss, vec![h.alpha * sign(z[0] - yc), h.beta * sign(z[1] - yk)])
            }
        };
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss}")));
        }
        let dz: Vec<f32> = dz.iter().map(|&v| v as f32).collect();
        self.net.backward(&self.params, &t, &dz, grad);
        Ok(loss)
    }
}

/// Self-describing model archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub hidden: usize,
    pub config_hash: String,
    pub num_params: usize,
    /// Little-endian f32 parameters, base64-encoded.
    pub params: String,
}

pub fn save_checkpoint(model: &GradingModel, config_hash: &str, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = model.params.iter().flat_map(|v| v.to_le_bytes()).collect();
    let ck = Checkpoint {
        backbone: model.backbone.clone(),
        head: model.head.clone(),
        hidden: model.hidden,
        config_hash: config_hash.to_string(),
        num_params: model.params.len(),
        params: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    write_json(path, &ck)
}

/// Load a checkpoint, returning the model and the hash of the config that trained it.
pub fn load_checkpoint(path: &Path) -> Result<(GradingModel, String)> {
    let ck: Checkpoint = read_json(path)?;
    let net = GradingModel::build(&ck.backbone, &ck.head, ck.hidden)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(ck.params.as_bytes())
        .map_err(|e| Error::Format(format!("{}: bad parameter blob: {e}", path.display())))?;
    if bytes.len() != 4 * net.num_params() || ck.num_params != net.num_params() {
        return Err(Error::Format(format!(
            "{}: parameter blob has {} bytes, architecture needs {} parameters",
            path.display(),
            bytes.len(),
            net.num_params()
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((
        GradingModel { backbone: ck.backbone, head: ck.head, hidden: ck.hidden, net, params },
        ck.config_hash,
    ))
}
