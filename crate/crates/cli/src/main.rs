//! `hipgrade` command-line front end.
//!
//! Logs go to stderr, data to files under `--out-dir`. Usage errors exit
//! with status 2; runtime failures exit with status 1 after printing a
//! single-line JSON error object to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hipgrade::drr::{load_drr_png, standardize, AugmentationParams};
use hipgrade::experiments::{
    ablate, embed_features, evaluate_external, generate_phantom_dataset, load_samples, render_dataset, run_cv,
    train_full, AblationParameter, Embedder, ExperimentConfig, Manifest, RunReport, VolumeFormat, VolumeManifest,
};
use hipgrade::grading::{load_checkpoint, save_checkpoint, Scheme, Task};
use hipgrade::io_util::{read_json, write_json};
use hipgrade::stats::significance_grid;
use hipgrade::uncertainty::{prediction_record, write_records};
use hipgrade::Error;

#[derive(Parser)]
#[command(name = "hipgrade", version, about = "Hip osteoarthritis grading from CT-derived radiographs")]
struct Cli {
    /// Log filter for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override a config key, e.g. `--set backbone.dropout_rate=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct Setting {
    /// Backbone name (only small_cnn is trainable here).
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    setting: Option<SchemeArg>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Reg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Combined,
    Separated,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Nifti,
    NiftiGz,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Umap,
    Pca,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Alpha,
    DropoutRate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic hip phantoms and a volume manifest.
    PhantomGen {
        #[command(flatten)]
        common: Common,
        /// Classes to generate, e.g. `1-7` or `1,4,7`.
        #[arg(long, default_value = "1-7")]
        classes: String,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Gaussian noise standard deviation (intensity units).
        #[arg(long, default_value_t = 20.0)]
        noise_sd: f64,
        #[arg(long, value_enum, default_value = "nifti-gz")]
        format: FormatArg,
    },
    /// Render one DRR per row of a volume manifest.
    Drr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Clamp intensities to LO,HI (HU) before projecting; off by default.
        #[arg(long, value_name = "LO,HI", value_delimiter = ',', num_args = 2, allow_negative_numbers = true)]
        hu_clip: Option<Vec<f32>>,
    },
    /// Train one model on every image of a DRR manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        setting: Setting,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Predict images with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single DRR image; use --manifest for many.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        mc_samples: usize,
    },
    /// Cross-validate a setting, or evaluate a checkpoint on an external set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        setting: Setting,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate this model instead of running cross-validation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validate once per value of a hyper-parameter.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        setting: Setting,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        parameter: ParamArg,
        /// Comma-separated values, e.g. `0.1,0.2,0.3`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Pairwise significance grid between settings.
    StatsGrid {
        #[command(flatten)]
        common: Common,
        /// CSV with columns `setting,value`, one row per repeat.
        #[arg(long, required_unless_present = "report")]
        input: Option<PathBuf>,
        /// `LABEL=PATH` to a run's report.json; repeatable.
        #[arg(long, conflicts_with = "input")]
        report: Vec<String>,
        /// Metric taken from each report's per-repeat results.
        #[arg(long, default_value = "eca")]
        metric: String,
        /// Use the MC-dropout results of each report.
        #[arg(long)]
        mc: bool,
        /// Paired t-test instead of Mann-Whitney U.
        #[arg(long)]
        paired: bool,
    },
    /// 2-D embedding of a checkpoint's feature-layer activations.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "umap")]
        method: MethodArg,
        #[arg(long, default_value_t = 1)]
        mc_samples: usize,
    },
}

/// Runtime failure carrying a machine-readable kind.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { kind: "input", message: message.into() }
}

type Outcome = Result<(), Failure>;

fn parse_classes(spec: &str) -> Result<Vec<u8>, Failure> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u8>().map_err(|_| input_error(format!("bad class {s:?}")));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(input_error(format!("empty class range {part:?}")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out.iter().any(|c| !(1..=7).contains(c)) {
        return Err(input_error(format!("classes must lie in 1-7, got {spec:?}")));
    }
    Ok(out)
}

fn resolve_config(common: &Common, setting: Option<&Setting>) -> Result<ExperimentConfig, Failure> {
    let picks = setting.map_or(false, |s| s.backbone.is_some() || s.task.is_some() || s.setting.is_some());
    let mut cfg = match &common.config {
        Some(path) if picks => {
            return Err(input_error(format!(
                "--backbone/--task/--setting select registered defaults and cannot be combined with --config {}; use --set",
                path.display()
            )))
        }
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let s = setting.cloned();
            let backbone = s.as_ref().and_then(|s| s.backbone.clone()).unwrap_or_else(|| "small_cnn".into());
            let task = match s.as_ref().and_then(|s| s.task) {
                Some(TaskArg::Reg) => Task::Regression,
                _ => Task::Classification,
            };
            let scheme = match s.as_ref().and_then(|s| s.setting) {
                Some(SchemeArg::Separated) => Scheme::Separated,
                _ => Scheme::Combined,
            };
            ExperimentConfig::for_setting(&backbone, task, scheme)?
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = setting {
        if let Some(v) = s.folds {
            cfg.folds = v;
        }
        if let Some(v) = s.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = s.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = s.mc_samples {
            cfg.mc_samples = v;
        }
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| input_error(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure { kind: "io", message: format!("{}: {e}", dir.display()) })
}

fn load_manifest_samples(path: &Path) -> Result<Vec<hipgrade::experiments::Sample>, Failure> {
    let samples = load_samples(&Manifest::load(path)?)?;
    if samples.is_empty() {
        return Err(input_error(format!("{}: manifest has no rows", path.display())));
    }
    Ok(samples)
}

/// Per-setting values from a `setting,value` CSV, in file order.
fn read_value_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>, Failure> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for rec in rdr.deserialize::<(String, f64)>() {
        let (label, value) = rec.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(value),
            None => groups.push((label, vec![value])),
        }
    }
    Ok(groups)
}

fn run(command: Command) -> Outcome {
    match command {
        Command::PhantomGen { common, classes, per_class, noise_sd, format } => {
            let classes = parse_classes(&classes)?;
            if per_class == 0 {
                return Err(input_error("--per-class must be at least 1"));
            }
            let seed = resolve_config(&common, None)?.seed;
            create_dir(&common.out_dir)?;
            let format = match format {
                FormatArg::Nifti => VolumeFormat::Nifti,
                FormatArg::NiftiGz => VolumeFormat::NiftiGz,
                FormatArg::Raw => VolumeFormat::Raw,
            };
            let m = generate_phantom_dataset(&classes, per_class, seed, noise_sd, format, &common.out_dir)?;
            log::info!("wrote {} phantoms and volumes.csv to {}", m.rows.len(), common.out_dir.display());
        }
        Command::Drr { common, manifest, hu_clip } => {
            resolve_config(&common, None)?;
            let clip = hu_clip.map(|v| (v[0], v[1]));
            create_dir(&common.out_dir)?;
            let m = render_dataset(&VolumeManifest::load(&manifest)?, clip, &common.out_dir)?;
            log::info!("rendered {} DRRs; manifest at {}", m.rows.len(), common.out_dir.join("manifest.csv").display());
        }
        Command::Train { common, setting, manifest } => {
            let cfg = resolve_config(&common, Some(&setting))?;
            let samples = load_manifest_samples(&manifest)?;
            create_dir(&common.out_dir)?;
            let outcome = train_full(&cfg, &samples)?;
            cfg.save(&common.out_dir.join("config.toml"))?;
            save_checkpoint(&outcome.model, &cfg.hash(), &common.out_dir.join("model.json"))?;
            write_json(&common.out_dir.join("history.json"), &outcome.history)?;
            log::info!("trained {} on {} images", cfg.setting_name(), samples.len());
        }
        Command::Predict { common, checkpoint, image, manifest, mc_samples } => {
            let cfg = resolve_config(&common, None)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            create_dir(&common.out_dir)?;
            let plain = AugmentationParams::disabled();
            match (image, manifest) {
                (Some(path), _) => {
                    let id = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                    let x = standardize(&load_drr_png(&path)?, &plain);
                    let rec = prediction_record(&model, &x, &id, mc_samples, cfg.seed)?;
                    write_json(&common.out_dir.join("prediction.json"), &rec)?;
                }
                (None, Some(path)) => {
                    let samples = load_manifest_samples(&path)?;
                    let records = samples
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let x = standardize(&s.pixels, &plain);
                            let seed = hipgrade::experiments::derive_seed(cfg.seed, &[3, i as u64]);
                            let mut r = prediction_record(&model, &x, &s.image_id, mc_samples, seed)?;
                            r.true_class = s.label.combined.map(|c| c.get());
                            Ok(r)
                        })
                        .collect::<hipgrade::Result<Vec<_>>>()?;
                    write_records(&records, &common.out_dir.join("predictions.jsonl"))?;
                }
                (None, None) => unreachable!("clap requires --image or --manifest"),
            }
        }
        Command::Evaluate { common, setting, manifest, checkpoint } => {
            let cfg = resolve_config(&common, Some(&setting))?;
            let samples = load_manifest_samples(&manifest)?;
            let (report, cfg) = match checkpoint {
                Some(path) => {
                    let (model, _) = load_checkpoint(&path)?;
                    // The model defines the setting; the config supplies seed and MC samples.
                    let mut cfg = cfg;
                    cfg.backbone = model.backbone().clone();
                    cfg.head = model.head().clone();
                    cfg.hidden = model.hidden();
                    (evaluate_external(&cfg, &model, &samples)?, cfg)
                }
                None => (run_cv(&cfg, &samples)?, cfg),
            };
            let dir = common.out_dir.join(cfg.short_hash());
            create_dir(&dir)?;
            cfg.save(&dir.join("config.toml"))?;
            report.write(&dir)?;
            log::info!("report written to {}", dir.display());
        }
        Command::Ablate { common, setting, manifest, parameter, values } => {
            let cfg = resolve_config(&common, Some(&setting))?;
            let samples = load_manifest_samples(&manifest)?;
            let parameter = match parameter {
                ParamArg::Alpha => AblationParameter::Alpha,
                ParamArg::DropoutRate => AblationParameter::DropoutRate,
            };
            let table = ablate(&cfg, parameter, &values, &samples)?;
            let dir = common.out_dir.join(cfg.short_hash());
            create_dir(&dir)?;
            cfg.save(&dir.join("config.toml"))?;
            table.write(&dir)?;
            log::info!("ablation written to {}", dir.display());
        }
        Command::StatsGrid { common, input, report, metric, mc, paired } => {
            resolve_config(&common, None)?;
            let groups = match input {
                Some(path) => read_value_table(&path)?,
                None => report
                    .iter()
                    .map(|spec| {
                        let (label, path) = spec
                            .split_once('=')
                            .ok_or_else(|| input_error(format!("--report expects LABEL=PATH, got {spec:?}")))?;
                        let r: RunReport = read_json(Path::new(path))?;
                        let values = r.per_repeat(&metric, mc);
                        if values.is_empty() {
                            return Err(input_error(format!("{path}: no per-repeat values for {metric:?}")));
                        }
                        Ok((label.to_string(), values))
                    })
                    .collect::<Result<Vec<_>, Failure>>()?,
            };
            let grid = significance_grid(&groups, paired)?;
            create_dir(&common.out_dir)?;
            grid.write(&common.out_dir.join("grid.csv"), &common.out_dir.join("grid.txt"))?;
            let means: BTreeMap<&str, f64> =
                groups.iter().map(|(l, v)| (l.as_str(), v.iter().sum::<f64>() / v.len() as f64)).collect();
            write_json(&common.out_dir.join("means.json"), &means)?;
        }
        Command::Embed { common, checkpoint, manifest, method, mc_samples } => {
            let cfg = resolve_config(&common, None)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let samples = load_manifest_samples(&manifest)?;
            if samples.len() < 3 {
                return Err(input_error("embedding needs at least 3 images"));
            }
            let embedder = match method {
                MethodArg::Umap => Embedder::default(),
                MethodArg::Pca => Embedder::Pca,
            };
            let emb = embed_features(&model, &samples, embedder, mc_samples, cfg.seed)?;
            create_dir(&common.out_dir)?;
            emb.write(&common.out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
