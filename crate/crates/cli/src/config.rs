//! Declarative experiment configuration: a single TOML file holding the
//! dataset, teacher, student, distillation and run sections.
//!
//! Sweeps substitute one value by its dotted path into the raw TOML tree
//! before revalidation. Substituting one of `distill.lambda` / `mu` / `nu`
//! treats the new value as an unnormalized mass: the trio is projected back
//! onto the simplex preserving the other two weights' ratio, so a `nu = 0`
//! sweep row trains exactly like the correlation-free ablation variant.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use clkd_core::datasets::{self, AugmentFlags, Dataset, SyntheticSpec};
use clkd_core::features::ProjectionKind;
use clkd_core::losses::{DistillWeights, Metric};
use clkd_core::models::{ConvLayerSpec, ModelKind, ModelSpec};
use clkd_core::trainer::{FeatureDistillConfig, OptimConfig, Schedule};

use crate::failure::{config_error, CliResult, Failure};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: DatasetSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub distill: DistillSection,
    pub run: RunSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DatasetSection {
    #[serde(rename = "synthetic")]
    Synthetic {
        classes: usize,
        samples_per_class: usize,
        input_dim: usize,
        center_spread: f64,
        noise_scale: f64,
        seed: u64,
    },
    #[serde(rename = "idx")]
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub conv: Vec<ConvSection>,
    pub epochs: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub optim: OptimSection,
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSection {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub padding: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ScheduleSection {
    #[serde(rename = "step")]
    Step {
        #[serde(default)]
        milestones: Vec<usize>,
        factor: f64,
    },
    #[serde(rename = "warmup_cosine")]
    WarmupCosine { warmup_epochs: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub metric: String,
    #[serde(default)]
    pub feature: FeatureSection,
}

fn default_alpha() -> f64 {
    0.9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_tap")]
    pub student_tap: String,
    #[serde(default = "default_tap")]
    pub teacher_tap: String,
    #[serde(default = "default_projection")]
    pub projection: String,
    #[serde(default = "default_one")]
    pub beta_f: f64,
    #[serde(default = "default_one")]
    pub weight: f64,
    #[serde(default)]
    pub corr_weight: f64,
}

fn default_tap() -> String {
    "penultimate".into()
}

fn default_projection() -> String {
    "linear".into()
}

fn default_one() -> f64 {
    1.0
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            enabled: false,
            student_tap: default_tap(),
            teacher_tap: default_tap(),
            projection: default_projection(),
            beta_f: 1.0,
            weight: 1.0,
            corr_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    #[serde(default = "default_topk")]
    pub topk: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub augment: AugmentSection,
}

fn default_name() -> String {
    "run".into()
}

fn default_topk() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub pad_crop: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_probe_epochs() -> usize {
    40
}

fn default_probe_lr() -> f64 {
    0.1
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: default_probe_epochs(),
            learning_rate: default_probe_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
        }
    }
}

/// Raw TOML tree plus its parsed form; the tree is kept for sweeps.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub raw: toml::Value,
    pub file: ConfigFile,
}

pub fn load(path: &Path) -> CliResult<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: 4,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    let raw: toml::Value = text
        .parse()
        .map_err(|e| config_error(&path.display().to_string(), e))?;
    from_value(raw)
}

pub fn from_value(raw: toml::Value) -> CliResult<LoadedConfig> {
    let file: ConfigFile = raw
        .clone()
        .try_into()
        .map_err(|e| config_error("<config>", e))?;
    validate(&file)?;
    Ok(LoadedConfig { raw, file })
}

/// CLI overrides applied before validation.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

pub fn apply_overrides(raw: &mut toml::Value, overrides: &Overrides) -> CliResult<()> {
    if let Some(dir) = &overrides.out_dir {
        substitute(
            raw,
            "run.out_dir",
            toml::Value::String(dir.display().to_string()),
        )?;
    }
    if let Some(seeds) = &overrides.seeds {
        let list = toml::Value::Array(
            seeds
                .iter()
                .map(|s| toml::Value::Integer(*s as i64))
                .collect(),
        );
        substitute(raw, "run.seeds", list)?;
    }
    Ok(())
}

fn validate(cfg: &ConfigFile) -> CliResult<()> {
    match &cfg.dataset {
        DatasetSection::Synthetic {
            classes,
            samples_per_class,
            input_dim,
            noise_scale,
            ..
        } => {
            if *classes < 2 {
                return Err(config_error("dataset.classes", "need at least 2 classes"));
            }
            if *samples_per_class == 0 || *input_dim == 0 {
                return Err(config_error(
                    "dataset.samples_per_class",
                    "counts must be at least 1",
                ));
            }
            if *noise_scale <= 0.0 {
                return Err(config_error("dataset.noise_scale", "must be positive"));
            }
        }
        DatasetSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            for (path, field) in [
                (train_images, "dataset.train_images"),
                (train_labels, "dataset.train_labels"),
                (test_images, "dataset.test_images"),
                (test_labels, "dataset.test_labels"),
            ] {
                if !path.exists() {
                    return Err(config_error(field, format!("{} not found", path.display())));
                }
            }
        }
    }

    for (section, name) in [(&cfg.teacher, "teacher"), (&cfg.student, "student")] {
        match section.kind.as_str() {
            "mlp" => {
                if !section.conv.is_empty() {
                    return Err(config_error(
                        &format!("{name}.conv"),
                        "conv layers are only valid for kind = \"convnet\"",
                    ));
                }
            }
            "convnet" => {
                if section.conv.is_empty() {
                    return Err(config_error(
                        &format!("{name}.conv"),
                        "convnet needs at least one conv layer",
                    ));
                }
                if matches!(cfg.dataset, DatasetSection::Synthetic { .. }) {
                    return Err(config_error(
                        &format!("{name}.kind"),
                        "convnet needs image-shaped inputs; the synthetic dataset is flat",
                    ));
                }
            }
            other => {
                return Err(config_error(
                    &format!("{name}.kind"),
                    format!("unknown model kind {other:?}, expected mlp or convnet"),
                ));
            }
        }
        if let Some(ckpt) = &section.checkpoint {
            if !ckpt.exists() {
                return Err(config_error(
                    &format!("{name}.checkpoint"),
                    format!("{} not found", ckpt.display()),
                ));
            }
        }
        optim_of(section)
            .validate()
            .map_err(|e| config_error(&format!("{name}.optim"), e))?;
        schedule_of(section)
            .validate()
            .map_err(|e| config_error(&format!("{name}.schedule"), e))?;
    }

    // Fail fast on the weight simplex before any compute starts.
    distill_weights(&cfg.distill).map_err(|e| config_error("distill", e))?;
    if cfg.distill.feature.enabled {
        feature_config(&cfg.distill.feature).map_err(|e| config_error("distill.feature", e))?;
    }

    if cfg.run.seeds.is_empty() {
        return Err(config_error("run.seeds", "need at least one seed"));
    }
    if cfg.run.batch_size < 2 {
        return Err(config_error(
            "run.batch_size",
            "class-level terms need batches of at least 2",
        ));
    }
    if cfg.run.name.contains(',') {
        return Err(config_error("run.name", "must not contain commas"));
    }
    if cfg.probe.epochs == 0 && cfg.probe.learning_rate <= 0.0 {
        return Err(config_error("probe.learning_rate", "must be positive"));
    }
    Ok(())
}

pub fn distill_weights(d: &DistillSection) -> Result<DistillWeights, clkd_core::Error> {
    let metric = Metric::from_str(&d.metric)?;
    let w = DistillWeights {
        tau: d.tau,
        alpha: d.alpha,
        beta: d.beta,
        lambda: d.lambda,
        mu: d.mu,
        nu: d.nu,
        metric,
    };
    w.validate()?;
    Ok(w)
}

pub fn feature_config(f: &FeatureSection) -> Result<FeatureDistillConfig, clkd_core::Error> {
    let projection = match f.projection.as_str() {
        "identity" => ProjectionKind::Identity,
        "linear" => ProjectionKind::Linear,
        other => {
            return Err(clkd_core::Error::InvalidParameter(format!(
                "unknown projection {other:?}, expected identity or linear"
            )))
        }
    };
    if f.beta_f < 0.0 || f.weight < 0.0 || f.corr_weight < 0.0 {
        return Err(clkd_core::Error::InvalidParameter(
            "feature weights must be non-negative".into(),
        ));
    }
    Ok(FeatureDistillConfig {
        student_tap: f.student_tap.clone(),
        teacher_tap: f.teacher_tap.clone(),
        projection,
        beta_f: f.beta_f,
        weight: f.weight,
        corr_weight: f.corr_weight,
    })
}

pub fn optim_of(section: &ModelSection) -> OptimConfig {
    OptimConfig {
        learning_rate: section.optim.learning_rate,
        momentum: section.optim.momentum,
        nesterov: section.optim.nesterov,
        weight_decay: section.optim.weight_decay,
    }
}

pub fn schedule_of(section: &ModelSection) -> Schedule {
    match &section.schedule {
        ScheduleSection::Step { milestones, factor } => Schedule::Step {
            milestones: milestones.clone(),
            factor: *factor,
        },
        ScheduleSection::WarmupCosine { warmup_epochs } => Schedule::WarmupCosine {
            warmup_epochs: *warmup_epochs,
            total_epochs: section.epochs,
        },
    }
}

/// Materialize both splits of the configured dataset.
pub fn load_dataset(section: &DatasetSection) -> CliResult<(Dataset, Dataset)> {
    match section {
        DatasetSection::Synthetic {
            classes,
            samples_per_class,
            input_dim,
            center_spread,
            noise_scale,
            seed,
        } => {
            let spec = SyntheticSpec {
                num_classes: *classes,
                samples_per_class: *samples_per_class,
                input_dim: *input_dim,
                center_spread: *center_spread,
                noise_scale: *noise_scale,
                seed: *seed,
            };
            Ok(datasets::gen_gaussian_blobs(&spec)?)
        }
        DatasetSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let mut train = datasets::load_idx(train_images, train_labels)?;
            let mut test = datasets::load_idx(test_images, test_labels)?;
            test.split = datasets::Split::Test;
            // Both splits must agree on the label space.
            let classes = train.num_classes.max(test.num_classes);
            train.num_classes = classes;
            test.num_classes = classes;
            Ok((train, test))
        }
    }
}

/// Model spec for a section, given the per-sample input shape and class
/// count implied by the dataset.
pub fn model_spec(
    section: &ModelSection,
    name: &str,
    input_shape: &[usize],
    num_classes: usize,
) -> CliResult<ModelSpec> {
    let kind = match section.kind.as_str() {
        "mlp" => ModelKind::Mlp {
            hidden_sizes: section.hidden.clone(),
        },
        "convnet" => ModelKind::ConvNet {
            layers: section
                .conv
                .iter()
                .map(|c| ConvLayerSpec {
                    out_channels: c.channels,
                    kernel: c.kernel,
                    padding: c.padding,
                })
                .collect(),
        },
        other => {
            return Err(config_error(
                &format!("{name}.kind"),
                format!("unknown model kind {other:?}"),
            ))
        }
    };
    let spec = ModelSpec {
        kind,
        input_shape: input_shape.to_vec(),
        num_classes,
        seed: section.seed.unwrap_or(0),
    };
    spec.validate()
        .map_err(|e| config_error(name, e))?;
    Ok(spec)
}

/// One scalar parsed from a CLI sweep value.
pub fn parse_sweep_value(text: &str) -> toml::Value {
    if let Ok(v) = text.parse::<i64>() {
        toml::Value::Integer(v)
    } else if let Ok(v) = text.parse::<f64>() {
        toml::Value::Float(v)
    } else if let Ok(v) = text.parse::<bool>() {
        toml::Value::Boolean(v)
    } else {
        toml::Value::String(text.to_string())
    }
}

/// Replace the value at a dotted path, coercing integers to floats when the
/// existing value is a float. The path must already resolve.
pub fn substitute(root: &mut toml::Value, path: &str, new: toml::Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(part)
            .ok_or_else(|| config_error(path, "parameter path does not resolve"))?;
    }
    let last = parts.last().expect("non-empty path");
    let slot = node
        .get_mut(last)
        .ok_or_else(|| config_error(path, "parameter path does not resolve"))?;
    let coerced = match (&slot, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => new,
    };
    *slot = coerced;
    Ok(())
}

/// After substituting a distill weight, put the (lambda, mu, nu) masses back
/// on the simplex through the same normalization the ablation variants use.
pub fn renormalize_weights_if_needed(root: &mut toml::Value, path: &str) -> CliResult<()> {
    if !matches!(path, "distill.lambda" | "distill.mu" | "distill.nu") {
        return Ok(());
    }
    let read = |root: &toml::Value, key: &str| -> CliResult<f64> {
        root.get("distill")
            .and_then(|d| d.get(key))
            .and_then(toml_float)
            .ok_or_else(|| config_error(&format!("distill.{key}"), "expected a number"))
    };
    let (lambda, mu, nu) = (
        read(root, "lambda")?,
        read(root, "mu")?,
        read(root, "nu")?,
    );
    let normalized = DistillWeights::reference()
        .with_simplex_masses(lambda, mu, nu)
        .map_err(|e| config_error(path, e))?;
    substitute(root, "distill.lambda", toml::Value::Float(normalized.lambda))?;
    substitute(root, "distill.mu", toml::Value::Float(normalized.mu))?;
    substitute(root, "distill.nu", toml::Value::Float(normalized.nu))?;
    Ok(())
}

fn toml_float(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

pub fn augment_flags(section: &AugmentSection) -> AugmentFlags {
    AugmentFlags {
        horizontal_flip: section.horizontal_flip,
        pad_crop: section.pad_crop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL_CONFIG: &str = r#"
[dataset]
kind = "synthetic"
classes = 4
samples_per_class = 30
input_dim = 6
center_spread = 1.0
noise_scale = 0.8
seed = 3

[teacher]
kind = "mlp"
hidden = [16]
epochs = 2
seed = 9
[teacher.optim]
learning_rate = 0.05
weight_decay = 0.01
[teacher.schedule]
kind = "step"
milestones = [1]
factor = 0.1

[student]
kind = "mlp"
hidden = [8]
epochs = 2
[student.optim]
learning_rate = 0.02
weight_decay = 0.0005
[student.schedule]
kind = "step"
milestones = []
factor = 0.1

[distill]
tau = 4.0
beta = 2.0
lambda = 0.1
mu = 0.88
nu = 0.02
metric = "nmse"

[run]
seeds = [1, 2]
batch_size = 8
out_dir = "out"
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = from_value(SMALL_CONFIG.parse().unwrap()).unwrap();
        assert_eq!(cfg.file.run.seeds, vec![1, 2]);
        assert_eq!(cfg.file.run.topk, 5);
        let w = distill_weights(&cfg.file.distill).unwrap();
        assert_eq!(w.metric, Metric::Nmse);
    }

    #[test]
    fn bad_simplex_fails_with_field_path() {
        let mut raw: toml::Value = SMALL_CONFIG.parse().unwrap();
        substitute(&mut raw, "distill.lambda", toml::Value::Float(0.5)).unwrap();
        let err = from_value(raw).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("distill"), "{}", err.message);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let text = SMALL_CONFIG.replace("tau = 4.0", "tau = 4.0\nbogus = 1");
        let err = from_value(text.parse().unwrap()).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn sweep_substitution_preserves_types() {
        let mut raw: toml::Value = SMALL_CONFIG.parse().unwrap();
        substitute(&mut raw, "distill.beta", parse_sweep_value("0")).unwrap();
        assert_eq!(
            raw.get("distill").unwrap().get("beta"),
            Some(&toml::Value::Float(0.0))
        );
        substitute(&mut raw, "run.batch_size", parse_sweep_value("16")).unwrap();
        assert_eq!(
            raw.get("run").unwrap().get("batch_size"),
            Some(&toml::Value::Integer(16))
        );
        let err = substitute(&mut raw, "distill.missing", parse_sweep_value("1")).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn weight_sweep_renormalizes_to_simplex() {
        let mut raw: toml::Value = SMALL_CONFIG.parse().unwrap();
        substitute(&mut raw, "distill.nu", toml::Value::Float(0.0)).unwrap();
        renormalize_weights_if_needed(&mut raw, "distill.nu").unwrap();
        let cfg = from_value(raw).unwrap();
        let w = distill_weights(&cfg.file.distill).unwrap();
        assert!((w.lambda + w.mu + w.nu - 1.0).abs() < 1e-12);
        assert_eq!(w.nu, 0.0);
        // Ratio of lambda to mu is preserved.
        assert!((w.lambda / w.mu - 0.1 / 0.88).abs() < 1e-12);
    }
}
