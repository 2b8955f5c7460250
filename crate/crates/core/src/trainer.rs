//! SGD training with step / warmup-cosine schedules, teacher pretraining
//! and the teacher-student distillation loop.
//!
//! One master seed per run fans out into the model-init, batch-order and
//! augmentation streams, so two runs that differ only in the objective see
//! identical initializations, batches and augmentations. Training batches
//! drop a short remainder so class-level terms always act on full batches.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::datasets::{augment, AugmentFlags, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::features::{self, ProjectionKind, ProjectionVars};
use crate::losses::{self, DistillWeights, LogitBatch, Metric};
use crate::models::{self, BoundParams, ForwardPass, ModelSpec, Parameters};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Multiply the rate by `factor` at each passed milestone epoch.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
    /// Linear ramp 0 -> base over the warmup epochs, then half-cosine decay
    /// to zero at `total_epochs`.
    WarmupCosine {
        warmup_epochs: usize,
        total_epochs: usize,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Step { milestones, factor } => {
                if !milestones.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidParameter(format!(
                        "milestones must be strictly increasing, got {milestones:?}"
                    )));
                }
                // A decay factor: the rate must be non-increasing over epochs.
                if *factor <= 0.0 || *factor > 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "decay factor must be in (0, 1], got {factor}"
                    )));
                }
            }
            Schedule::WarmupCosine {
                warmup_epochs,
                total_epochs,
            } => {
                if warmup_epochs >= total_epochs {
                    return Err(Error::InvalidParameter(format!(
                        "warmup ({warmup_epochs}) must be shorter than the total ({total_epochs})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn lr_at_epoch(schedule: &Schedule, base_lr: f64, epoch: usize) -> f64 {
    match schedule {
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base_lr * factor.powi(passed as i32)
        }
        Schedule::WarmupCosine {
            warmup_epochs,
            total_epochs,
        } => {
            if epoch < *warmup_epochs {
                base_lr * epoch as f64 / *warmup_epochs as f64
            } else if epoch >= *total_epochs {
                0.0
            } else {
                let t = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Mutable optimization state: momentum buffers aligned with the parameter
/// entries, the epoch counter, the best evaluation so far and the
/// augmentation stream.
pub struct TrainState {
    pub epoch: usize,
    momentum: Vec<Vec<f64>>,
    pub best: Option<BestRecord>,
    augment_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub test_top1: f64,
}

impl TrainState {
    pub fn new(params: &Parameters, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            momentum: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            best: None,
            augment_rng: rng::stream_rng(seed, Stream::Augment),
        }
    }

    fn observe(&mut self, epoch: usize, test_top1: f64) {
        let better = self.best.is_none_or(|b| test_top1 > b.test_top1);
        if better {
            self.best = Some(BestRecord { epoch, test_top1 });
        }
    }
}

/// One SGD step with momentum, optional Nesterov lookahead and coupled L2
/// weight decay:
///   v <- m v + (g + wd w)
///   w <- w - lr (g + wd w + m v)   (Nesterov)
///   w <- w - lr v                  (plain)
/// Gradients are consumed and cleared.
pub fn sgd_update(
    params: &mut Parameters,
    state: &mut TrainState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::State(format!("missing gradient for parameter {name:?}")))?
            .to_vec();
        let buf = &mut state.momentum[i];
        let data = tensor.data_mut();
        for j in 0..grad.len() {
            let g = grad[j] + cfg.weight_decay * data[j];
            buf[j] = cfg.momentum * buf[j] + g;
            let step = if cfg.nesterov {
                g + cfg.momentum * buf[j]
            } else {
                buf[j]
            };
            data[j] -= lr * step;
        }
        tensor.clear_grad();
    }
    Ok(())
}

/// Unweighted values of the loss terms computed for one batch; terms with
/// zero weight are never built and report 0. The feature entry is the full
/// weighted feature-extension contribution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub ins: f64,
    pub cla: f64,
    pub cc: f64,
    pub feature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub components: LossComponents,
    pub train_acc: f64,
    pub test_top1: f64,
    pub test_topk: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_top1: f64,
    pub best_epoch: usize,
}

/// Feature-extension settings for the distillation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistillConfig {
    pub student_tap: String,
    pub teacher_tap: String,
    pub projection: ProjectionKind,
    pub beta_f: f64,
    pub weight: f64,
    pub corr_weight: f64,
}

/// Everything one training run needs besides the objective.
pub struct TrainRun<'a> {
    pub model_spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub optim: &'a OptimConfig,
    pub schedule: &'a Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub topk: usize,
    pub augment: AugmentFlags,
    pub record_timing: bool,
}

/// Teacher side of a distillation run.
pub struct DistillSpec<'a> {
    pub teacher_spec: &'a ModelSpec,
    pub teacher: &'a Parameters,
    pub weights: &'a DistillWeights,
    pub feature: Option<&'a FeatureDistillConfig>,
}

enum Objective<'a> {
    CrossEntropy,
    Distill(&'a DistillSpec<'a>),
}

/// Train a model with plain cross-entropy; the teacher recipe.
pub fn fit_teacher(run: &TrainRun) -> Result<(Parameters, RunMetrics)> {
    train_loop(run, Objective::CrossEntropy)
}

/// Distill a student against a frozen teacher. The teacher is cloned and
/// frozen internally, so the caller's copy is untouched by construction.
pub fn distill_student(run: &TrainRun, distill: &DistillSpec) -> Result<(Parameters, RunMetrics)> {
    distill.weights.validate()?;
    if distill.teacher_spec.num_classes != run.model_spec.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes but student has {}",
            distill.teacher_spec.num_classes, run.model_spec.num_classes
        )));
    }
    train_loop(run, Objective::Distill(distill))
}

fn train_loop(run: &TrainRun, objective: Objective) -> Result<(Parameters, RunMetrics)> {
    run.optim.validate()?;
    run.schedule.validate()?;
    if run.train.num_classes != run.model_spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model expects {}",
            run.train.num_classes, run.model_spec.num_classes
        )));
    }

    // The run seed is the master: init, batch order and augmentation streams
    // all derive from it.
    let mut spec = run.model_spec.clone();
    spec.seed = run.seed;
    let mut params = models::init(&spec)?;

    let (teacher, teacher_spec, feature_cfg) = match &objective {
        Objective::CrossEntropy => (None, None, None),
        Objective::Distill(d) => {
            let mut frozen = d.teacher.clone();
            frozen.freeze();
            if let Some(f) = d.feature {
                validate_feature_cfg(f, &spec, d.teacher_spec)?;
                if f.projection == ProjectionKind::Linear {
                    let sdim = spec.tap_dim(&f.student_tap)?;
                    let tdim = d.teacher_spec.tap_dim(&f.teacher_tap)?;
                    let (w, b) = features::init_linear_projection(sdim, tdim, run.seed);
                    params.insert("proj.weight", w);
                    params.insert("proj.bias", b);
                }
            }
            (Some(frozen), Some(d.teacher_spec), d.feature)
        }
    };

    let mut state = TrainState::new(&params, run.seed);
    let mut batches = BatchIterator::new(
        run.train,
        run.batch_size,
        rng::stream_rng(run.seed, Stream::BatchOrder),
        true,
    )?;

    let mut epoch_metrics = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        state.epoch = epoch;
        let lr = lr_at_epoch(run.schedule, run.optim.learning_rate, epoch);
        let started = Instant::now();
        let mut sums = LossComponents::default();
        let mut batch_count = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for (batch_index, (features, labels)) in batches.next_epoch().into_iter().enumerate() {
            let features = augment(&features, run.augment, &mut state.augment_rng)?;
            let step = run_batch(
                &spec,
                &params,
                teacher.as_ref(),
                teacher_spec,
                feature_cfg,
                &objective,
                &features,
                &labels,
            )
            .map_err(|e| into_divergence(e, epoch, batch_index))?;

            apply_gradients(&mut params, &step.bound_grads)?;
            sgd_update(&mut params, &mut state, run.optim, lr)?;

            sums.ce += step.components.ce;
            sums.ins += step.components.ins;
            sums.cla += step.components.cla;
            sums.cc += step.components.cc;
            sums.feature += step.components.feature;
            batch_count += 1;
            correct += step.correct;
            seen += labels.len();
        }

        let test_top1 = evaluate_topk(&spec, &params, run.test, 1)?;
        let test_topk = evaluate_topk(&spec, &params, run.test, run.topk)?;
        state.observe(epoch, test_top1);

        let scale = 1.0 / batch_count.max(1) as f64;
        epoch_metrics.push(EpochMetrics {
            epoch,
            lr,
            components: LossComponents {
                ce: sums.ce * scale,
                ins: sums.ins * scale,
                cla: sums.cla * scale,
                cc: sums.cc * scale,
                feature: sums.feature * scale,
            },
            train_acc: correct as f64 / seen.max(1) as f64,
            test_top1,
            test_topk,
            seconds: if run.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    let best = match state.best {
        Some(b) => b,
        None => BestRecord {
            epoch: 0,
            test_top1: evaluate_topk(&spec, &params, run.test, 1)?,
        },
    };
    Ok((
        params,
        RunMetrics {
            epochs: epoch_metrics,
            best_top1: best.test_top1,
            best_epoch: best.epoch,
        },
    ))
}

fn validate_feature_cfg(
    cfg: &FeatureDistillConfig,
    student: &ModelSpec,
    teacher: &ModelSpec,
) -> Result<()> {
    if cfg.beta_f < 0.0 || cfg.weight < 0.0 || cfg.corr_weight < 0.0 {
        return Err(Error::InvalidParameter(
            "feature distillation weights must be non-negative".into(),
        ));
    }
    let sdim = student.tap_dim(&cfg.student_tap)?;
    let tdim = teacher.tap_dim(&cfg.teacher_tap)?;
    if cfg.projection == ProjectionKind::Identity && sdim != tdim {
        return Err(Error::Config(format!(
            "identity projection needs matching tap dims, got {sdim} vs {tdim}"
        )));
    }
    Ok(())
}

fn into_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

struct StepOutcome {
    components: LossComponents,
    correct: usize,
    bound_grads: Vec<(String, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    spec: &ModelSpec,
    params: &Parameters,
    teacher: Option<&Parameters>,
    teacher_spec: Option<&ModelSpec>,
    feature_cfg: Option<&FeatureDistillConfig>,
    objective: &Objective,
    features: &Tensor,
    labels: &[usize],
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(features);

    let student_taps: Vec<String> = feature_cfg.map(|f| vec![f.student_tap.clone()]).unwrap_or_default();
    let student_pass = models::forward(spec, &mut tape, &bound, x, &student_taps)?;

    let (loss, components) = match objective {
        Objective::CrossEntropy => {
            let ce = tape.cross_entropy_mean(student_pass.logits, labels)?;
            let components = LossComponents {
                ce: tape.scalar(ce),
                ..LossComponents::default()
            };
            (ce, components)
        }
        Objective::Distill(d) => {
            let teacher_params = teacher.expect("distill objective carries a teacher");
            let tspec = teacher_spec.expect("distill objective carries a teacher spec");
            let teacher_bound = teacher_params.bind(&mut tape);
            let teacher_taps: Vec<String> =
                feature_cfg.map(|f| vec![f.teacher_tap.clone()]).unwrap_or_default();
            let teacher_pass =
                models::forward(tspec, &mut tape, &teacher_bound, x, &teacher_taps)?;
            build_distill_objective(
                &mut tape,
                &student_pass,
                &teacher_pass,
                labels,
                d.weights,
                feature_cfg,
                &bound,
            )?
        }
    };

    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let correct = count_top1(tape.value(student_pass.logits), labels, spec.num_classes);

    let grads = tape.backward(loss)?;
    let mut bound_grads = Vec::new();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.get(var) {
            bound_grads.push((name.to_string(), g.to_vec()));
        }
    }
    Ok(StepOutcome {
        components,
        correct,
        bound_grads,
    })
}

fn build_distill_objective(
    tape: &mut Tape,
    student: &ForwardPass,
    teacher: &ForwardPass,
    labels: &[usize],
    w: &DistillWeights,
    feature_cfg: Option<&FeatureDistillConfig>,
    student_bound: &BoundParams,
) -> Result<(Var, LossComponents)> {
    let zs = LogitBatch::new(tape, student.logits)?;
    let zt = LogitBatch::new(tape, teacher.logits)?;
    let mut components = LossComponents::default();
    let mut total: Option<Var> = None;
    let push = |tape: &mut Tape, term: Var, weight: f64, total: &mut Option<Var>| -> Result<()> {
        let scaled = tape.scale(term, weight)?;
        *total = Some(match *total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
        Ok(())
    };

    if w.lambda > 0.0 {
        let ce = tape.cross_entropy_mean(student.logits, labels)?;
        components.ce = tape.scalar(ce);
        push(tape, ce, w.lambda, &mut total)?;
    }
    if w.mu > 0.0 {
        let kd = match w.metric {
            Metric::Nmse => {
                let ins = losses::instance_loss(tape, &zs, &zt)?;
                components.ins = tape.scalar(ins);
                if w.beta > 0.0 {
                    let cla = losses::class_loss(tape, &zs, &zt)?;
                    components.cla = tape.scalar(cla);
                    let weighted = tape.scale(cla, w.beta)?;
                    tape.add(ins, weighted)?
                } else {
                    ins
                }
            }
            Metric::Kl => {
                let v = losses::kd_kl(tape, &zs, &zt, w.tau)?;
                components.ins = tape.scalar(v);
                v
            }
            Metric::Js => {
                // Scaled by tau^2 like the KL objective so soft-target
                // gradients stay comparable across temperatures.
                let v = losses::baseline_metric(tape, &zs, &zt, Metric::Js, w.tau)?;
                let scaled = tape.scale(v, w.tau * w.tau)?;
                components.ins = tape.scalar(scaled);
                scaled
            }
            Metric::Mse | Metric::L1 => {
                let v = losses::baseline_metric(tape, &zs, &zt, w.metric, w.tau)?;
                components.ins = tape.scalar(v);
                v
            }
        };
        push(tape, kd, w.mu, &mut total)?;
    }
    if w.nu > 0.0 {
        let cc = losses::cc_loss(tape, &zs, &zt)?;
        components.cc = tape.scalar(cc);
        push(tape, cc, w.nu, &mut total)?;
    }
    if let Some(cfg) = feature_cfg {
        let term = feature_term(tape, student, teacher, cfg, student_bound)?;
        components.feature = tape.scalar(term);
        push(tape, term, 1.0, &mut total)?;
    }
    let loss =
        total.ok_or_else(|| Error::InvalidParameter("all objective weights are zero".into()))?;
    Ok((loss, components))
}

fn feature_term(
    tape: &mut Tape,
    student: &ForwardPass,
    teacher: &ForwardPass,
    cfg: &FeatureDistillConfig,
    student_bound: &BoundParams,
) -> Result<Var> {
    let s_tap = student.tap(&cfg.student_tap)?;
    let t_tap = teacher.tap(&cfg.teacher_tap)?;
    let proj = match cfg.projection {
        ProjectionKind::Identity => ProjectionVars::identity(),
        ProjectionKind::Linear => ProjectionVars::linear(
            student_bound.get("proj.weight")?,
            student_bound.get("proj.bias")?,
        ),
    };
    let aligned = features::align(tape, s_tap, t_tap, &proj)?;
    let kd = features::feature_kd_loss(tape, &aligned, cfg.beta_f)?;
    let mut term = tape.scale(kd, cfg.weight)?;
    if cfg.corr_weight > 0.0 {
        let corr = features::feature_cc_loss(tape, &aligned)?;
        let weighted = tape.scale(corr, cfg.corr_weight)?;
        term = tape.add(term, weighted)?;
    }
    Ok(term)
}

fn apply_gradients(params: &mut Parameters, bound_grads: &[(String, Vec<f64>)]) -> Result<()> {
    for (name, grad) in bound_grads {
        let tensor = params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name:?}")))?;
        tensor.accumulate_grad(grad)?;
    }
    Ok(())
}

/// True when `label` ranks among the `k` largest logits of `row`, ties
/// resolved toward the lower class index.
fn label_in_topk(row: &[f64], label: usize, k: usize) -> bool {
    let mut better = 0usize;
    for (c, &v) in row.iter().enumerate() {
        if v > row[label] || (v == row[label] && c < label) {
            better += 1;
        }
    }
    better < k
}

fn count_top1(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| label_in_topk(&logits[i * classes..(i + 1) * classes], label, 1))
        .count()
}

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose true label is among the k highest logits.
pub fn evaluate_topk(
    spec: &ModelSpec,
    params: &Parameters,
    data: &Dataset,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > spec.num_classes {
        return Err(Error::InvalidParameter(format!(
            "top-k must be in [1, {}], got {k}",
            spec.num_classes
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (features, labels) = data.gather(chunk);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.input(&features);
        let pass = models::forward(spec, &mut tape, &bound, x, &[])?;
        let logits = tape.value(pass.logits);
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * spec.num_classes..(i + 1) * spec.num_classes];
            if label_in_topk(row, label, k) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
