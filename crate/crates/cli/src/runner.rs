//! Experiment orchestration: teacher preparation, per-seed distillation
//! runs, the five-variant ablation, parameter sweeps, embedding export and
//! the linear probe.
//!
//! Compared variants are paired: they share the teacher checkpoint and the
//! per-seed RNG streams, so rows differ only through the objective. Runs are
//! dispatched to a small worker pool; report assembly is serialized and
//! output files are written atomically.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clkd_core::checkpoint;
use clkd_core::datasets::Dataset;
use clkd_core::losses::{DistillWeights, Metric};
use clkd_core::models::{self, ModelSpec, Parameters};
use clkd_core::tape::Tape;
use clkd_core::trainer::{
    self, DistillSpec, FeatureDistillConfig, OptimConfig, RunMetrics, Schedule, TrainRun,
};
use clkd_core::Tensor;

use crate::config::{self, ConfigFile, LoadedConfig};
use crate::failure::{config_error, CliResult, Failure};
use crate::report::RunReport;

/// A validated configuration materialized into runnable pieces.
pub struct Experiment {
    pub cfg: ConfigFile,
    pub train: Dataset,
    pub test: Dataset,
    pub teacher_spec: ModelSpec,
    pub student_spec: ModelSpec,
    pub weights: DistillWeights,
    pub feature: Option<FeatureDistillConfig>,
    pub out_dir: PathBuf,
    student_optim: OptimConfig,
    student_schedule: Schedule,
}

impl Experiment {
    pub fn build(loaded: &LoadedConfig) -> CliResult<Experiment> {
        let cfg = loaded.file.clone();
        let (train, test) = config::load_dataset(&cfg.dataset)?;
        let input_shape = train.sample_shape().to_vec();
        let classes = train.num_classes;
        let teacher_spec = config::model_spec(&cfg.teacher, "teacher", &input_shape, classes)?;
        let student_spec = config::model_spec(&cfg.student, "student", &input_shape, classes)?;
        let weights = config::distill_weights(&cfg.distill).map_err(Failure::from)?;
        let feature = if cfg.distill.feature.enabled {
            Some(config::feature_config(&cfg.distill.feature).map_err(Failure::from)?)
        } else {
            None
        };
        let out_dir = cfg.run.out_dir.clone();
        let student_optim = config::optim_of(&cfg.student);
        let student_schedule = config::schedule_of(&cfg.student);
        Ok(Experiment {
            cfg,
            train,
            test,
            teacher_spec,
            student_spec,
            weights,
            feature,
            out_dir,
            student_optim,
            student_schedule,
        })
    }

    pub fn student_optim(&self) -> &OptimConfig {
        &self.student_optim
    }

    pub fn student_schedule(&self) -> &Schedule {
        &self.student_schedule
    }

    fn student_run(&self, seed: u64) -> TrainRun<'_> {
        TrainRun {
            model_spec: &self.student_spec,
            train: &self.train,
            test: &self.test,
            optim: &self.student_optim,
            schedule: &self.student_schedule,
            epochs: self.cfg.student.epochs,
            batch_size: self.cfg.run.batch_size,
            seed,
            topk: self.cfg.run.topk,
            augment: config::augment_flags(&self.cfg.run.augment),
            record_timing: self.cfg.run.record_timing,
        }
    }

    /// Load the configured teacher checkpoint or train one, freezing the
    /// result and writing `teacher.ckpt` into the output directory.
    pub fn prepare_teacher(&self) -> CliResult<Parameters> {
        let mut teacher = match &self.cfg.teacher.checkpoint {
            Some(path) => checkpoint::load(path)?,
            None => {
                let optim = config::optim_of(&self.cfg.teacher);
                let schedule = config::schedule_of(&self.cfg.teacher);
                let run = TrainRun {
                    model_spec: &self.teacher_spec,
                    train: &self.train,
                    test: &self.test,
                    optim: &optim,
                    schedule: &schedule,
                    epochs: self.cfg.teacher.epochs,
                    batch_size: self.cfg.run.batch_size,
                    seed: self.cfg.teacher.seed.unwrap_or(1000),
                    topk: self.cfg.run.topk,
                    augment: config::augment_flags(&self.cfg.run.augment),
                    record_timing: false,
                };
                trainer::fit_teacher(&run)?.0
            }
        };
        teacher.freeze();
        fs::create_dir_all(&self.out_dir).map_err(|e| Failure {
            code: 4,
            message: format!("cannot create {}: {e}", self.out_dir.display()),
        })?;
        checkpoint::save(&teacher, &self.out_dir.join("teacher.ckpt"))?;
        Ok(teacher)
    }
}

/// One distillation job: a named weight setting and a seed.
struct Job {
    run_id: String,
    weights: DistillWeights,
    feature: Option<FeatureDistillConfig>,
    seed: u64,
}

struct JobResult {
    run_id: String,
    seed: u64,
    metrics: RunMetrics,
    params: Parameters,
}

/// Index-preserving parallel map over a fixed worker count.
fn parallel_map<T: Send, R: Send>(
    items: Vec<T>,
    threads: usize,
    f: impl Fn(T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.max(1);
    let items: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let mut slots: Vec<Option<R>> = items.iter().map(|_| None).collect();
    let work: Vec<_> = items.into_iter().map(Some).collect();
    let work = std::sync::Mutex::new(work);
    let cursor = AtomicUsize::new(0);
    let out = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::SeqCst);
                let item = {
                    let mut guard = work.lock().expect("work queue");
                    match guard.get_mut(index) {
                        Some(slot) => slot.take(),
                        None => return,
                    }
                };
                let Some((original, item)) = item else { return };
                let result = f(item);
                out.lock().expect("result slots")[original] = Some(result);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("job finished")).collect()
}

fn execute_jobs(
    exp: &Experiment,
    teacher: &Parameters,
    jobs: Vec<Job>,
    threads: usize,
) -> CliResult<Vec<JobResult>> {
    let results = parallel_map(jobs, threads, |job| -> CliResult<JobResult> {
        let run = exp.student_run(job.seed);
        let distill = DistillSpec {
            teacher_spec: &exp.teacher_spec,
            teacher,
            weights: &job.weights,
            feature: job.feature.as_ref(),
        };
        let (params, metrics) = trainer::distill_student(&run, &distill)?;
        Ok(JobResult {
            run_id: job.run_id,
            seed: job.seed,
            metrics,
            params,
        })
    });
    results.into_iter().collect()
}

fn assemble(
    exp: &Experiment,
    run_order: &[String],
    results: Vec<JobResult>,
) -> CliResult<RunReport> {
    let mut report = RunReport::default();
    for run_id in run_order {
        let mut for_run: Vec<&JobResult> = results.iter().filter(|r| &r.run_id == run_id).collect();
        for_run.sort_by_key(|r| r.seed);
        for result in for_run {
            report.push_run(&result.run_id, result.seed, &result.metrics);
            let name = format!(
                "student-{}-seed{}.ckpt",
                sanitize(&result.run_id),
                result.seed
            );
            checkpoint::save(&result.params, &exp.out_dir.join(name))?;
        }
    }
    report.write(&exp.out_dir.join("report.csv"))?;
    Ok(report)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// Train (or load) the teacher, distill the configured student per seed and
/// emit `report.csv` plus checkpoints. Deterministic for a fixed config.
pub fn run(exp: &Experiment, threads: usize) -> CliResult<RunReport> {
    let teacher = exp.prepare_teacher()?;
    let run_id = exp.cfg.run.name.clone();
    let jobs = exp
        .cfg
        .run
        .seeds
        .iter()
        .map(|&seed| Job {
            run_id: run_id.clone(),
            weights: exp.weights.clone(),
            feature: exp.feature.clone(),
            seed,
        })
        .collect();
    let results = execute_jobs(exp, &teacher, jobs, threads)?;
    assemble(exp, &[run_id], results)
}

pub const ABLATION_VARIANTS: [&str; 5] = ["baseline", "kd", "wo_cla", "wo_cor", "clkd"];

/// The five ablation rows, derived from the configured weights:
/// cross-entropy only, the classic temperature-scaled KL recipe, instance
/// NMSE only, instance + class, and the full objective. Weight masses are
/// renormalized onto the simplex when a term is dropped.
pub fn ablation_weights(w: &DistillWeights) -> CliResult<Vec<(String, DistillWeights)>> {
    let masses = |lambda: f64, mu: f64, nu: f64, beta: f64| -> CliResult<DistillWeights> {
        Ok(w.clone()
            .with_simplex_masses(lambda, mu, nu)
            .map_err(Failure::from)?
            .with_beta(beta))
    };
    let baseline = masses(1.0, 0.0, 0.0, 0.0)?;
    let kd = DistillWeights {
        lambda: 1.0 - w.alpha,
        mu: w.alpha,
        nu: 0.0,
        beta: 0.0,
        metric: Metric::Kl,
        ..w.clone()
    };
    kd.validate().map_err(Failure::from)?;
    let wo_cla = masses(w.lambda, w.mu, 0.0, 0.0)?;
    let wo_cor = masses(w.lambda, w.mu, 0.0, w.beta)?;
    Ok(vec![
        ("baseline".into(), baseline),
        ("kd".into(), kd),
        ("wo_cla".into(), wo_cla),
        ("wo_cor".into(), wo_cor),
        ("clkd".into(), w.clone()),
    ])
}

/// Run the five ablation variants over the configured seeds with one shared
/// teacher, into a single combined report.
pub fn ablation(exp: &Experiment, threads: usize) -> CliResult<RunReport> {
    let teacher = exp.prepare_teacher()?;
    let variants = ablation_weights(&exp.weights)?;
    let mut jobs = Vec::new();
    for (name, weights) in &variants {
        for &seed in &exp.cfg.run.seeds {
            jobs.push(Job {
                run_id: name.clone(),
                weights: weights.clone(),
                // The feature extension is part of the full objective only.
                feature: if name == "clkd" { exp.feature.clone() } else { None },
                seed,
            });
        }
    }
    let results = execute_jobs(exp, &teacher, jobs, threads)?;
    let order: Vec<String> = variants.into_iter().map(|(n, _)| n).collect();
    assemble(exp, &order, results)
}

/// One run per swept value per seed; the swept parameter is substituted by
/// dotted path into the raw config, weights renormalized when needed, and
/// each derived config revalidated before any training starts.
pub fn sweep(
    loaded: &LoadedConfig,
    param: &str,
    values: &[String],
    threads: usize,
) -> CliResult<RunReport> {
    if values.is_empty() {
        return Err(config_error(param, "sweep needs at least one value"));
    }
    // All swept configs share the dataset/teacher sections; build once for
    // the teacher, then rebuild students per value.
    let base = Experiment::build(loaded)?;
    let teacher = base.prepare_teacher()?;

    let mut order = Vec::new();
    let mut all_results = Vec::new();
    for value in values {
        let mut raw = loaded.raw.clone();
        config::substitute(&mut raw, param, config::parse_sweep_value(value))?;
        config::renormalize_weights_if_needed(&mut raw, param)?;
        let derived = config::from_value(raw)?;
        let mut exp = Experiment::build(&derived)?;
        exp.out_dir = base.out_dir.clone();
        let run_id = format!("{param}={value}");
        order.push(run_id.clone());
        let jobs = exp
            .cfg
            .run
            .seeds
            .iter()
            .map(|&seed| Job {
                run_id: run_id.clone(),
                weights: exp.weights.clone(),
                feature: exp.feature.clone(),
                seed,
            })
            .collect();
        let results = execute_jobs(&exp, &teacher, jobs, threads)?;
        all_results.extend(results);
    }
    assemble(&base, &order, all_results)
}

/// Export the test-set activations of one tap to CSV:
/// `label,f0,...,f{D-1}`, one row per sample.
pub fn export_embeddings(
    exp: &Experiment,
    spec: &ModelSpec,
    params: &Parameters,
    tap: &str,
    out_path: &Path,
) -> CliResult<()> {
    let dim = spec.tap_dim(tap).map_err(Failure::from)?;
    let mut out = String::new();
    out.push_str("label");
    for d in 0..dim {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');

    let indices: Vec<usize> = (0..exp.test.len()).collect();
    for chunk in indices.chunks(256) {
        let (features, labels) = exp.test.gather(chunk);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.input(&features);
        let pass = models::forward(spec, &mut tape, &bound, x, &[tap.to_string()])
            .map_err(Failure::from)?;
        let values = tape.value(pass.tap(tap).map_err(Failure::from)?).to_vec();
        for (i, label) in labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for d in 0..dim {
                out.push_str(&format!(",{}", values[i * dim + d]));
            }
            out.push('\n');
        }
    }
    checkpoint::write_text_atomic(out_path, &out)?;
    Ok(())
}

/// Freeze a trained body, capture its tap over both splits, and fit a fresh
/// linear head with cross-entropy. Returns the probe's test top-1.
pub fn linear_probe(
    exp: &Experiment,
    spec: &ModelSpec,
    body: &Parameters,
    tap: &str,
) -> CliResult<f64> {
    let dim = spec.tap_dim(tap).map_err(Failure::from)?;
    let mut frozen = body.clone();
    frozen.freeze();

    let capture = |data: &Dataset| -> CliResult<Dataset> {
        let indices: Vec<usize> = (0..data.len()).collect();
        let mut values = Vec::with_capacity(data.len() * dim);
        for chunk in indices.chunks(256) {
            let (features, _) = data.gather(chunk);
            let mut tape = Tape::new();
            let bound = frozen.bind(&mut tape);
            let x = tape.input(&features);
            let pass = models::forward(spec, &mut tape, &bound, x, &[tap.to_string()])
                .map_err(Failure::from)?;
            values.extend_from_slice(tape.value(pass.tap(tap).map_err(Failure::from)?));
        }
        let features = Tensor::new(vec![data.len(), dim], values).map_err(Failure::from)?;
        Dataset::new(features, data.labels.clone(), data.num_classes, data.split)
            .map_err(Failure::from)
    };
    let probe_train = capture(&exp.train)?;
    let probe_test = capture(&exp.test)?;

    let head_spec = ModelSpec::mlp(dim, vec![], exp.train.num_classes, 0);
    let optim = OptimConfig {
        learning_rate: exp.cfg.probe.learning_rate,
        momentum: exp.cfg.probe.momentum,
        nesterov: false,
        weight_decay: exp.cfg.probe.weight_decay,
    };
    let epochs = exp.cfg.probe.epochs;
    // Appendix-style probe recipe: divide the rate by 10 every quarter.
    let quarter = (epochs / 4).max(1);
    let schedule = Schedule::Step {
        milestones: vec![quarter, 2 * quarter, 3 * quarter],
        factor: 0.1,
    };
    let run = TrainRun {
        model_spec: &head_spec,
        train: &probe_train,
        test: &probe_test,
        optim: &optim,
        schedule: &schedule,
        epochs,
        batch_size: exp.cfg.run.batch_size.min(probe_train.len()),
        seed: 77,
        topk: 1,
        augment: clkd_core::datasets::AugmentFlags::none(),
        record_timing: false,
    };
    let (_, metrics) = trainer::fit_teacher(&run)?;
    Ok(metrics.best_top1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_keeps_filenames_tame() {
        assert_eq!(sanitize("distill.nu=0"), "distill.nu_0");
        assert_eq!(sanitize("clkd"), "clkd");
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map((0..32).collect::<Vec<_>>(), 4, |x| x * 2);
        assert_eq!(out, (0..32).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn ablation_has_the_five_rows() {
        let variants = ablation_weights(&DistillWeights::reference()).unwrap();
        let names: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ABLATION_VARIANTS);
        let kd = &variants[1].1;
        assert_eq!(kd.metric, Metric::Kl);
        assert!((kd.lambda - 0.1).abs() < 1e-12);
        let baseline = &variants[0].1;
        assert_eq!(baseline.lambda, 1.0);
        for (_, w) in &variants {
            w.validate().unwrap();
        }
    }
}
