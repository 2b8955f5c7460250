//! Finite-difference gradient oracle for every registered loss.
//!
//! Each loss is evaluated on seeded random inputs; the reverse-mode gradient
//! with respect to the student input is compared entry-by-entry against
//! central finite differences, and the teacher-side gradient is checked to
//! be identically zero. This is the anti-drift check behind the
//! `gradcheck` CLI subcommand.

use crate::error::Result;
use crate::features::{self, AlignedFeatures};
use crate::losses::{self, DistillWeights, LogitBatch, Metric};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSpec {
    pub batch: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            batch: 8,
            classes: 10,
            feature_dim: 6,
            seeds: vec![0, 1, 2],
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Result row for one registered loss, worst case over the requested seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub loss: String,
    pub max_rel_err: f64,
    pub teacher_grad_norm: f64,
    pub pass: bool,
}

/// The registered losses: every differentiable objective the trainer can
/// select, evaluated analytically against central finite differences.
pub fn run(spec: &GradCheckSpec) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let builders = registered_losses();
    for (name, builder) in &builders {
        let mut worst_rel: f64 = 0.0;
        let mut worst_teacher: f64 = 0.0;
        for &seed in &spec.seeds {
            let case = CheckCase::sample(spec, seed, name);
            let (rel, teacher_norm) = check_one(&case, builder.as_ref(), spec.epsilon)?;
            worst_rel = worst_rel.max(rel);
            worst_teacher = worst_teacher.max(teacher_norm);
        }
        rows.push(GradCheckRow {
            loss: name.clone(),
            max_rel_err: worst_rel,
            teacher_grad_norm: worst_teacher,
            pass: worst_rel < PASS_THRESHOLD && worst_teacher == 0.0,
        });
    }
    Ok(rows)
}

type LossBuilder = Box<dyn Fn(&mut Tape, Var, Var, &CheckCase) -> Result<Var>>;

fn registered_losses() -> Vec<(String, LossBuilder)> {
    let tau = 3.0;
    let mut list: Vec<(String, LossBuilder)> = Vec::new();
    list.push((
        "kd_kl".into(),
        Box::new(move |tape, zs, zt, _| {
            let (zs, zt) = wrap(tape, zs, zt)?;
            losses::kd_kl(tape, &zs, &zt, tau)
        }),
    ));
    list.push((
        "instance_loss".into(),
        Box::new(|tape, zs, zt, _| {
            let (zs, zt) = wrap(tape, zs, zt)?;
            losses::instance_loss(tape, &zs, &zt)
        }),
    ));
    list.push((
        "class_loss".into(),
        Box::new(|tape, zs, zt, _| {
            let (zs, zt) = wrap(tape, zs, zt)?;
            losses::class_loss(tape, &zs, &zt)
        }),
    ));
    list.push((
        "cc_loss".into(),
        Box::new(|tape, zs, zt, _| {
            let (zs, zt) = wrap(tape, zs, zt)?;
            losses::cc_loss(tape, &zs, &zt)
        }),
    ));
    list.push((
        "total_loss".into(),
        Box::new(|tape, zs, zt, case| {
            let (zs, zt) = wrap(tape, zs, zt)?;
            losses::total_loss(tape, &zs, &case.labels, &zt, &DistillWeights::reference())
        }),
    ));
    list.push((
        "feature_kd_loss".into(),
        Box::new(|tape, fs, ft, _| {
            let aligned = features::align(
                tape,
                fs,
                ft,
                &features::ProjectionVars::identity(),
            )?;
            features::feature_kd_loss(tape, &aligned, 1.0)
        }),
    ));
    for metric in [Metric::Kl, Metric::Js, Metric::Mse, Metric::L1] {
        list.push((
            format!("baseline_{metric}"),
            Box::new(move |tape: &mut Tape, zs, zt, _: &CheckCase| {
                let (zs, zt) = wrap(tape, zs, zt)?;
                losses::baseline_metric(tape, &zs, &zt, metric, tau)
            }),
        ));
    }
    list
}

fn wrap(tape: &mut Tape, zs: Var, zt: Var) -> Result<(LogitBatch, LogitBatch)> {
    Ok((LogitBatch::new(tape, zs)?, LogitBatch::new(tape, zt)?))
}

struct CheckCase {
    student: Tensor,
    teacher: Tensor,
    labels: Vec<usize>,
}

impl CheckCase {
    /// Seeded random inputs in [-2, 2]; feature losses use B x D matrices.
    fn sample(spec: &GradCheckSpec, seed: u64, loss_name: &str) -> Self {
        let cols = if loss_name.starts_with("feature") {
            spec.feature_dim
        } else {
            spec.classes
        };
        let mut rng = rng::stream_rng(seed, Stream::DataGen);
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng::uniform(&mut rng, -2.0, 2.0))
                .collect();
            Tensor::new(vec![rows, cols], data)
                .expect("finite random values")
                .with_requires_grad()
        };
        let student = draw(spec.batch, cols);
        let teacher = draw(spec.batch, cols);
        let labels = (0..spec.batch)
            .map(|i| (seed as usize + i * 7) % spec.classes)
            .collect();
        CheckCase {
            student,
            teacher,
            labels,
        }
    }
}

/// Analytic vs central-difference gradient for one case. Returns the
/// relative error in max norm and the teacher-side gradient max norm.
fn check_one(case: &CheckCase, builder: &dyn Fn(&mut Tape, Var, Var, &CheckCase) -> Result<Var>, epsilon: f64) -> Result<(f64, f64)> {
    let eval = |student: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let zs = tape.leaf(student);
        let zt = tape.leaf(&case.teacher);
        let loss = builder(&mut tape, zs, zt, case)?;
        Ok(tape.scalar(loss))
    };

    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let zs = tape.leaf(&case.student);
    let zt = tape.leaf(&case.teacher);
    let loss = builder(&mut tape, zs, zt, case)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(zs).expect("student leaf gradient").to_vec();
    let teacher_norm = grads
        .get(zt)
        .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(0.0);

    // Central finite differences over every student entry.
    let mut numeric = vec![0.0; analytic.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = case.student.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = case.student.clone();
        minus.data_mut()[i] -= epsilon;
        *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
    }

    let max_abs_numeric = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_abs_diff = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let rel = max_abs_diff / max_abs_numeric.max(1e-8);
    Ok((rel, teacher_norm))
}

/// Finite-difference gradient of an arbitrary scalar function of one tensor;
/// shared with the op-level property tests.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    at: &Tensor,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; at.len()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let mut plus = at.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = at.clone();
        minus.data_mut()[i] -= epsilon;
        *slot = (f(&plus)? - f(&minus)?) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Gradient check on a feature pair through a trainable linear projection;
/// exercised by the feature-extension tests.
pub fn projection_gradients_flow(spec: &GradCheckSpec, seed: u64) -> Result<bool> {
    let case = CheckCase::sample(spec, seed, "feature");
    let (weight, bias) = features::init_linear_projection(spec.feature_dim, spec.feature_dim, seed);
    let mut tape = Tape::new();
    let fs = tape.leaf(&case.student);
    let ft = tape.leaf(&case.teacher);
    let w = tape.leaf(&weight);
    let b = tape.leaf(&bias);
    let aligned: AlignedFeatures =
        features::align(&mut tape, fs, ft, &features::ProjectionVars::linear(w, b))?;
    let loss = features::feature_kd_loss(&mut tape, &aligned, 1.0)?;
    let grads = tape.backward(loss)?;
    let nonzero = |v: Option<&[f64]>| v.is_some_and(|g| g.iter().any(|x| x.abs() > 0.0));
    let teacher_zero = grads
        .get(ft)
        .map(|g| g.iter().all(|x| *x == 0.0))
        .unwrap_or(true);
    Ok(nonzero(grads.get(fs)) && nonzero(grads.get(w)) && teacher_zero)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registered_losses_pass_on_default_spec() {
        let spec = GradCheckSpec {
            seeds: vec![0],
            ..GradCheckSpec::default()
        };
        let rows = run(&spec).unwrap();
        assert_eq!(rows.len(), 10);
        for row in &rows {
            assert!(
                row.pass,
                "{} failed: rel {} teacher {}",
                row.loss, row.max_rel_err, row.teacher_grad_norm
            );
        }
    }

    #[test]
    fn projection_gets_gradient_teacher_does_not() {
        assert!(projection_gradients_flow(&GradCheckSpec::default(), 4).unwrap());
    }
}
