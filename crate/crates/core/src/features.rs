//! Class-aware distillation carried over to intermediate features.
//!
//! Aligned B x D feature matrices are distilled the same way logits are:
//! an instance-wise NMSE term plus a cross-instance term on the
//! row-normalized, transposed matrices, with D playing the role of the class
//! count. The teacher tap is always detached; only the student side may be
//! projected, by a trainable linear map owned by the student's optimizer.

use crate::error::{Error, Result};
use crate::losses::{self, nmse, NORM_EPSILON};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Pass the student tap through unchanged; requires matching dimensions.
    Identity,
    /// Trainable `D_s x D` linear map with bias.
    Linear,
}

/// Tape bindings for the student-side projection.
pub struct ProjectionVars {
    pub kind: ProjectionKind,
    pub weight: Option<Var>,
    pub bias: Option<Var>,
}

impl ProjectionVars {
    pub fn identity() -> Self {
        ProjectionVars {
            kind: ProjectionKind::Identity,
            weight: None,
            bias: None,
        }
    }

    pub fn linear(weight: Var, bias: Var) -> Self {
        ProjectionVars {
            kind: ProjectionKind::Linear,
            weight: Some(weight),
            bias: Some(bias),
        }
    }
}

/// Build the trainable projection tensors for a `student_dim -> teacher_dim`
/// linear map, deterministic from the seed.
pub fn init_linear_projection(
    student_dim: usize,
    teacher_dim: usize,
    seed: u64,
) -> (Tensor, Tensor) {
    let mut rng = rng::stream_rng(seed, rng::Stream::Projection);
    let std = (2.0 / student_dim as f64).sqrt();
    let data: Vec<f64> = (0..student_dim * teacher_dim)
        .map(|_| rng::normal(&mut rng) * std)
        .collect();
    let weight = Tensor::new(vec![student_dim, teacher_dim], data)
        .expect("finite init values")
        .with_requires_grad();
    let bias = Tensor::zeros(vec![teacher_dim]).with_requires_grad();
    (weight, bias)
}

/// Post-alignment feature matrices with a shared dimension D.
#[derive(Debug, Clone, Copy)]
pub struct AlignedFeatures {
    pub student: Var,
    pub teacher: Var,
    pub batch: usize,
    pub dim: usize,
}

/// Align a student tap against a (detached) teacher tap. Both taps are
/// `[B, D_*]`; the student side is projected to the teacher dimension when a
/// linear projection is supplied.
pub fn align(
    tape: &mut Tape,
    student_tap: Var,
    teacher_tap: Var,
    proj: &ProjectionVars,
) -> Result<AlignedFeatures> {
    let s_shape = tape.shape(student_tap).to_vec();
    let t_shape = tape.shape(teacher_tap).to_vec();
    if s_shape.len() != 2 || t_shape.len() != 2 || s_shape[0] != t_shape[0] {
        return Err(Error::ShapeMismatch {
            op: "feature_align",
            left: s_shape,
            right: t_shape,
        });
    }
    let teacher = tape.detach(teacher_tap);
    let student = match proj.kind {
        ProjectionKind::Identity => {
            if s_shape[1] != t_shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "feature_align(identity)",
                    left: s_shape.clone(),
                    right: t_shape.clone(),
                });
            }
            student_tap
        }
        ProjectionKind::Linear => {
            let weight = proj.weight.ok_or_else(|| {
                Error::InvalidParameter("linear projection is missing its weight".into())
            })?;
            let bias = proj.bias.ok_or_else(|| {
                Error::InvalidParameter("linear projection is missing its bias".into())
            })?;
            let w_shape = tape.shape(weight).to_vec();
            if w_shape != [s_shape[1], t_shape[1]] {
                return Err(Error::ShapeMismatch {
                    op: "feature_align(projection)",
                    left: w_shape,
                    right: vec![s_shape[1], t_shape[1]],
                });
            }
            let lin = tape.matmul(student_tap, weight)?;
            tape.add_bias(lin, bias)?
        }
    };
    Ok(AlignedFeatures {
        student,
        teacher,
        batch: s_shape[0],
        dim: t_shape[1],
    })
}

/// Feature distillation mirroring the logit loss: row-wise NMSE plus
/// `beta_f` times NMSE over the rows of the row-normalized, transposed
/// matrices.
pub fn feature_kd_loss(tape: &mut Tape, f: &AlignedFeatures, beta_f: f64) -> Result<Var> {
    if beta_f < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "beta_f must be non-negative, got {beta_f}"
        )));
    }
    if f.batch < 2 && beta_f > 0.0 {
        return Err(Error::DegenerateBatch(
            "cross-instance feature term needs at least 2 instances".into(),
        ));
    }
    let instance = nmse(tape, f.student, f.teacher)?;
    if beta_f == 0.0 {
        return Ok(instance);
    }
    let ns = tape.l2_normalize_rows(f.student, NORM_EPSILON)?;
    let nt = tape.l2_normalize_rows(f.teacher, NORM_EPSILON)?;
    let ts = tape.transpose(ns)?;
    let tt = tape.transpose(nt)?;
    let cross = nmse(tape, ts, tt)?;
    let weighted = tape.scale(cross, beta_f)?;
    tape.add(instance, weighted)
}

/// Optional correlation term on aligned features: the class-correlation
/// construction applied to the D feature columns, discrepancy divided by D^2.
pub fn feature_cc_loss(tape: &mut Tape, f: &AlignedFeatures) -> Result<Var> {
    if f.batch < 2 {
        return Err(Error::DegenerateBatch(
            "feature correlation needs at least 2 instances".into(),
        ));
    }
    if f.dim < 2 {
        return Err(Error::DegenerateBatch(
            "feature correlation needs at least 2 feature dimensions".into(),
        ));
    }
    let corr_s = losses::correlation_of(tape, f.student, f.dim)?;
    let corr_t = losses::correlation_of(tape, f.teacher, f.dim)?;
    let diff = tape.sub(corr_s.values, corr_t.values)?;
    let fro = tape.frobenius_norm_sq(diff)?;
    tape.scale(fro, 1.0 / (f.dim * f.dim) as f64)
}
