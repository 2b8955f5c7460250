//! Distillation objectives over teacher/student logit batches.
//!
//! The class-aware family reads the B x C logit matrix both ways: rows are
//! per-instance predictions (instance loss), columns are per-class
//! representations across the batch (class loss, reached by row-normalizing
//! and transposing). A class correlation term matches the C x C second-moment
//! structure of the two batches. Comparison metrics (KL, JS, MSE, L1) are
//! provided for baseline runs.
//!
//! Gradients never flow into the teacher argument of any loss here; the
//! teacher side is detached on entry.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-norm guard; far below any logit magnitude seen in training, so it
/// only catches the exact-zero row.
pub const NORM_EPSILON: f64 = 1e-12;

/// A B x C matrix of pre-softmax logits for one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct LogitBatch {
    var: Var,
    batch: usize,
    classes: usize,
}

impl LogitBatch {
    /// Wrap a rank-2 tape value. Class-level terms need at least two
    /// instances and two classes.
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let shape = tape.shape(var);
        if shape.len() != 2 {
            return Err(Error::Rank {
                op: "logit_batch",
                expected: 2,
                shape: shape.to_vec(),
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if batch < 2 {
            return Err(Error::DegenerateBatch(format!(
                "logit batch needs at least 2 instances, got {batch}"
            )));
        }
        if classes < 2 {
            return Err(Error::DegenerateBatch(format!(
                "logit batch needs at least 2 classes, got {classes}"
            )));
        }
        Ok(LogitBatch {
            var,
            batch,
            classes,
        })
    }

    /// Record a tensor as a leaf and wrap it.
    pub fn from_tensor(tape: &mut Tape, t: &Tensor) -> Result<Self> {
        let var = tape.leaf(t);
        LogitBatch::new(tape, var)
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Discrepancy metric selector for baseline comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Kl,
    Js,
    Mse,
    L1,
    Nmse,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Metric::Kl),
            "js" => Ok(Metric::Js),
            "mse" => Ok(Metric::Mse),
            "l1" => Ok(Metric::L1),
            "nmse" => Ok(Metric::Nmse),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric {other:?}, expected one of kl, js, mse, l1, nmse"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Kl => "kl",
            Metric::Js => "js",
            Metric::Mse => "mse",
            Metric::L1 => "l1",
            Metric::Nmse => "nmse",
        };
        f.write_str(s)
    }
}

/// Full hyperparameter record for one distillation objective.
///
/// `lambda`, `mu`, `nu` weight the cross-entropy, distillation and class
/// correlation terms and must lie on the simplex. `alpha` is the classic
/// two-term mixing weight used by the vanilla-KD recipe, `beta` trades the
/// class loss against the instance loss, and `tau` softens the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillWeights {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub metric: Metric,
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        let sum = self.lambda + self.mu + self.nu;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "lambda + mu + nu must equal 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Harness defaults for the reference configuration; CLI-overridable.
    /// The correlation weight is kept small: that term is quartic in the raw
    /// logits and dominates the gradient when it is given simplex-scale mass.
    pub fn reference() -> Self {
        DistillWeights {
            tau: 4.0,
            alpha: 0.9,
            beta: 2.0,
            lambda: 0.1,
            mu: 0.88,
            nu: 0.02,
            metric: Metric::Nmse,
        }
    }

    /// Same weights with a different class-loss coefficient.
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    /// Project raw non-negative masses for (lambda, mu, nu) back onto the
    /// simplex, preserving their ratios. This is how sweeps over a single
    /// weight are interpreted.
    pub fn with_simplex_masses(mut self, lambda: f64, mu: f64, nu: f64) -> Result<Self> {
        if lambda < 0.0 || mu < 0.0 || nu < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "weight masses must be non-negative, got ({lambda}, {mu}, {nu})"
            )));
        }
        let total = lambda + mu + nu;
        if total <= 0.0 {
            return Err(Error::InvalidParameter(
                "weight masses must not all be zero".into(),
            ));
        }
        self.lambda = lambda / total;
        self.mu = mu / total;
        self.nu = nu / total;
        Ok(self)
    }
}

/// C x C class correlation matrix of a logit batch, with the divisor that
/// was applied.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationMatrix {
    pub values: Var,
    pub classes: usize,
    pub normalizer: f64,
}

impl CorrelationMatrix {
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.value_tensor(self.values)
    }
}

/// Normalized mean-squared error: mean over the N rows of
/// `|| p_i/|p_i| - z_i/|z_i| ||^2`, which equals the mean of
/// `2 - 2 cos(p_i, z_i)` and lies in [0, 4].
pub fn nmse(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(z) {
        return Err(Error::ShapeMismatch {
            op: "nmse",
            left: tape.shape(p).to_vec(),
            right: tape.shape(z).to_vec(),
        });
    }
    if tape.shape(p).len() != 2 {
        return Err(Error::Rank {
            op: "nmse",
            expected: 2,
            shape: tape.shape(p).to_vec(),
        });
    }
    let rows = tape.shape(p)[0];
    let pn = tape.l2_normalize_rows(p, NORM_EPSILON)?;
    let zn = tape.l2_normalize_rows(z, NORM_EPSILON)?;
    let diff = tape.sub(pn, zn)?;
    let sq = tape.frobenius_norm_sq(diff)?;
    tape.scale(sq, 1.0 / rows as f64)
}

/// Temperature-scaled KL distillation term:
/// `tau^2 * mean_i KL(softmax(zt_i/tau) || softmax(zs_i/tau))`.
/// Teacher is detached; composed from log-softmax so it stays finite for any
/// finite logits.
pub fn kd_kl(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch, tau: f64) -> Result<Var> {
    let kl = mean_row_kl(tape, zs, zt, tau)?;
    tape.scale(kl, tau * tau)
}

fn mean_row_kl(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch, tau: f64) -> Result<Var> {
    check_matching(zs, zt)?;
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let ztd = tape.detach(zt.var);
    let p_teacher = tape.softmax_rows(ztd, tau)?;
    let lp_teacher = tape.log_softmax_rows(ztd, tau)?;
    let lp_student = tape.log_softmax_rows(zs.var, tau)?;
    let diff = tape.sub(lp_teacher, lp_student)?;
    let terms = tape.mul(p_teacher, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / zs.batch as f64)
}

/// Instance-wise distillation: NMSE across the raw logit rows.
pub fn instance_loss(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch) -> Result<Var> {
    check_matching(zs, zt)?;
    let ztd = tape.detach(zt.var);
    nmse(tape, zs.var, ztd)
}

/// Class-wise distillation: rows are L2-normalized, the matrices transposed,
/// and NMSE taken over the resulting C class-representation rows.
pub fn class_loss(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch) -> Result<Var> {
    check_matching(zs, zt)?;
    if zs.batch < 2 {
        return Err(Error::DegenerateBatch(
            "class loss needs at least 2 instances per batch".into(),
        ));
    }
    let ztd = tape.detach(zt.var);
    let ns = tape.l2_normalize_rows(zs.var, NORM_EPSILON)?;
    let nt = tape.l2_normalize_rows(ztd, NORM_EPSILON)?;
    let ts = tape.transpose(ns)?;
    let tt = tape.transpose(nt)?;
    nmse(tape, ts, tt)
}

/// Class correlation matrix: rows centered by the per-class mean, summed as
/// outer products, divided by C - 1. Symmetric positive semi-definite by
/// construction.
pub fn class_correlation(tape: &mut Tape, z: &LogitBatch) -> Result<CorrelationMatrix> {
    if z.batch < 2 {
        return Err(Error::DegenerateBatch(
            "class correlation needs at least 2 instances per batch".into(),
        ));
    }
    correlation_of(tape, z.var, z.classes)
}

pub(crate) fn correlation_of(tape: &mut Tape, z: Var, classes: usize) -> Result<CorrelationMatrix> {
    let mean = tape.column_means(z)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_bias(z, neg_mean)?;
    let ct = tape.transpose(centered)?;
    let outer = tape.matmul(ct, centered)?;
    let normalizer = (classes - 1) as f64;
    let values = tape.scale(outer, 1.0 / normalizer)?;
    Ok(CorrelationMatrix {
        values,
        classes,
        normalizer,
    })
}

/// Class correlation loss: squared Frobenius distance between the two
/// correlation matrices, divided by C^2. Teacher is detached.
pub fn cc_loss(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch) -> Result<Var> {
    check_matching(zs, zt)?;
    let corr_s = class_correlation(tape, zs)?;
    let ztd = tape.detach(zt.var);
    if zt.batch < 2 {
        return Err(Error::DegenerateBatch(
            "class correlation needs at least 2 instances per batch".into(),
        ));
    }
    let corr_t = correlation_of(tape, ztd, zt.classes)?;
    let diff = tape.sub(corr_s.values, corr_t.values)?;
    let fro = tape.frobenius_norm_sq(diff)?;
    let c2 = (zs.classes * zs.classes) as f64;
    tape.scale(fro, 1.0 / c2)
}

/// Combined distillation loss: instance term plus `beta` times the class term.
/// With `beta = 0` this is exactly the instance loss.
pub fn kd_loss(tape: &mut Tape, zs: &LogitBatch, zt: &LogitBatch, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let ins = instance_loss(tape, zs, zt)?;
    if beta == 0.0 {
        return Ok(ins);
    }
    let cla = class_loss(tape, zs, zt)?;
    let weighted = tape.scale(cla, beta)?;
    tape.add(ins, weighted)
}

/// Weighted training objective:
/// `lambda * CE + mu * (instance + beta * class) + nu * CC`.
/// With `lambda = 0` the labels are ignored and the objective is label-free.
pub fn total_loss(
    tape: &mut Tape,
    zs: &LogitBatch,
    labels: &[usize],
    zt: &LogitBatch,
    w: &DistillWeights,
) -> Result<Var> {
    w.validate()?;
    check_matching(zs, zt)?;
    let mut acc: Option<Var> = None;
    if w.lambda > 0.0 {
        let ce = tape.cross_entropy_mean(zs.var, labels)?;
        acc = Some(tape.scale(ce, w.lambda)?);
    }
    if w.mu > 0.0 {
        let kd = kd_loss(tape, zs, zt, w.beta)?;
        let term = tape.scale(kd, w.mu)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    if w.nu > 0.0 {
        let cc = cc_loss(tape, zs, zt)?;
        let term = tape.scale(cc, w.nu)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    // The simplex constraint guarantees at least one active term.
    acc.ok_or_else(|| Error::InvalidParameter("all objective weights are zero".into()))
}

/// Baseline discrepancy metrics. KL and JS compare the tau-softened
/// distributions (per-row mean, unscaled); MSE and L1 compare raw logits
/// element-wise. Teacher is detached in all of them.
pub fn baseline_metric(
    tape: &mut Tape,
    zs: &LogitBatch,
    zt: &LogitBatch,
    metric: Metric,
    tau: f64,
) -> Result<Var> {
    check_matching(zs, zt)?;
    match metric {
        Metric::Kl => mean_row_kl(tape, zs, zt, tau),
        Metric::Js => {
            if tau <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "tau must be positive, got {tau}"
                )));
            }
            let ztd = tape.detach(zt.var);
            let p_student = tape.softmax_rows(zs.var, tau)?;
            let p_teacher = tape.softmax_rows(ztd, tau)?;
            let sum = tape.add(p_student, p_teacher)?;
            let mid = tape.scale(sum, 0.5)?;
            let kl_t = tape.kl_div_rows(p_teacher, mid)?;
            let kl_s = tape.kl_div_rows(p_student, mid)?;
            let both = tape.add(kl_t, kl_s)?;
            tape.scale(both, 0.5)
        }
        Metric::Mse => {
            let ztd = tape.detach(zt.var);
            let diff = tape.sub(zs.var, ztd)?;
            let sq = tape.frobenius_norm_sq(diff)?;
            tape.scale(sq, 1.0 / (zs.batch * zs.classes) as f64)
        }
        Metric::L1 => {
            let ztd = tape.detach(zt.var);
            let diff = tape.sub(zs.var, ztd)?;
            let abs = tape.abs(diff)?;
            let total = tape.sum(abs)?;
            tape.scale(total, 1.0 / (zs.batch * zs.classes) as f64)
        }
        Metric::Nmse => Err(Error::InvalidParameter(
            "nmse is the primary objective, not a baseline metric selector".into(),
        )),
    }
}

fn check_matching(zs: &LogitBatch, zt: &LogitBatch) -> Result<()> {
    if zs.batch != zt.batch || zs.classes != zt.classes {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: vec![zs.batch, zs.classes],
            right: vec![zt.batch, zt.classes],
        });
    }
    Ok(())
}

/// Eigenvalues of a symmetric n x n matrix by cyclic Jacobi rotations.
/// Intended for the small correlation matrices produced here.
pub fn symmetric_eigenvalues(mat: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(mat.len(), n * n);
    let mut a = mat.to_vec();
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(tape: &mut Tape, rows: &[Vec<f64>]) -> LogitBatch {
        let t = Tensor::from_rows(rows).unwrap().with_requires_grad();
        LogitBatch::from_tensor(tape, &t).unwrap()
    }

    #[test]
    fn nmse_identity_orthogonal_antipodal() {
        let mut tape = Tape::new();
        let p = Tensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let pv = tape.leaf(&p);
        let same = nmse(&mut tape, pv, pv).unwrap();
        assert!(tape.scalar(same).abs() < 1e-15);

        let q = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.0, 4.0]]).unwrap();
        let (qv, zv) = (tape.leaf(&q), tape.leaf(&z));
        let ortho = nmse(&mut tape, qv, zv).unwrap();
        assert!((tape.scalar(ortho) - 2.0).abs() < 1e-12);

        let neg = tape.scale(pv, -1.0).unwrap();
        let anti = nmse(&mut tape, pv, neg).unwrap();
        assert!((tape.scalar(anti) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn nmse_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            nmse(&mut tape, a, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kd_kl_zero_for_equal_and_nonnegative() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.4, -1.0, 2.0], vec![1.0, 0.0, -0.5]]);
        let same = kd_kl(&mut tape, &zs, &zs, 4.0).unwrap();
        assert!(tape.scalar(same).abs() < 1e-15);

        let zt = batch(&mut tape, &[vec![1.0, 0.2, -2.0], vec![0.0, 0.1, 0.3]]);
        let v = kd_kl(&mut tape, &zs, &zt, 2.0).unwrap();
        assert!(tape.scalar(v) >= 0.0);
    }

    #[test]
    fn kd_kl_matches_direct_summation_oracle() {
        // One-row case evaluated against an independent direct summation.
        let zs_row = [0.0, 0.0];
        let zt_row = [3.0f64.ln(), 0.0];
        let oracle = {
            let soft = |row: &[f64]| {
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / denom).collect::<Vec<f64>>()
            };
            let (p, q) = (soft(&zt_row), soft(&zs_row));
            p.iter()
                .zip(&q)
                .map(|(pi, qi)| pi * (pi / qi).ln())
                .sum::<f64>()
        };
        assert!((oracle - 0.13081).abs() < 1e-5);

        // kd_kl needs B >= 2; duplicate the row, which leaves the mean as-is.
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[zs_row.to_vec(), zs_row.to_vec()]);
        let zt = batch(&mut tape, &[zt_row.to_vec(), zt_row.to_vec()]);
        let v = kd_kl(&mut tape, &zs, &zt, 1.0).unwrap();
        assert!((tape.scalar(v) - oracle).abs() < 1e-12);
    }

    #[test]
    fn kd_kl_rejects_nonpositive_tau() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(
            kd_kl(&mut tape, &zs, &zs, 0.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn instance_loss_per_row_scale_invariant() {
        let mut tape = Tape::new();
        let zt = batch(&mut tape, &[vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.3]]);
        let scaled = tape.scale(zt.var(), 2.0).unwrap();
        let zs = LogitBatch::new(&tape, scaled).unwrap();
        let v = instance_loss(&mut tape, &zs, &zt).unwrap();
        assert!(tape.scalar(v).abs() < 1e-12);
    }

    #[test]
    fn class_loss_zero_for_equal() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.5, -1.0], vec![1.5, 0.2], vec![0.1, 0.9]]);
        let v = class_loss(&mut tape, &zs, &zs).unwrap();
        assert!(tape.scalar(v).abs() < 1e-12);
    }

    #[test]
    fn correlation_matches_hand_example() {
        let mut tape = Tape::new();
        let z = batch(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let corr = class_correlation(&mut tape, &z).unwrap();
        let values = tape.value(corr.values);
        let expected = [0.5, -0.5, -0.5, 0.5];
        for (got, want) in values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{values:?}");
        }
        assert_eq!(corr.normalizer, 1.0);
    }

    #[test]
    fn correlation_zero_for_identical_rows() {
        let mut tape = Tape::new();
        let z = batch(&mut tape, &vec![vec![0.3, 1.0, -2.0]; 4]);
        let corr = class_correlation(&mut tape, &z).unwrap();
        assert!(tape.value(corr.values).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cc_loss_zero_for_equal_nonnegative_otherwise() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.5, -1.0], vec![1.5, 0.2], vec![0.0, 0.4]]);
        let same = cc_loss(&mut tape, &zs, &zs).unwrap();
        assert!(tape.scalar(same).abs() < 1e-15);

        let zt = batch(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let v = cc_loss(&mut tape, &zs, &zt).unwrap();
        assert!(tape.scalar(v) >= 0.0);
    }

    #[test]
    fn kd_loss_beta_zero_equals_instance() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.5, -1.0], vec![1.5, 0.2]]);
        let zt = batch(&mut tape, &[vec![1.0, 0.1], vec![0.4, 0.8]]);
        let plain = instance_loss(&mut tape, &zs, &zt).unwrap();
        let combined = kd_loss(&mut tape, &zs, &zt, 0.0).unwrap();
        assert_eq!(tape.scalar(plain), tape.scalar(combined));
    }

    #[test]
    fn kd_loss_beta_one_is_sum_of_components() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.5, -1.0, 0.3], vec![1.5, 0.2, -0.6]]);
        let zt = batch(&mut tape, &[vec![1.0, 0.1, 0.0], vec![0.4, 0.8, 1.2]]);
        let ins = instance_loss(&mut tape, &zs, &zt).unwrap();
        let cla = class_loss(&mut tape, &zs, &zt).unwrap();
        let combined = kd_loss(&mut tape, &zs, &zt, 1.0).unwrap();
        let expected = tape.scalar(ins) + tape.scalar(cla);
        assert!((tape.scalar(combined) - expected).abs() < 1e-15);
    }

    #[test]
    fn total_loss_collapses_to_cross_entropy() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.0, 0.0], vec![2.0, -1.0]]);
        let labels = [0usize, 1];
        let w = DistillWeights {
            lambda: 1.0,
            mu: 0.0,
            nu: 0.0,
            ..DistillWeights::reference()
        };
        let total = total_loss(&mut tape, &zs, &labels, &zs, &w).unwrap();
        let ce = tape.cross_entropy_mean(zs.var(), &labels).unwrap();
        assert_eq!(tape.scalar(total), tape.scalar(ce));
    }

    #[test]
    fn total_loss_label_free_zero_on_equal() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.3, 0.7], vec![1.0, 0.0]]);
        let w = DistillWeights::reference()
            .with_simplex_masses(0.0, 0.7, 0.2)
            .unwrap();
        let total = total_loss(&mut tape, &zs, &[0, 0], &zs, &w).unwrap();
        assert!(tape.scalar(total).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let ce = tape.cross_entropy_mean(logits, &[0]).unwrap();
        assert!((tape.scalar(ce) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let w = DistillWeights {
            lambda: 1.0,
            mu: 0.0,
            nu: 0.0,
            ..DistillWeights::reference()
        };
        assert!(matches!(
            total_loss(&mut tape, &zs, &[0, 2], &zs, &w),
            Err(Error::IndexError(_))
        ));
    }

    #[test]
    fn baseline_metrics_zero_on_equal() {
        for metric in [Metric::Kl, Metric::Js, Metric::Mse, Metric::L1] {
            let mut tape = Tape::new();
            let zs = batch(&mut tape, &[vec![0.5, -1.0, 0.2], vec![1.5, 0.2, 0.0]]);
            let v = baseline_metric(&mut tape, &zs, &zs, metric, 3.0).unwrap();
            assert!(tape.scalar(v).abs() < 1e-15, "{metric}");
        }
    }

    #[test]
    fn js_symmetric_and_bounded() {
        let mut tape = Tape::new();
        let a = batch(&mut tape, &[vec![5.0, -3.0], vec![0.0, 1.0]]);
        let b = batch(&mut tape, &[vec![-4.0, 2.0], vec![1.0, 0.0]]);
        let ab = baseline_metric(&mut tape, &a, &b, Metric::Js, 1.0).unwrap();
        let ba = baseline_metric(&mut tape, &b, &a, Metric::Js, 1.0).unwrap();
        assert!((tape.scalar(ab) - tape.scalar(ba)).abs() < 1e-12);
        assert!(tape.scalar(ab) <= 2.0f64.ln() + 1e-12);
    }

    #[test]
    fn baseline_rejects_nmse_selector() {
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(baseline_metric(&mut tape, &zs, &zs, Metric::Nmse, 1.0).is_err());
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut tape = Tape::new();
        let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            LogitBatch::from_tensor(&mut tape, &t),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(DistillWeights::reference().validate().is_ok());
        let bad = DistillWeights {
            lambda: 0.5,
            mu: 0.6,
            nu: 0.0,
            ..DistillWeights::reference()
        };
        assert!(bad.validate().is_err());
        let bad_tau = DistillWeights {
            tau: 0.0,
            ..DistillWeights::reference()
        };
        assert!(bad_tau.validate().is_err());
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal() {
        let eig = symmetric_eigenvalues(&[3.0, 0.0, 0.0, 1.0], 2);
        let mut sorted = eig.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 1.0).abs() < 1e-12);
        assert!((sorted[1] - 3.0).abs() < 1e-12);
    }
}