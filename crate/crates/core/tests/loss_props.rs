//! Property tests for the distillation losses: scale invariance, the
//! NMSE-cosine identity, permutation invariance, teacher detachment and the
//! correlation-matrix guarantees.

use clkd_core::losses::{
    self, symmetric_eigenvalues, DistillWeights, LogitBatch, Metric,
};
use clkd_core::tape::{Tape, Var};
use clkd_core::tensor::Tensor;
use proptest::prelude::*;

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

fn batch(tape: &mut Tape, t: &Tensor) -> LogitBatch {
    LogitBatch::from_tensor(tape, &t.clone().with_requires_grad()).unwrap()
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.scalar(v)
}

/// Every loss the trainer can select, in one list, for blanket properties.
fn all_losses(
    tape: &mut Tape,
    zs: &LogitBatch,
    zt: &LogitBatch,
    labels: &[usize],
) -> Vec<(&'static str, f64)> {
    let w = DistillWeights::reference();
    let mut out = Vec::new();
    let v = losses::kd_kl(tape, zs, zt, 4.0).unwrap();
    out.push(("kd_kl", scalar_of(tape, v)));
    let v = losses::instance_loss(tape, zs, zt).unwrap();
    out.push(("instance", scalar_of(tape, v)));
    let v = losses::class_loss(tape, zs, zt).unwrap();
    out.push(("class", scalar_of(tape, v)));
    let v = losses::cc_loss(tape, zs, zt).unwrap();
    out.push(("cc", scalar_of(tape, v)));
    let v = losses::kd_loss(tape, zs, zt, 2.0).unwrap();
    out.push(("kd", scalar_of(tape, v)));
    let v = losses::total_loss(tape, zs, labels, zt, &w).unwrap();
    out.push(("total", scalar_of(tape, v)));
    for metric in [Metric::Kl, Metric::Js, Metric::Mse, Metric::L1] {
        let v = losses::baseline_metric(tape, zs, zt, metric, 4.0).unwrap();
        out.push((
            match metric {
                Metric::Kl => "kl",
                Metric::Js => "js",
                Metric::Mse => "mse",
                Metric::L1 => "l1",
                Metric::Nmse => unreachable!(),
            },
            scalar_of(tape, v),
        ));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_nonnegative_and_zero_on_equal(t in logits_strategy(4, 3)) {
        let labels = [0usize, 1, 2, 0];
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &t);
        for (name, value) in all_losses(&mut tape, &zs, &zs, &labels) {
            if name == "total" {
                continue; // carries the cross-entropy term
            }
            prop_assert!(value.abs() < 1e-12, "{name} on equal inputs gave {value}");
        }

        let shifted: Vec<f64> = t.data().iter().map(|v| v + 0.3).collect();
        let other = Tensor::new(vec![4, 3], shifted).unwrap();
        let mut tape = Tape::new();
        let zs = batch(&mut tape, &t);
        let zt = batch(&mut tape, &other);
        for (name, value) in all_losses(&mut tape, &zs, &zt, &labels) {
            // A constant row shift cancels inside softmax, so the softened
            // divergences can round a hair below zero.
            prop_assert!(value >= -1e-12, "{name} went negative: {value}");
        }
    }

    #[test]
    fn nmse_equals_two_minus_two_cosine(p in logits_strategy(5, 4), z in logits_strategy(5, 4)) {
        let mut tape = Tape::new();
        let (pv, zv) = (tape.leaf(&p), tape.leaf(&z));
        let v = losses::nmse(&mut tape, pv, zv).unwrap();
        let got = tape.scalar(v);

        let mut expected = 0.0;
        for r in 0..5 {
            let pr = &p.data()[r * 4..(r + 1) * 4];
            let zr = &z.data()[r * 4..(r + 1) * 4];
            let np = pr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nz = zr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = pr.iter().zip(zr).map(|(a, b)| a * b).sum();
            expected += 2.0 - 2.0 * dot / (np * nz).max(1e-300);
        }
        expected /= 5.0;
        prop_assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn per_row_scaling_leaves_instance_and_class_loss_alone(
        zs in logits_strategy(4, 3),
        zt in logits_strategy(4, 3),
        scales_s in proptest::collection::vec(0.1f64..5.0, 4),
        scales_t in proptest::collection::vec(0.1f64..5.0, 4),
    ) {
        let scale_rows = |t: &Tensor, s: &[f64]| {
            let mut data = t.data().to_vec();
            for r in 0..4 {
                for c in 0..3 {
                    data[r * 3 + c] *= s[r];
                }
            }
            Tensor::new(vec![4, 3], data).unwrap()
        };
        let mut tape = Tape::new();
        let a = batch(&mut tape, &zs);
        let b = batch(&mut tape, &zt);
        let ins = losses::instance_loss(&mut tape, &a, &b).unwrap();
        let cla = losses::class_loss(&mut tape, &a, &b).unwrap();
        let (ins0, cla0) = (tape.scalar(ins), tape.scalar(cla));

        let mut tape = Tape::new();
        let a = batch(&mut tape, &scale_rows(&zs, &scales_s));
        let b = batch(&mut tape, &scale_rows(&zt, &scales_t));
        let ins = losses::instance_loss(&mut tape, &a, &b).unwrap();
        let cla = losses::class_loss(&mut tape, &a, &b).unwrap();
        prop_assert!((tape.scalar(ins) - ins0).abs() < 1e-10);
        prop_assert!((tape.scalar(cla) - cla0).abs() < 1e-10);
    }

    #[test]
    fn batch_permutation_leaves_losses_unchanged(
        zs in logits_strategy(5, 3),
        zt in logits_strategy(5, 3),
    ) {
        let labels = [0usize, 2, 1, 0, 2];
        let perm = [3usize, 0, 4, 2, 1];
        let permute = |t: &Tensor| {
            let mut data = Vec::with_capacity(15);
            for &r in &perm {
                data.extend_from_slice(&t.data()[r * 3..(r + 1) * 3]);
            }
            Tensor::new(vec![5, 3], data).unwrap()
        };
        let permuted_labels: Vec<usize> = perm.iter().map(|&r| labels[r]).collect();

        let mut tape = Tape::new();
        let a = batch(&mut tape, &zs);
        let b = batch(&mut tape, &zt);
        let before = all_losses(&mut tape, &a, &b, &labels);

        let mut tape = Tape::new();
        let a = batch(&mut tape, &permute(&zs));
        let b = batch(&mut tape, &permute(&zt));
        let after = all_losses(&mut tape, &a, &b, &permuted_labels);

        for ((name, x), (_, y)) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
        }
    }

    #[test]
    fn class_permutation_leaves_losses_unchanged(
        zs in logits_strategy(4, 4),
        zt in logits_strategy(4, 4),
    ) {
        let labels = [0usize, 3, 2, 1];
        let perm = [2usize, 0, 3, 1]; // new column c comes from old column perm[c]
        let permute_cols = |t: &Tensor| {
            let mut data = vec![0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    data[r * 4 + c] = t.data()[r * 4 + perm[c]];
                }
            }
            Tensor::new(vec![4, 4], data).unwrap()
        };
        // label l maps to the new index of old class l.
        let inverse: Vec<usize> = (0..4).map(|l| perm.iter().position(|&p| p == l).unwrap()).collect();
        let permuted_labels: Vec<usize> = labels.iter().map(|&l| inverse[l]).collect();

        let mut tape = Tape::new();
        let a = batch(&mut tape, &zs);
        let b = batch(&mut tape, &zt);
        let before = all_losses(&mut tape, &a, &b, &labels);

        let mut tape = Tape::new();
        let a = batch(&mut tape, &permute_cols(&zs));
        let b = batch(&mut tape, &permute_cols(&zt));
        let after = all_losses(&mut tape, &a, &b, &permuted_labels);

        for ((name, x), (_, y)) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
        }
    }

    #[test]
    fn correlation_matrix_symmetric_and_psd(t in logits_strategy(6, 4)) {
        let mut tape = Tape::new();
        let z = batch(&mut tape, &t);
        let corr = losses::class_correlation(&mut tape, &z).unwrap();
        let values = tape.value(corr.values).to_vec();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((values[i * 4 + j] - values[j * 4 + i]).abs() < 1e-10);
            }
        }
        let eig = symmetric_eigenvalues(&values, 4);
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-8 * max.max(1e-30), "eigenvalues {eig:?}");
    }

    #[test]
    fn teacher_side_gradients_are_zero(zs in logits_strategy(4, 3), zt in logits_strategy(4, 3)) {
        let labels = [0usize, 1, 2, 0];
        type Builder = fn(&mut Tape, &LogitBatch, &LogitBatch, &[usize]) -> Var;
        let builders: Vec<(&str, Builder)> = vec![
            ("kd_kl", |t, s, te, _| losses::kd_kl(t, s, te, 4.0).unwrap()),
            ("instance", |t, s, te, _| losses::instance_loss(t, s, te).unwrap()),
            ("class", |t, s, te, _| losses::class_loss(t, s, te).unwrap()),
            ("cc", |t, s, te, _| losses::cc_loss(t, s, te).unwrap()),
            ("total", |t, s, te, l| {
                losses::total_loss(t, s, l, te, &DistillWeights::reference()).unwrap()
            }),
            ("js", |t, s, te, _| losses::baseline_metric(t, s, te, Metric::Js, 2.0).unwrap()),
            ("mse", |t, s, te, _| losses::baseline_metric(t, s, te, Metric::Mse, 2.0).unwrap()),
            ("l1", |t, s, te, _| losses::baseline_metric(t, s, te, Metric::L1, 2.0).unwrap()),
        ];
        for (name, build) in builders {
            let mut tape = Tape::new();
            let a = batch(&mut tape, &zs);
            let b = batch(&mut tape, &zt);
            let loss = build(&mut tape, &a, &b, &labels);
            let grads = tape.backward(loss).unwrap();
            let teacher_grad = grads.get(b.var()).unwrap();
            prop_assert!(
                teacher_grad.iter().all(|g| *g == 0.0),
                "{name} leaked gradient into the teacher"
            );
            prop_assert!(grads.get(a.var()).is_some());
        }
    }
}

#[test]
fn class_loss_rejects_single_instance_batches() {
    // The batch wrapper already refuses B = 1.
    let mut tape = Tape::new();
    let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert!(LogitBatch::from_tensor(&mut tape, &t).is_err());
}

#[test]
fn correlation_quantities_match_triple_loop_oracle() {
    // Oracle: per-class means, then the (C-1)-normalized sum of outer
    // products of centered rows, written as bare loops.
    let rows = [
        vec![0.5, -1.0, 2.0],
        vec![1.5, 0.25, -0.75],
        vec![-0.5, 1.0, 0.0],
        vec![2.0, -2.0, 1.0],
    ];
    let (b, c) = (4usize, 3usize);
    let mut means = vec![0.0; c];
    for row in &rows {
        for (j, v) in row.iter().enumerate() {
            means[j] += v / b as f64;
        }
    }
    let mut oracle = vec![0.0; c * c];
    for row in &rows {
        for i in 0..c {
            for j in 0..c {
                oracle[i * c + j] += (row[i] - means[i]) * (row[j] - means[j]) / (c - 1) as f64;
            }
        }
    }

    let mut tape = Tape::new();
    let t = Tensor::from_rows(&rows).unwrap();
    let z = LogitBatch::from_tensor(&mut tape, &t).unwrap();
    let corr = losses::class_correlation(&mut tape, &z).unwrap();
    for (got, want) in tape.value(corr.values).iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-12);
    }
}
