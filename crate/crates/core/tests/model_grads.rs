//! Whole-model gradient checks: cross-entropy through each architecture,
//! differentiated with respect to every parameter tensor, against central
//! finite differences. Plus a small convnet training smoke test with
//! augmentation enabled.

use clkd_core::datasets::{AugmentFlags, Dataset, Split};
use clkd_core::gradcheck::numeric_gradient;
use clkd_core::models::{self, ConvLayerSpec, ModelKind, ModelSpec, Parameters};
use clkd_core::tape::Tape;
use clkd_core::tensor::Tensor;
use clkd_core::trainer::{fit_teacher, OptimConfig, Schedule, TrainRun};
use clkd_core::Result;

fn ce_loss(spec: &ModelSpec, params: &Parameters, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.input(x);
    let pass = models::forward(spec, &mut tape, &bound, xv, &[])?;
    let ce = tape.cross_entropy_mean(pass.logits, labels)?;
    Ok(tape.scalar(ce))
}

/// For every parameter tensor: reverse-mode gradient of the CE loss vs
/// central finite differences, relative error in max norm below 1e-4.
fn check_param_gradients(spec: &ModelSpec, x: &Tensor, labels: &[usize]) {
    let params = models::init(spec).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.input(x);
    let pass = models::forward(spec, &mut tape, &bound, xv, &[]).unwrap();
    let ce = tape.cross_entropy_mean(pass.logits, labels).unwrap();
    let grads = tape.backward(ce).unwrap();

    for (name, tensor) in params.iter() {
        let var = bound.get(name).unwrap();
        let analytic = grads.get(var).unwrap().to_vec();
        let mut eval = |perturbed: &Tensor| -> Result<f64> {
            let mut patched = params.clone();
            for (n, t) in patched.iter_mut() {
                if n == name {
                    *t = perturbed.clone().with_requires_grad();
                }
            }
            ce_loss(spec, &patched, x, labels)
        };
        let numeric = numeric_gradient(&mut eval, tensor, 1e-5).unwrap();
        let max_numeric = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = max_diff / max_numeric.max(1e-8);
        assert!(rel < 1e-4, "{name}: relative error {rel}");
    }
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    let spec = ModelSpec::mlp(3, vec![4, 4], 3, 5);
    let x = Tensor::from_rows(&[
        vec![0.4, -1.2, 0.7],
        vec![1.1, 0.3, -0.5],
        vec![-0.8, 0.9, 0.2],
    ])
    .unwrap();
    check_param_gradients(&spec, &x, &[0, 2, 1]);
}

fn tiny_convnet() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::ConvNet {
            layers: vec![
                ConvLayerSpec {
                    out_channels: 3,
                    kernel: 3,
                    padding: 1,
                },
                ConvLayerSpec {
                    out_channels: 4,
                    kernel: 3,
                    padding: 1,
                },
            ],
        },
        input_shape: vec![1, 6, 6],
        num_classes: 3,
        seed: 5,
    }
}

#[test]
fn convnet_parameter_gradients_match_finite_differences() {
    let spec = tiny_convnet();
    let x = Tensor::new(
        vec![2, 1, 6, 6],
        (0..72).map(|i| ((i * 11 + 3) % 17) as f64 / 8.0 - 1.0).collect(),
    )
    .unwrap();
    check_param_gradients(&spec, &x, &[2, 0]);
}

fn image_dataset(n: usize, seed_shift: usize, split: Split) -> Dataset {
    // Brightness-banded images: class = which third the mean falls in.
    let mut data = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let level = ((i + seed_shift) % 3) as f64;
        labels.push(level as usize);
        for p in 0..36 {
            let texture = (((i + seed_shift) * 7 + p * 13) % 11) as f64 / 30.0;
            data.push(level - 1.0 + texture);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 6, 6], data).unwrap(), labels, 3, split).unwrap()
}

#[test]
fn convnet_trains_with_augmentation() {
    let spec = tiny_convnet();
    let train = image_dataset(48, 0, Split::Train);
    let test = image_dataset(12, 1, Split::Test);
    let optim = OptimConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        nesterov: true,
        weight_decay: 1e-3,
    };
    let schedule = Schedule::Step {
        milestones: vec![],
        factor: 0.1,
    };
    let run = TrainRun {
        model_spec: &spec,
        train: &train,
        test: &test,
        optim: &optim,
        schedule: &schedule,
        epochs: 4,
        batch_size: 8,
        seed: 2,
        topk: 2,
        augment: AugmentFlags {
            horizontal_flip: true,
            pad_crop: true,
        },
        record_timing: false,
    };
    let (params_a, metrics_a) = fit_teacher(&run).unwrap();
    let (params_b, metrics_b) = fit_teacher(&run).unwrap();
    assert_eq!(params_a, params_b);
    assert_eq!(metrics_a, metrics_b);
    assert!(metrics_a.best_top1 > 0.5, "banded images should be learnable");
}
