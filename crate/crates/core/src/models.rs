//! Small differentiable classifiers: an MLP and a compact convolutional net.
//!
//! Parameters are an ordered name -> tensor map so that checkpoints and
//! gradient bookkeeping stay deterministic. A frozen model (teacher) is the
//! same `Parameters` value with `requires_grad` cleared; binding it onto a
//! tape then records constants instead of gradient leaves.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One convolution stage: `out_channels` filters of size `kernel`, stride 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    Mlp { hidden_sizes: Vec<usize> },
    ConvNet { layers: Vec<ConvLayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden_sizes: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp { hidden_sizes },
            input_shape: vec![input_dim],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        match &self.kind {
            ModelKind::Mlp { hidden_sizes } => {
                if hidden_sizes.contains(&0) {
                    return Err(Error::InvalidParameter(
                        "hidden layer sizes must be at least 1".into(),
                    ));
                }
            }
            ModelKind::ConvNet { layers } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidParameter(format!(
                        "convnet needs a [channels, height, width] input shape, got {:?}",
                        self.input_shape
                    )));
                }
                if layers.is_empty() || layers.len() > 4 {
                    return Err(Error::InvalidParameter(
                        "convnet supports 1 to 4 conv layers".into(),
                    ));
                }
                if layers.iter().any(|l| l.out_channels == 0 || l.kernel == 0) {
                    return Err(Error::InvalidParameter(
                        "conv layers need non-zero channels and kernel".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flattened per-sample input size.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Dimension of the penultimate feature tap.
    pub fn penultimate_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Mlp { hidden_sizes } => {
                hidden_sizes.last().copied().unwrap_or(self.input_len())
            }
            ModelKind::ConvNet { layers } => layers.last().map(|l| l.out_channels).unwrap_or(0),
        }
    }

    /// Feature dimension of one tap after flattening/pooling.
    pub fn tap_dim(&self, id: &str) -> Result<usize> {
        if id == "penultimate" {
            return Ok(self.penultimate_dim());
        }
        let layer = |prefix: &str| -> Option<usize> {
            id.strip_prefix(prefix).and_then(|s| s.parse().ok())
        };
        match &self.kind {
            ModelKind::Mlp { hidden_sizes } => layer("h")
                .and_then(|i| hidden_sizes.get(i).copied())
                .ok_or_else(|| Error::InvalidParameter(format!("unknown feature tap {id:?}"))),
            ModelKind::ConvNet { layers } => layer("c")
                .and_then(|i| layers.get(i).map(|l| l.out_channels))
                .ok_or_else(|| Error::InvalidParameter(format!("unknown feature tap {id:?}"))),
        }
    }

    /// Tap identifiers exposed by `forward`, in layer order.
    pub fn tap_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = match &self.kind {
            ModelKind::Mlp { hidden_sizes } => {
                (0..hidden_sizes.len()).map(|i| format!("h{i}")).collect()
            }
            ModelKind::ConvNet { layers } => (0..layers.len()).map(|i| format!("c{i}")).collect(),
        };
        ids.push("penultimate".into());
        ids
    }
}

/// Ordered set of named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Clear `requires_grad` everywhere; the frozen-teacher contract.
    pub fn freeze(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.set_requires_grad(false);
        }
    }

    /// Record every parameter on the tape, honoring each tensor's
    /// `requires_grad` flag.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.entries {
            vars.insert(name.clone(), tape.leaf(tensor));
        }
        BoundParams { vars }
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Parameters::new()
    }
}

/// Tape variables for one binding of a parameter set.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Kaiming-style fan-in scaled normal weights, zero biases, deterministic
/// from the `ModelSpec` seed.
pub fn init(spec: &ModelSpec) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = rng::stream_rng(spec.seed, rng::Stream::ModelInit);
    let mut params = Parameters::new();
    let mut gaussian = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng::normal(&mut rng) * std).collect();
        Tensor::new(shape, data)
            .expect("finite init values")
            .with_requires_grad()
    };
    match &spec.kind {
        ModelKind::Mlp { hidden_sizes } => {
            let mut fan_in = spec.input_len();
            for (i, &size) in hidden_sizes.iter().enumerate() {
                params.insert(format!("fc{i}.weight"), gaussian(vec![fan_in, size], fan_in));
                params.insert(
                    format!("fc{i}.bias"),
                    Tensor::zeros(vec![size]).with_requires_grad(),
                );
                fan_in = size;
            }
            params.insert(
                "head.weight",
                gaussian(vec![fan_in, spec.num_classes], fan_in),
            );
            params.insert(
                "head.bias",
                Tensor::zeros(vec![spec.num_classes]).with_requires_grad(),
            );
        }
        ModelKind::ConvNet { layers } => {
            let mut in_channels = spec.input_shape[0];
            for (i, layer) in layers.iter().enumerate() {
                let fan_in = in_channels * layer.kernel * layer.kernel;
                params.insert(
                    format!("conv{i}.weight"),
                    gaussian(
                        vec![layer.out_channels, in_channels, layer.kernel, layer.kernel],
                        fan_in,
                    ),
                );
                params.insert(
                    format!("conv{i}.bias"),
                    Tensor::zeros(vec![layer.out_channels]).with_requires_grad(),
                );
                in_channels = layer.out_channels;
            }
            params.insert(
                "head.weight",
                gaussian(vec![in_channels, spec.num_classes], in_channels),
            );
            params.insert(
                "head.bias",
                Tensor::zeros(vec![spec.num_classes]).with_requires_grad(),
            );
        }
    }
    Ok(params)
}

/// A captured intermediate activation: `[B, D]` after flattening/pooling.
pub struct FeatureTap {
    pub id: String,
    pub values: Var,
}

/// Logits plus any requested feature taps from one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub taps: Vec<FeatureTap>,
}

impl ForwardPass {
    pub fn tap(&self, id: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|t| t.id == id)
            .map(|t| t.values)
            .ok_or_else(|| Error::InvalidParameter(format!("feature tap {id:?} was not captured")))
    }
}

/// Run the model on a batch. `x` is `[B, ...]` matching the model's
/// input shape; requested taps are captured as `[B, D]` activations (spatial maps
/// are average-pooled). Fully differentiable.
pub fn forward(
    spec: &ModelSpec,
    tape: &mut Tape,
    params: &BoundParams,
    x: Var,
    tap_ids: &[String],
) -> Result<ForwardPass> {
    let known = spec.tap_ids();
    for id in tap_ids {
        if !known.contains(id) {
            return Err(Error::InvalidParameter(format!(
                "unknown feature tap {id:?}, expected one of {known:?}"
            )));
        }
    }
    let xshape = tape.shape(x).to_vec();
    if xshape.len() != spec.input_shape.len() + 1 || xshape[1..] != spec.input_shape[..] {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            left: xshape,
            right: spec.input_shape.clone(),
        });
    }
    let batch = xshape[0];
    let mut taps = Vec::new();
    let capture = |id: String, var: Var, taps: &mut Vec<FeatureTap>| {
        if tap_ids.contains(&id) {
            taps.push(FeatureTap { id, values: var });
        }
    };

    let penultimate;
    match &spec.kind {
        ModelKind::Mlp { hidden_sizes } => {
            let mut h = tape.reshape(x, vec![batch, spec.input_len()])?;
            for i in 0..hidden_sizes.len() {
                let w = params.get(&format!("fc{i}.weight"))?;
                let b = params.get(&format!("fc{i}.bias"))?;
                let lin = tape.matmul(h, w)?;
                let biased = tape.add_bias(lin, b)?;
                h = tape.relu(biased)?;
                capture(format!("h{i}"), h, &mut taps);
            }
            penultimate = h;
        }
        ModelKind::ConvNet { layers } => {
            let mut h = x;
            for (i, layer) in layers.iter().enumerate() {
                let w = params.get(&format!("conv{i}.weight"))?;
                let b = params.get(&format!("conv{i}.bias"))?;
                let conv = tape.conv2d(h, w, b, layer.padding)?;
                h = tape.relu(conv)?;
                if tap_ids.contains(&format!("c{i}")) {
                    let pooled = tape.global_avg_pool(h)?;
                    capture(format!("c{i}"), pooled, &mut taps);
                }
            }
            penultimate = tape.global_avg_pool(h)?;
        }
    }
    capture("penultimate".into(), penultimate, &mut taps);

    let w = params.get("head.weight")?;
    let b = params.get("head.bias")?;
    let lin = tape.matmul(penultimate, w)?;
    let logits = tape.add_bias(lin, b)?;
    Ok(ForwardPass { logits, taps })
}

/// Exact number of scalar parameter entries.
pub fn param_count(params: &Parameters) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec::mlp(2, vec![4], 3, 42)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init(&toy_spec()).unwrap();
        let b = init(&toy_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn biases_start_at_zero() {
        let params = init(&toy_spec()).unwrap();
        for (name, t) in params.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn weight_variance_tracks_fan_in() {
        let spec = ModelSpec::mlp(64, vec![64], 10, 3);
        let params = init(&spec).unwrap();
        let w = params.get("fc0.weight").unwrap();
        assert!(w.len() >= 1000);
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 64.0;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "var {var}, expected around {expected}"
        );
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        // 2 -> 4 -> 3 with biases: 2*4 + 4 + 4*3 + 3 = 27.
        let params = init(&toy_spec()).unwrap();
        assert_eq!(param_count(&params), 27);
        assert_eq!(param_count(&Parameters::new()), 0);
    }

    #[test]
    fn convnet_param_count_matches_hand_count() {
        let spec = ModelSpec {
            kind: ModelKind::ConvNet {
                layers: vec![
                    ConvLayerSpec {
                        out_channels: 4,
                        kernel: 3,
                        padding: 1,
                    },
                    ConvLayerSpec {
                        out_channels: 6,
                        kernel: 3,
                        padding: 1,
                    },
                ],
            },
            input_shape: vec![1, 8, 8],
            num_classes: 5,
            seed: 0,
        };
        let params = init(&spec).unwrap();
        // conv0: 4*1*3*3 + 4 = 40; conv1: 6*4*3*3 + 6 = 222; head: 6*5 + 5 = 35.
        assert_eq!(param_count(&params), 40 + 222 + 35);
    }

    #[test]
    fn identical_inputs_give_identical_logit_rows() {
        let spec = toy_spec();
        let params = init(&spec).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = Tensor::from_rows(&vec![vec![0.3, -0.7]; 3]).unwrap();
        let xv = tape.input(&x);
        let out = forward(&spec, &mut tape, &bound, xv, &[]).unwrap();
        let logits = tape.value(out.logits);
        assert_eq!(&logits[0..3], &logits[3..6]);
        assert_eq!(&logits[0..3], &logits[6..9]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = toy_spec();
        let mut params = init(&spec).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let xv = tape.input(&x);
        let out = forward(&spec, &mut tape, &bound, xv, &[]).unwrap();
        assert!(tape.value(out.logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let spec = toy_spec();
        let params = init(&spec).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let xv = tape.input(&x);
        let err = forward(&spec, &mut tape, &bound, xv, &["h7".into()]);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let spec = toy_spec();
        let params = init(&spec).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = Tensor::from_rows(&vec![vec![0.0, 0.0, 0.0]; 2]).unwrap();
        let xv = tape.input(&x);
        assert!(matches!(
            forward(&spec, &mut tape, &bound, xv, &[]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
