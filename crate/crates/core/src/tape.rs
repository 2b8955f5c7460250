//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends one node holding the forward value plus the
//! references needed by its backward rule. Nodes are recorded in topological
//! order by construction, so one reverse sweep over the tape visits each node
//! exactly once. A tape and the variables minted on it are confined to a
//! single worker; independent tapes may run in parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Gradient sink when `requires_grad` is set on the node.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Row-broadcast add of a length-C vector onto an R x C matrix.
    AddBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    L2NormalizeRows(Var, f64),
    ColumnMeans(Var),
    CrossEntropyMean(Var, Vec<usize>),
    /// Discrete KL between probability rows, with the 0*ln(0) = 0 convention.
    KlDivRows(Var, Var),
    /// Copy of its source that blocks gradient flow; no parent reference is
    /// kept because backward never crosses it.
    Detach,
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
    },
    GlobalAvgPool(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, keyed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a gradient leaf; honors the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Record a constant; never receives gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape values stay finite")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::Rank {
                op,
                expected: rank,
                shape: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[0], s[1])
    }

    // ----- elementwise and scalar ops ---------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("add", self.shape(a).to_vec(), data, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("sub", self.shape(a).to_vec(), data, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("mul", self.shape(a).to_vec(), data, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("scale", self.shape(a).to_vec(), data, rg, Op::Scale(a, c))
    }

    /// `x + b` where `x` is R x C and `b` is length C, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_rank("add_bias", x, 2)?;
        let (rows, cols) = self.dims2(x);
        if self.shape(b) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(x).to_vec();
        let bias = self.value(b);
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias[c];
            }
        }
        let rg = self.needs_grad(&[x, b]);
        self.push_checked("add_bias", vec![rows, cols], data, rg, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("relu", self.shape(a).to_vec(), data, rg, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.abs()).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("abs", self.shape(a).to_vec(), data, rg, Op::Abs(a))
    }

    /// Natural log; defined only for strictly positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let data: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("log", self.shape(a).to_vec(), data, rg, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("exp", self.shape(a).to_vec(), data, rg, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * x).collect();
        let rg = self.needs_grad(&[a]);
        self.push_checked("square", self.shape(a).to_vec(), data, rg, Op::Square(a))
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).iter().sum();
        let rg = self.needs_grad(&[a]);
        self.push_checked("sum", vec![1], vec![total], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let total: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.needs_grad(&[a]);
        self.push_checked("mean", vec![1], vec![total], rg, Op::Mean(a))
    }

    /// Sum of squared entries.
    pub fn frobenius_norm_sq(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.needs_grad(&[a]);
        self.push_checked("frobenius_norm_sq", vec![1], vec![total], rg, Op::FrobeniusSq(a))
    }

    /// Column means of an R x C matrix: output has shape [C].
    pub fn column_means(&mut self, a: Var) -> Result<Var> {
        self.check_rank("column_means", a, 2)?;
        let (rows, cols) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += x[r * cols + c];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked("column_means", vec![cols], out, rg, Op::ColumnMeans(a))
    }

    // ----- matrix ops --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank("matmul", a, 2)?;
        self.check_rank("matmul", b, 2)?;
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let x = self.value(a);
        let y = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += xv * yrow[j];
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("matmul", vec![m, n], out, rg, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_rank("transpose", a, 2)?;
        let (rows, cols) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked("transpose", vec![cols, rows], out, rg, Op::Transpose(a))
    }

    // ----- row-wise normalizations -------------------------------------------

    /// Temperature-scaled softmax per row, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.check_rank("softmax_rows", a, 2)?;
        let (rows, cols) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] / temperature - m).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked(
            "softmax_rows",
            vec![rows, cols],
            out,
            rg,
            Op::SoftmaxRows(a, temperature),
        )
    }

    /// Log of the temperature-scaled row softmax via the log-sum-exp trick;
    /// finite for any finite input, unlike `log(softmax_rows(...))`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.check_rank("log_softmax_rows", a, 2)?;
        let (rows, cols) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let lse = row
                .iter()
                .map(|v| (v / temperature - m).exp())
                .sum::<f64>()
                .ln()
                + m;
            for c in 0..cols {
                out[r * cols + c] = row[c] / temperature - lse;
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked(
            "log_softmax_rows",
            vec![rows, cols],
            out,
            rg,
            Op::LogSoftmaxRows(a, temperature),
        )
    }

    /// Divide each row by max(its L2 norm, epsilon). Rows at or above the
    /// epsilon norm come out unit length; the exact-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, a: Var, epsilon: f64) -> Result<Var> {
        debug_assert!(epsilon > 0.0);
        self.check_rank("l2_normalize_rows", a, 2)?;
        let (rows, cols) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(epsilon);
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked(
            "l2_normalize_rows",
            vec![rows, cols],
            out,
            rg,
            Op::L2NormalizeRows(a, epsilon),
        )
    }

    // ----- fused losses -------------------------------------------------------

    /// Mean over the batch of `logsumexp(z_i) - z_i[label_i]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_rank("cross_entropy_mean", logits, 2)?;
        let (rows, cols) = self.dims2(logits);
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                left: vec![rows, cols],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::IndexError(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[label];
        }
        total /= rows as f64;
        let rg = self.needs_grad(&[logits]);
        self.push_checked(
            "cross_entropy_mean",
            vec![1],
            vec![total],
            rg,
            Op::CrossEntropyMean(logits, labels.to_vec()),
        )
    }

    /// Mean over rows of the discrete KL divergence `sum_c p ln(p/q)` between
    /// probability rows, with `0 * ln(0/q) = 0`. Entries where `p > 0` require
    /// `q > 0`.
    pub fn kl_div_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check_rank("kl_div_rows", p, 2)?;
        self.check_same_shape("kl_div_rows", p, q)?;
        let (rows, cols) = self.dims2(p);
        let pv = self.value(p);
        let qv = self.value(q);
        let mut total = 0.0;
        for i in 0..rows * cols {
            if pv[i] > 0.0 {
                total += pv[i] * (pv[i].ln() - qv[i].ln());
            }
        }
        total /= rows as f64;
        let rg = self.needs_grad(&[p, q]);
        self.push_checked("kl_div_rows", vec![1], vec![total], rg, Op::KlDivRows(p, q))
    }

    // ----- structural ops -------------------------------------------------------

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        self.push(
            self.shape(a).to_vec(),
            self.value(a).to_vec(),
            false,
            Op::Detach,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let rg = self.needs_grad(&[a]);
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// 2-D convolution, stride 1, zero padding. Input is [B, Cin, H, W],
    /// weight [Cout, Cin, K, K], bias [Cout].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        self.check_rank("conv2d", input, 4)?;
        self.check_rank("conv2d", weight, 4)?;
        self.check_rank("conv2d", bias, 1)?;
        let (b, cin, h, w) = {
            let s = self.shape(input);
            (s[0], s[1], s[2], s[3])
        };
        let (cout, cin_w, kh, kw) = {
            let s = self.shape(weight);
            (s[0], s[1], s[2], s[3])
        };
        if cin != cin_w || kh != kw || self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(input).to_vec(),
                right: self.shape(weight).to_vec(),
            });
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidParameter(format!(
                "conv2d kernel {k} larger than padded input {h}x{w}+{padding}"
            )));
        }
        let oh = h + 2 * padding - k + 1;
        let ow = w + 2 * padding - k + 1;
        let x = self.value(input);
        let wt = self.value(weight);
        let bs = self.value(bias);
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bs[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = (oy + ky).wrapping_sub(padding);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox + kx).wrapping_sub(padding);
                                    if ix >= w {
                                        continue;
                                    }
                                    acc += x[((bi * cin + ci) * h + iy) * w + ix]
                                        * wt[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        self.push_checked(
            "conv2d",
            vec![b, cout, oh, ow],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        )
    }

    /// Mean over the spatial dimensions of a [B, C, H, W] tensor, giving [B, C].
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.check_rank("global_avg_pool", a, 4)?;
        let s = self.shape(a);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.value(a);
        let area = (h * w) as f64;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                out[bi * c + ci] = x[base..base + h * w].iter().sum::<f64>() / area;
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked("global_avg_pool", vec![b, c], out, rg, Op::GlobalAvgPool(a))
    }

    // ----- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients come
    /// back keyed by leaf variable, with zero buffers for `requires_grad`
    /// leaves the loss never touched.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        // Untouched trainable leaves still report a (zero) gradient.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn apply_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |dst| add_assign(dst, g, 1.0));
                self.acc_with(grads, *b, |dst| add_assign(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |dst| add_assign(dst, g, 1.0));
                self.acc_with(grads, *b, |dst| add_assign(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * bv[i];
                    }
                });
                self.acc_with(grads, *b, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc_with(grads, *a, |dst| add_assign(dst, g, *c));
            }
            Op::AddBias(x, b) => {
                let cols = self.shape(*b)[0];
                self.acc_with(grads, *x, |dst| add_assign(dst, g, 1.0));
                self.acc_with(grads, *b, |dst| {
                    for (i, gv) in g.iter().enumerate() {
                        dst[i % cols] += gv;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = g . B^T
                self.acc_with(grads, *a, |dst| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            dst[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T . g
                self.acc_with(grads, *b, |dst| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            dst[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (rows, cols) = self.dims2(*a);
                self.acc_with(grads, *a, |dst| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        if av[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * sign(av[i]);
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / av[i];
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.data;
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * out[i];
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::Sum(a) => {
                self.acc_with(grads, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let scale = 1.0 / self.value(*a).len() as f64;
                self.acc_with(grads, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0] * scale;
                    }
                });
            }
            Op::FrobeniusSq(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += 2.0 * av[i] * g[0];
                    }
                });
            }
            Op::SoftmaxRows(a, tau) => {
                let (rows, cols) = self.dims2(*a);
                let y = &node.data;
                self.acc_with(grads, *a, |dst| {
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            dst[base + c] += y[base + c] * (g[base + c] - dot) / tau;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a, tau) => {
                let (rows, cols) = self.dims2(*a);
                let lp = &node.data;
                self.acc_with(grads, *a, |dst| {
                    for r in 0..rows {
                        let base = r * cols;
                        let gsum: f64 = (0..cols).map(|c| g[base + c]).sum();
                        for c in 0..cols {
                            dst[base + c] += (g[base + c] - lp[base + c].exp() * gsum) / tau;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a, epsilon) => {
                let (rows, cols) = self.dims2(*a);
                let x = self.value(*a);
                let y = &node.data;
                self.acc_with(grads, *a, |dst| {
                    for r in 0..rows {
                        let base = r * cols;
                        let norm = x[base..base + cols]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        if norm >= *epsilon {
                            let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                            for c in 0..cols {
                                dst[base + c] += (g[base + c] - y[base + c] * dot) / norm;
                            }
                        } else {
                            // Below the guard the op is a fixed 1/epsilon scaling.
                            for c in 0..cols {
                                dst[base + c] += g[base + c] / epsilon;
                            }
                        }
                    }
                });
            }
            Op::ColumnMeans(a) => {
                let (rows, cols) = self.dims2(*a);
                let scale = 1.0 / rows as f64;
                self.acc_with(grads, *a, |dst| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[r * cols + c] += g[c] * scale;
                        }
                    }
                });
            }
            Op::CrossEntropyMean(logits, labels) => {
                let (rows, cols) = self.dims2(*logits);
                let x = self.value(*logits);
                let scale = g[0] / rows as f64;
                self.acc_with(grads, *logits, |dst| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x[r * cols..(r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for c in 0..cols {
                            let p = (row[c] - m).exp() / denom;
                            let indicator = if c == label { 1.0 } else { 0.0 };
                            dst[r * cols + c] += scale * (p - indicator);
                        }
                    }
                });
            }
            Op::KlDivRows(p, q) => {
                let rows = self.shape(*p)[0];
                let (pv, qv) = (self.value(*p), self.value(*q));
                let scale = g[0] / rows as f64;
                self.acc_with(grads, *p, |dst| {
                    for i in 0..dst.len() {
                        if pv[i] > 0.0 {
                            dst[i] += scale * (pv[i].ln() - qv[i].ln() + 1.0);
                        }
                    }
                });
                self.acc_with(grads, *q, |dst| {
                    for i in 0..dst.len() {
                        if pv[i] > 0.0 {
                            dst[i] -= scale * pv[i] / qv[i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc_with(grads, *a, |dst| add_assign(dst, g, 1.0));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (b, cin, h, w) = {
                    let s = self.shape(*input);
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, _, k, _) = {
                    let s = self.shape(*weight);
                    (s[0], s[1], s[2], s[3])
                };
                let (oh, ow) = {
                    let s = &node.shape;
                    (s[2], s[3])
                };
                let x = self.value(*input);
                let wt = self.value(*weight);
                let pad = *padding;

                self.acc_with(grads, *bias, |dst| {
                    for bi in 0..b {
                        for (co, slot) in dst.iter_mut().enumerate() {
                            let base = (bi * cout + co) * oh * ow;
                            *slot += g[base..base + oh * ow].iter().sum::<f64>();
                        }
                    }
                });
                self.acc_with(grads, *weight, |dst| {
                    for bi in 0..b {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((bi * cout + co) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..k {
                                            let iy = (oy + ky).wrapping_sub(pad);
                                            if iy >= h {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix = (ox + kx).wrapping_sub(pad);
                                                if ix >= w {
                                                    continue;
                                                }
                                                dst[((co * cin + ci) * k + ky) * k + kx] +=
                                                    gv * x[((bi * cin + ci) * h + iy) * w + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc_with(grads, *input, |dst| {
                    for bi in 0..b {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((bi * cout + co) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..k {
                                            let iy = (oy + ky).wrapping_sub(pad);
                                            if iy >= h {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix = (ox + kx).wrapping_sub(pad);
                                                if ix >= w {
                                                    continue;
                                                }
                                                dst[((bi * cin + ci) * h + iy) * w + ix] +=
                                                    gv * wt[((co * cin + ci) * k + ky) * k + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let scale = 1.0 / (h * w) as f64;
                self.acc_with(grads, *a, |dst| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[bi * c + ci] * scale;
                            let base = (bi * c + ci) * h * w;
                            for i in 0..h * w {
                                dst[base + i] += gv;
                            }
                        }
                    }
                });
            }
        }
    }

    /// Run `f` on the gradient buffer of `v`, creating it on demand;
    /// no-op for subgraphs that do not need gradients.
    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

// Subgradient convention: sign(0) = 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
