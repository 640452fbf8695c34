//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its value and the rule needed to
//! push an output gradient back to its inputs. Nodes are appended in creation
//! order, so walking the tape backwards is a valid reverse topological order.

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// Returns one optional gradient per input, each shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Entries at or below this value in an attention mask are treated as masked.
pub const MASKED_THRESHOLD: f64 = -1e20;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAll(Var),
    SumLast(Var),
    LogSumExpLast(Var),
    Reshape(Var),
    Swap12(Var),
    SliceLast { a: Var, start: usize },
    ScaleRows(Var, Var),
    ConcatRows(Vec<Var>),
    UnitLowerT { v: Var, dim: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::MaskedSoftmax(a)
            | Op::SumAll(a)
            | Op::SumLast(a)
            | Op::LogSumExpLast(a)
            | Op::Reshape(a)
            | Op::Swap12(a)
            | Op::SliceLast { a, .. }
            | Op::UnitLowerT { v: a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `small` broadcasts against `big` when it is a single value or its shape is
/// a suffix of `big`'s shape.
fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    small.iter().product::<usize>() == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

/// Sum a gradient shaped like the broadcast output back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, g) in grad.data().iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(shape, out).expect("reduced shape is valid")
}

/// Recording context for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    checked: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that rejects non-finite values and logs of non-positive entries.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` roots with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, DiffError> {
        if self.checked {
            value.check_finite(name)?;
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let out = if sa == sb {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(sa, data)?
        } else if broadcasts_into(sb, sa) {
            let n = bv.numel();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % n]))
                .collect();
            Tensor::new(sa, data)?
        } else if broadcasts_into(sa, sb) {
            let n = av.numel();
            let data = bv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(av.data()[i % n], y))
                .collect();
            Tensor::new(sb, data)?
        } else {
            return Err(DiffError::Shape {
                op: name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.checked {
            if let Some(index) = self.value(a).data().iter().position(|&v| v <= 0.0) {
                return Err(DiffError::Domain {
                    op: "log",
                    message: format!("non-positive entry at index {index}"),
                });
            }
        }
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, false);
        let out = Tensor::new(&[m, n], c)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Batched product: `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || DiffError::Shape {
            op: "batch_matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(err());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(err());
        }
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(&[batch, m, n], c)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b }, "batch_matmul")
    }

    /// Softmax over the last axis of `scores + mask`, `mask` broadcast over
    /// leading axes. Masked positions are exactly zero in the output.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor) -> Result<Var, DiffError> {
        let sv = self.value(scores);
        let n = sv.last_dim();
        if sv.rank() < 2 || mask.rank() != 2 || sv.shape()[sv.rank() - 2..] != *mask.shape() {
            return Err(DiffError::Shape {
                op: "masked_softmax",
                left: sv.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let rows_per_mask = mask.shape()[0];
        let mut out = vec![0.0; sv.numel()];
        for (r, (src, dst)) in sv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let m = mask.row(r % rows_per_mask);
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                if m[c] > MASKED_THRESHOLD {
                    max = max.max(src[c] + m[c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(DiffError::Contract(format!(
                    "masked_softmax: row {} is fully masked",
                    r % rows_per_mask
                )));
            }
            let mut total = 0.0;
            for c in 0..n {
                if m[c] > MASKED_THRESHOLD {
                    let e = (src[c] + m[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(sv.shape(), out)?;
        self.push(out, Op::MaskedSoftmax(scores), "masked_softmax")
    }

    /// Standardize over the last axis (biased variance, `eps` inside the
    /// square root) then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let e = xv.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [e] {
                return Err(DiffError::Shape {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / e;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * e..(r + 1) * e];
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..e {
                let h = (row[c] - mean) * rs;
                xhat[r * e + c] = h;
                out[r * e + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(t: &Tensor) -> Vec<usize> {
        t.shape()[..t.rank().saturating_sub(1)].to_vec()
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let n = av.last_dim();
        let data = av.data().chunks(n).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&Self::reduced_shape(av), data)?;
        self.push(out, Op::SumLast(a), "sum_last")
    }

    /// Max-shifted log-sum-exp over the last axis.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(DiffError::Shape {
                op: "logsumexp",
                left: Vec::new(),
                right: Vec::new(),
            });
        }
        let n = av.last_dim();
        let data = av.data().chunks(n).map(logsumexp).collect();
        let out = Tensor::new(&Self::reduced_shape(av), data)?;
        self.push(out, Op::LogSumExpLast(a), "logsumexp")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap12(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() != 4 {
            return Err(DiffError::Shape {
                op: "swap12",
                left: av.shape().to_vec(),
                right: vec![4],
            });
        }
        let out = swap12(av);
        self.push(out, Op::Swap12(a), "swap12")
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        let n = av.last_dim();
        if start >= end || end > n {
            return Err(DiffError::Shape {
                op: "slice_last",
                left: av.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let data = av.data().chunks(n).flat_map(|c| c[start..end].iter().copied()).collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank checked") = end - start;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::SliceLast { a, start }, "slice_last")
    }

    /// Multiply each row (last-axis slice) of `a` by the matching entry of `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let (av, sv) = (self.value(a), self.value(s));
        let n = av.last_dim();
        if av.rank() < 1 || av.numel() / n != sv.numel() {
            return Err(DiffError::Shape {
                op: "scale_rows",
                left: av.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .chunks(n)
            .zip(sv.data())
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(out, Op::ScaleRows(a, s), "scale_rows")
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.shape()[1] != cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Transpose of the unit-lower-triangular `dim×dim` matrix whose strictly
    /// lower entries are `v` in row-major order.
    pub fn unit_lower_t(&mut self, v: Var, dim: usize) -> Result<Var, DiffError> {
        let vv = self.value(v);
        if vv.numel() != dim * (dim - 1) / 2 {
            return Err(DiffError::Shape {
                op: "unit_lower_t",
                left: vv.shape().to_vec(),
                right: vec![dim, dim],
            });
        }
        let mut out = Tensor::identity(dim);
        for i in 1..dim {
            for j in 0..i {
                out.data_mut()[j * dim + i] = vv.data()[i * (i - 1) / 2 + j];
            }
        }
        self.push(out, Op::UnitLowerT { v, dim }, "unit_lower_t")
    }

    /// Record a node computed outside the tape with a user-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var, DiffError> {
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    /// Reverse pass from a scalar root. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        if self.value(root).numel() != 1 {
            return Err(DiffError::Contract(format!(
                "backward: root has shape {:?}, expected a scalar",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(x.shape(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to(g, val(*a).shape()));
                send(*b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g, val(*a).shape()));
                send(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let expand = |t: &Tensor| -> Vec<f64> {
                    let n = t.numel();
                    (0..g.numel()).map(|i| t.data()[i % n]).collect()
                };
                let (ae, be) = (expand(av), expand(bv));
                let ga: Vec<f64> = g.data().iter().zip(&be).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(&ae).map(|(x, y)| x * y).collect();
                let full = |d| Tensor::new(g.shape(), d).expect("grad shape");
                send(*a, reduce_to(&full(ga), av.shape()));
                send(*b, reduce_to(&full(gb), bv.shape()));
            }
            Op::Neg(a) => send(*a, g.map(|x| -x)),
            Op::Scale(a, c) => send(*a, g.map(|x| c * x)),
            Op::Tanh(a) => send(*a, zip(out, &|y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, zip(out, &|y, g| g * y * (1.0 - y))),
            Op::Exp(a) => send(*a, zip(out, &|y, g| g * y)),
            Op::Log(a) => send(*a, zip(val(*a), &|x, g| g / x)),
            Op::Softplus(a) => send(*a, zip(val(*a), &|x, g| g * sigmoid(x))),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    send(*a, Tensor::new(av.shape(), ga).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    send(*b, Tensor::new(bv.shape(), gb).expect("shape"));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // c = a bᵀ with b: n×k
                        gemm(m, n, k, gi, false, bi, false, ga_i, false);
                        gemm(n, m, k, gi, true, ai, false, gb_i, false);
                    } else {
                        gemm(m, n, k, gi, false, bi, true, ga_i, false);
                        gemm(k, m, n, ai, true, gi, false, gb_i, false);
                    }
                }
                send(*a, Tensor::new(av.shape(), ga).expect("shape"));
                send(*b, Tensor::new(bv.shape(), gb).expect("shape"));
            }
            Op::MaskedSoftmax(s) => {
                let n = out.last_dim();
                let mut gs = vec![0.0; out.numel()];
                for ((p, gr), dst) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gs.chunks_mut(n)) {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dst[c] = p[c] * (gr[c] - dot);
                    }
                }
                send(*s, Tensor::new(out.shape(), gs).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let e = out.last_dim();
                let gv = val(*gain).data();
                let mut gx = vec![0.0; out.numel()];
                let mut ggain = vec![0.0; e];
                let mut gbias = vec![0.0; e];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * e..(r + 1) * e];
                    let hr = &xhat[r * e..(r + 1) * e];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..e {
                        let d = gr[c] * gv[c];
                        mean_d += d;
                        mean_dh += d * hr[c];
                        ggain[c] += gr[c] * hr[c];
                        gbias[c] += gr[c];
                    }
                    mean_d /= e as f64;
                    mean_dh /= e as f64;
                    for c in 0..e {
                        gx[r * e + c] = rs * (gr[c] * gv[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                send(*x, Tensor::new(out.shape(), gx).expect("shape"));
                send(*gain, Tensor::vector(ggain));
                send(*bias, Tensor::vector(gbias));
            }
            Op::SumAll(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumLast(a) => {
                let av = val(*a);
                let n = av.last_dim();
                let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
                send(*a, Tensor::new(av.shape(), data).expect("shape"));
            }
            Op::LogSumExpLast(a) => {
                let av = val(*a);
                let n = av.last_dim();
                let mut data = Vec::with_capacity(av.numel());
                for ((row, &lse), &gr) in av.data().chunks(n).zip(out.data()).zip(g.data()) {
                    data.extend(row.iter().map(|&v| gr * (v - lse).exp()));
                }
                send(*a, Tensor::new(av.shape(), data).expect("shape"));
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape()).expect("shape")),
            Op::Swap12(a) => send(*a, swap12(g)),
            Op::SliceLast { a, start } => {
                let av = val(*a);
                let n = av.last_dim();
                let w = g.last_dim();
                let mut data = vec![0.0; av.numel()];
                for (dst, src) in data.chunks_mut(n).zip(g.data().chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                send(*a, Tensor::new(av.shape(), data).expect("shape"));
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                let n = av.last_dim();
                let mut ga = vec![0.0; av.numel()];
                let mut gs = vec![0.0; sv.numel()];
                for (r, &k) in sv.data().iter().enumerate() {
                    for c in 0..n {
                        let i = r * n + c;
                        ga[i] = g.data()[i] * k;
                        gs[r] += g.data()[i] * av.data()[i];
                    }
                }
                send(*a, Tensor::new(av.shape(), ga).expect("shape"));
                send(*s, Tensor::new(sv.shape(), gs).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.numel();
                    let data = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    send(p, Tensor::new(pv.shape(), data).expect("shape"));
                }
            }
            Op::UnitLowerT { v, dim } => {
                let d = *dim;
                let mut gv = vec![0.0; val(*v).numel()];
                for i in 1..d {
                    for j in 0..i {
                        gv[i * (i - 1) / 2 + j] = g.data()[j * d + i];
                    }
                }
                send(*v, Tensor::new(val(*v).shape(), gv).expect("shape"));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(&values, out, g)) {
                    if let Some(gi) = gi {
                        send(*v, gi);
                    }
                }
            }
        }
    }
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn swap12(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    Tensor::new(&[a, c, b, d], out).expect("swap shape")
}
