use super::kernels::{axpy, dot, matmul_nn, matmul_nt_acc, matmul_tn_acc, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Outer(Var, Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean { input: Var, axis: usize },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SelectRows { mask: Vec<bool>, on_true: Var, on_false: Var },
    SoftmaxCrossEntropy { logits: Var, classes: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Outer(..) => "outer",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectRows { .. } => "select_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse { .. } => "mse",
        }
    }
}

/// Pointwise binary op selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Mul,
    Add,
    Sub,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One define-by-run computation graph. Build it forward, call
/// [`Graph::backward`] once on a scalar, then read gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
    record_kinks: bool,
    kinks: Vec<usize>,
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Lazily allocated gradient buffer of `v`, or `None` if `v` is constant.
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail at the first op whose output contains NaN or Inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Record the branch taken by every non-differentiable op (max-pool
    /// argmax, relu sign). Used by [`super::grad_check`] to spot kinks.
    pub fn with_kink_recording(mut self, on: bool) -> Self {
        self.record_kinks = on;
        self
    }

    pub(crate) fn kink_pattern(&self) -> &[usize] {
        &self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
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

    /// Gradient of the last `backward` target with respect to `v`. `None`
    /// if `v` does not require a gradient or is not upstream of the target;
    /// use [`Graph::grad_or_zeros`] when a dense buffer is wanted.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::Rank {
                op,
                expected: rank,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `[M×K] · [K×N] -> [M×N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Affine map `x · wᵀ + b` with `w: [out×in]`, `b: [out]`. `x` is either
    /// a vector `[in]` or a batch `[rows×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.expect_rank("linear", w, 2)?;
        let (out_dim, in_dim) = (self.shape(w)[0], self.shape(w)[1]);
        let xs = self.shape(x).to_vec();
        let rows = match xs.as_slice() {
            [d] if *d == in_dim => 1,
            [r, d] if *d == in_dim => *r,
            _ => return Err(Error::shape("linear", &xs, self.shape(w))),
        };
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
            }
        }
        matmul_nt_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            in_dim,
            out_dim,
        );
        let shape = if xs.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Outer product. Vectors `[D]⊗[D'] -> [D×D']`; batches of vectors
    /// `[B×D]⊗[B×D'] -> [B×D×D']` row by row.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, da, db, shape) = match (sa.as_slice(), sb.as_slice()) {
            ([da], [db]) => (1, *da, *db, vec![*da, *db]),
            ([ba, da], [bb, db]) if ba == bb => (*ba, *da, *db, vec![*ba, *da, *db]),
            ([_, _], [_, _]) => return Err(Error::shape("outer", &sa, &sb)),
            _ => {
                let bad = if sa.len() > 2 { &sa } else { &sb };
                return Err(Error::Rank {
                    op: "outer",
                    expected: 1,
                    shape: bad.clone(),
                });
            }
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * da * db];
        for n in 0..batch {
            let (ra, rb) = (&va[n * da..(n + 1) * da], &vb[n * db..(n + 1) * db]);
            let block = &mut out[n * da * db..(n + 1) * da * db];
            for i in 0..da {
                for j in 0..db {
                    block[i * db + j] = ra[i] * rb[j];
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Outer(a, b), &[a, b])
    }

    /// 2×2 max pooling with stride 2 over the last two axes of a `[H×W]` or
    /// `[B×H×W]` tensor. Ties go to the lowest flat index in each window.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, h, w) = match s.as_slice() {
            [h, w] => (1, *h, *w),
            [b, h, w] => (*b, *h, *w),
            _ => {
                return Err(Error::Rank {
                    op: "maxpool2d",
                    expected: 2,
                    shape: s,
                })
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "maxpool2d",
                msg: format!("extents must be even, got {s:?}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(batch * oh * ow);
        let mut argmax = Vec::with_capacity(batch * oh * ow);
        for n in 0..batch {
            let base = n * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    // Row-major scan: strict `>` keeps the first maximum.
                    let r0 = base + 2 * i * w + 2 * j;
                    let mut best = r0;
                    for idx in [r0 + 1, r0 + w, r0 + w + 1] {
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        if self.record_kinks {
            self.kinks.extend_from_slice(&argmax);
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.push(
            Tensor::from_parts(shape, out),
            Op::MaxPool2d { input: x, argmax },
            &[x],
        )
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Mul => self.mul(a, b),
            Elementwise::Add => self.add(a, b),
            Elementwise::Sub => self.sub(a, b),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.expect_same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(x, Op::Affine { input: x, scale }, |e| scale * e + shift)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if self.record_kinks {
            let signs: Vec<usize> = self
                .value(x)
                .data()
                .iter()
                .map(|&e| usize::from(e > 0.0))
                .collect();
            self.kinks.extend(signs);
        }
        self.map(x, Op::Relu(x), |e| if e > 0.0 { e } else { 0.0 })
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "mean",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v[(o * n + k) * inner..(o * n + k + 1) * inner];
                axpy(1.0, src, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|e| *e *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Mean { input: x, axis },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(x),
            &[x],
        )
    }

    /// Collapse to rank 1.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// Keep the leading (batch) axis and collapse the rest.
    pub fn flatten_batch(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Rank {
                op: "flatten_batch",
                expected: 2,
                shape: Vec::new(),
            });
        }
        let rows = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[rows, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(Error::InvalidArgument {
                    op: "concat",
                    msg: "empty input list".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} out of bounds for {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&v[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    /// Row `r` of the result is row `r` of `on_true` where `mask[r]`, else of
    /// `on_false`. Rows are copied, so held rows stay bit-identical.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        self.expect_rank("select_rows", on_true, 2)?;
        self.expect_same_shape("select_rows", on_true, on_false)?;
        let (rows, cols) = (self.shape(on_true)[0], self.shape(on_true)[1]);
        if mask.len() != rows {
            return Err(Error::shape("select_rows", &[mask.len()], &[rows, cols]));
        }
        let (t, f) = (self.value(on_true).data(), self.value(on_false).data());
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { t } else { f };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::SelectRows {
                mask: mask.to_vec(),
                on_true,
                on_false,
            },
            &[on_true, on_false],
        )
    }

    /// Mean over rows of `-log softmax(logits)[class]`. Logits are `[K]`
    /// (one class id) or `[B×K]` (one id per row).
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, k) = match s.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => {
                return Err(Error::Rank {
                    op: "softmax_cross_entropy",
                    expected: 2,
                    shape: s,
                })
            }
        };
        if classes.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", &s, &[classes.len()]));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: k,
            });
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; rows * k];
        let mut total = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[c];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                classes: classes.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.expect_same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len() as f64;
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, &[pred, target])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Gradients accumulate
    /// additively across fan-out; `grad(loss) == [1.0]` afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("target must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes: &[Node] = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    // gb[k×n] += aᵀ · g
                    matmul_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = nodes[w.0].value.shape();
                let (out_dim, in_dim) = (ws[0], ws[1]);
                let rows = g.len() / out_dim;
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        let dst = &mut gx[r * in_dim..(r + 1) * in_dim];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, &val(*w)[o * in_dim..(o + 1) * in_dim], dst);
                            }
                        }
                    }
                }
                if let Some(gw) = grad_slot(nodes, grads, *w) {
                    matmul_tn_acc(g, val(*x), gw, rows, out_dim, in_dim);
                }
                if let Some(b) = b {
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        for r in 0..rows {
                            axpy(1.0, &g[r * out_dim..(r + 1) * out_dim], gb);
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let (na, nb) = (nodes[a.0].value.numel(), nodes[b.0].value.numel());
                let batch = match nodes[a.0].value.rank() {
                    1 => 1,
                    _ => nodes[a.0].value.shape()[0],
                };
                let (da, db) = (na / batch, nb / batch);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    let vb = val(*b);
                    for n in 0..batch {
                        for i in 0..da {
                            let gi = &g[(n * da + i) * db..(n * da + i + 1) * db];
                            ga[n * da + i] += dot(gi, &vb[n * db..(n + 1) * db]);
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    let va = val(*a);
                    for n in 0..batch {
                        for i in 0..da {
                            let gi = &g[(n * da + i) * db..(n * da + i + 1) * db];
                            axpy(va[n * da + i], gi, &mut gb[n * db..(n + 1) * db]);
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine { input, scale } => {
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    axpy(*scale, g, gi);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { input, axis } => {
                let (outer, n, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let inv = 1.0 / n as f64;
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            let from = (o * n + k) * inner;
                            axpy(inv, src, &mut gi[from..from + inner]);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let ext = nodes[v.0].value.shape()[*axis];
                    let chunk = ext * inner;
                    if let Some(gv) = grad_slot(nodes, grads, *v) {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            axpy(1.0, &g[from..from + chunk], &mut gv[o * chunk..(o + 1) * chunk]);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        axpy(1.0, &g[from..from + len * inner], &mut gi[to..to + len * inner]);
                    }
                }
            }
            Op::SelectRows {
                mask,
                on_true,
                on_false,
            } => {
                let cols = node.value.shape()[1];
                for (src, want) in [(*on_true, true), (*on_false, false)] {
                    if let Some(gs) = grad_slot(nodes, grads, src) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                let rng = r * cols..(r + 1) * cols;
                                axpy(1.0, &g[rng.clone()], &mut gs[rng]);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                classes,
                probs,
            } => {
                let rows = classes.len();
                let k = probs.len() / rows;
                let scale = g[0] / rows as f64;
                if let Some(gl) = grad_slot(nodes, grads, *logits) {
                    for (r, &c) in classes.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * g[0] / p.len() as f64;
                let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
                if let Some(gp) = grad_slot(nodes, grads, *pred) {
                    axpy(scale, &diff, gp);
                }
                if let Some(gt) = grad_slot(nodes, grads, *target) {
                    axpy(-scale, &diff, gt);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.input(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.input(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.input(m(&[&[1.0, 2.0]]));
        let c = g.input(m(&[&[3.0], &[4.0]]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1]);
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn outer_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 0.0]));
        let b = g.input(Tensor::vector(vec![0.0, 1.0]));
        let o = g.outer(a, b).unwrap();
        assert_eq!(g.value(o).data(), &[0.0, 1.0, 0.0, 0.0]);

        let a = g.input(Tensor::vector(vec![2.0, 3.0]));
        let b = g.input(Tensor::vector(vec![4.0]));
        let o = g.outer(a, b).unwrap();
        assert_eq!(g.value(o).shape(), &[2, 1]);
        assert_eq!(g.value(o).data(), &[8.0, 12.0]);
    }

    #[test]
    fn outer_rejects_higher_rank() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 2, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.outer(a, b), Err(Error::Rank { .. })));
        let c = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.outer(c, b), Err(Error::Rank { .. })));
    }

    #[test]
    fn maxpool_single_window_and_tie() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);

        let mut g = Graph::new();
        let x = g.param(m(&[&[5.0, 5.0], &[5.0, 5.0]]));
        let p = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 4]));
        assert!(matches!(g.maxpool2d(x), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z = g.input(Tensor::vector(vec![0.0; 3]));
        let p = g.elementwise(a, z, Elementwise::Mul).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.0]);

        let b = g.input(Tensor::vector(vec![3.0, 4.0]));
        let d = g.elementwise(b, b, Elementwise::Sub).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0]);

        assert!(matches!(
            g.elementwise(a, b, Elementwise::Add),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mse_and_cross_entropy_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let logits = g.input(Tensor::vector(vec![0.3; 4]));
        let ce = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            g.softmax_cross_entropy(logits, &[4]),
            Err(Error::ClassOutOfRange { class: 4, .. })
        ));
    }

    #[test]
    fn concat_preserves_segment_order() {
        let mut g = Graph::new();
        let s = g.input(Tensor::full(&[64], 1.0));
        let i = g.input(Tensor::full(&[16], 2.0));
        let mm = g.input(Tensor::full(&[16], 3.0));
        let f = g.concat(&[s, i, mm], 0).unwrap();
        let v = g.value(f).data();
        assert_eq!(v.len(), 96);
        assert!(v[..64].iter().all(|&e| e == 1.0));
        assert!(v[64..80].iter().all(|&e| e == 2.0));
        assert!(v[80..].iter().all(|&e| e == 3.0));
    }

    #[test]
    fn invalid_axis_is_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.mean(x, 2), Err(Error::InvalidAxis { .. })));
        assert!(matches!(g.concat(&[x], 5), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn mean_along_each_axis() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let r = g.mean(x, 0).unwrap();
        assert_eq!(g.value(r).data(), &[2.5, 3.5, 4.5]);
        let c = g.mean(x, 1).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 5.0]);
    }

    #[test]
    fn loss_grad_is_one_after_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]));
        let y = g.tanh(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        // d(2x²)/dx = 4x
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn finite_checks_name_the_op() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.input(Tensor::vector(vec![1e300]));
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul", .. })));
    }

    #[test]
    fn select_rows_copies_rows() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0, 1.0], &[2.0, 2.0]]));
        let b = g.param(m(&[&[9.0, 9.0], &[8.0, 8.0]]));
        let s = g.select_rows(&[true, false], a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0, 8.0, 8.0]);
        let t = g.sum(s).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::Stream::Test);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let v = g.input(Tensor::matrix(16, 16, x.clone()).unwrap());
            let y = g.maxpool2d(v).unwrap();
            assert_eq!(g.shape(y), &[8, 8]);
            for r in 0..8 {
                for c in 0..8 {
                    let cell = [x[32 * r + 2 * c], x[32 * r + 2 * c + 1], x[32 * r + 16 + 2 * c], x[32 * r + 17 + 2 * c]];
                    let best = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(g.value(y).data()[8 * r + c], best);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn concat_then_slice_round_trips(
            parts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 1..6), 1..5),
        ) {
            let mut g = Graph::new();
            let vars: Vec<Var> = parts.iter().map(|p| g.input(Tensor::vector(p.clone()))).collect();
            let joined = g.concat(&vars, 0).unwrap();
            let mut at = 0;
            for p in &parts {
                let back = g.slice(joined, 0, at, p.len()).unwrap();
                proptest::prop_assert_eq!(g.value(back).data(), p.as_slice());
                at += p.len();
            }
            proptest::prop_assert_eq!(at, g.shape(joined)[0]);
        }

        #[test]
        fn outer_is_a_column_times_a_row(
            a in proptest::collection::vec(-5.0f64..5.0, 1..10),
            b in proptest::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let mut g = Graph::new();
            let (va, vb) = (g.input(Tensor::vector(a.clone())), g.input(Tensor::vector(b.clone())));
            let o = g.outer(va, vb).unwrap();
            let col = g.input(Tensor::matrix(a.len(), 1, a.clone()).unwrap());
            let row = g.input(Tensor::matrix(1, b.len(), b.clone()).unwrap());
            let k = g.matmul(col, row).unwrap();
            proptest::prop_assert_eq!(g.shape(o), g.shape(k));
            proptest::prop_assert_eq!(g.value(o).data(), g.value(k).data());
        }
    }
}
