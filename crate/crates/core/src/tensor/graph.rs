use rand::Rng;

use super::kernels::{gemm, matmul, softmax_strided, MatView};
use super::optim::{ParamId, ParamSet};
use super::{numel, Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a `[batch·seq × heads·head_dim]` activation is split for attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Multiplier applied to `q·k` before gating.
    pub scale: f64,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Softmax { x: Var, axis: usize },
    LogSumExp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    ScaleRows(Var, Var),
    Dropout { x: Var, mask: Vec<T> },
    ExpandGates { gates: Var, map: Vec<Option<usize>> },
    GatedAttention {
        q: Var,
        k: Var,
        v: Var,
        gates: Var,
        layout: AttnLayout,
        logits: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic tape of the operations of one forward pass.
///
/// Nodes are appended in execution order, so the node index is a valid
/// topological order and backward simply walks the tape in reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, shape, op, requires_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("leaf", t.values().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        if numel(&shape) != values.len() || shape.contains(&0) {
            return Err(TensorError::shape("constant", format!("shape {shape:?} with {} values", values.len())));
        }
        self.push("constant", values, shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.constant(vec![1], vec![v])
    }

    /// Copies a parameter into the graph; its gradient flows back through
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Result<Var> {
        let t = params.tensor(id);
        self.push("param", t.values().to_vec(), t.shape().to_vec(), Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let id = params
            .id(name)
            .ok_or_else(|| TensorError::contract("param", format!("unknown parameter `{name}`")))?;
        self.param(params, id)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shapes are valid");
        if let Some(g) = &self.leaf_grads[v.0] {
            t.grad_mut().copy_from_slice(g);
        }
        t.with_requires_grad(n.requires_grad)
    }

    /// Accumulated gradient of a leaf or parameter node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Attention weights `[batch, heads, seq, seq]` of a gated attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::GatedAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul(m, k, n, self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, vec![m, n], Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", out, vec![c, r], Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", value, shape, Op::Reshape(x), rg)
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, value, shape, op, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(name, value, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., n] + bias[n]`, the bias repeated over every leading row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != n {
            return Err(TensorError::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).to_vec();
        let value = self.value(x).chunks(n).flat_map(|row| row.iter().zip(&b).map(|(&v, &c)| v + c)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", value, shape, Op::AddBias(x, bias), rg)
    }

    /// `a·x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let (ta, tb) = (T::of(a), T::of(b));
        self.unary("affine", x, |v| ta * v + tb, Op::Affine(x, ta))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.affine(x, a, 0.0)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let rg = self.rg(&[x, s]);
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", value, shape, Op::MulScalar(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v <= T::zero()) {
            return Err(TensorError::Domain { op: "log", detail: format!("non-positive input {bad:?}") });
        }
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v < T::zero()) {
            return Err(TensorError::Domain { op: "sqrt", detail: format!("negative input {bad:?}") });
        }
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| T::of(gelu(v.as_f64()).0), Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Elementwise clamp; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::contract("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary("clamp", x, |v| v.max(l).min(h), Op::Clamp(x, l, h))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::contract("dropout", format!("rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("dropout", value, shape, Op::Dropout { x, mask }, rg)
    }

    // ---- reductions and normalizations --------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![T::of(s)], vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push("mean", vec![T::of(s / n)], vec![1], Op::Mean(x), rg)
    }

    /// Euclidean norm of all elements; the gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.as_f64().powi(2)).sum();
        let rg = self.rg(&[x]);
        self.push("l2_norm", vec![T::of(s.sqrt())], vec![1], Op::L2Norm(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                softmax_strided(xv, &mut out, o * len * inner + i, len, inner);
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", out, shape, Op::Softmax { x, axis }, rg)
    }

    /// `log Σ exp` over the last axis; output drops that axis.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .map(|row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
                let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
                T::of(m + s.ln())
            })
            .collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(&[x]);
        self.push("log_sum_exp", out, out_shape, Op::LogSumExp(x), rg)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(TensorError::shape(
                "layer_norm",
                format!("row width {d} vs gain {:?} / bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        if d == 1 && eps == 0.0 {
            return Err(TensorError::Domain { op: "layer_norm", detail: "width 1 with eps 0 divides by zero".into() });
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let xv = self.value(x);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[r] = T::of(rs);
            for j in 0..d {
                xhat[r * d + j] = T::of((row[j].as_f64() - mean) * rs);
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let out = xhat.iter().enumerate().map(|(i, &h)| h * gv[i % d] + bv[i % d]).collect();
        let rg = self.rg(&[x, gain, bias]);
        self.push("layer_norm", out, shape, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Scales each row of a `[rows × cols]` tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Degenerate { op: "normalize_rows", detail: "zero vector".into() });
            }
            norms.push(T::of(n));
            out.extend(row.iter().map(|v| T::of(v.as_f64() / n)));
        }
        let rg = self.rg(&[x]);
        self.push("normalize_rows", out, shape, Op::NormalizeRows { x, norms }, rg)
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na != nb {
            return Err(TensorError::shape("cosine", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let ra = self.reshape(a, vec![1, na])?;
        let rb = self.reshape(b, vec![1, nb])?;
        let ua = self.normalize_rows(ra).map_err(|_| degenerate_cosine())?;
        let ub = self.normalize_rows(rb).map_err(|_| degenerate_cosine())?;
        let p = self.mul(ua, ub)?;
        self.sum(p)
    }

    /// Row `r` of `x` multiplied by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if self.value(s).len() != rows {
            return Err(TensorError::shape("scale_rows", format!("{shape:?} rows vs scales {:?}", self.shape(s))));
        }
        let cols = self.value(x).len() / rows;
        let sv = self.value(s).to_vec();
        let out = self.value(x).chunks(cols).zip(&sv).flat_map(|(row, &c)| row.iter().map(move |&v| v * c)).collect();
        let rg = self.rg(&[x, s]);
        self.push("scale_rows", out, shape, Op::ScaleRows(x, s), rg)
    }

    // ---- structural ---------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push("concat", out, shape, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Rows of a 2-D tensor (or elements of a vector) by index, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = if shape.len() >= 2 { numel(&shape[1..]) } else { 1 };
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::shape("gather_rows", format!("rows {rows:?} of {shape:?}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(&[x]);
        self.push("gather_rows", out, out_shape, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Flat elements of `x` by index, arranged into `shape`.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize], shape: Vec<usize>) -> Result<Var> {
        let len = self.value(x).len();
        if numel(&shape) != idx.len() || idx.iter().any(|&i| i >= len) {
            return Err(TensorError::shape("gather_elems", format!("{} indices into {len} for {shape:?}", idx.len())));
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        self.push("gather_elems", out, shape, Op::GatherElems { x, idx: idx.to_vec() }, rg)
    }

    /// Per-token gate vector: token `i` takes `gates[map[i]]`, or 1 when unmapped.
    pub fn expand_gates(&mut self, gates: Var, map: &[Option<usize>]) -> Result<Var> {
        let gv = self.value(gates);
        if map.iter().flatten().any(|&k| k >= gv.len()) {
            return Err(TensorError::shape("expand_gates", format!("gate index out of range for {} gates", gv.len())));
        }
        let out = map.iter().map(|m| m.map_or(T::one(), |k| gv[k])).collect();
        let rg = self.rg(&[gates]);
        self.push("expand_gates", out, vec![map.len()], Op::ExpandGates { gates, map: map.to_vec() }, rg)
    }

    /// Multi-head attention whose logits toward key `j` are multiplied by `gates[j]`.
    ///
    /// `q`, `k`, `v` are `[batch·seq × heads·head_dim]`; `gates` has one entry
    /// per token; `key_mask[j] == false` removes key `j` from every row of its
    /// sequence. Output has the shape of `q`.
    pub fn gated_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        gates: Var,
        key_mask: &[bool],
        layout: AttnLayout,
    ) -> Result<Var> {
        let AttnLayout { batch, seq, heads, scale } = layout;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(TensorError::shape(
                "gated_attention",
                format!("q {:?}, k {:?}, v {:?}", shape, self.shape(k), self.shape(v)),
            ));
        }
        let (n, d) = (shape[0], shape[1]);
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::shape("gated_attention", format!("{shape:?} vs layout {layout:?}")));
        }
        if self.value(gates).len() != n || key_mask.len() != n {
            return Err(TensorError::shape("gated_attention", "gates and key mask need one entry per token"));
        }
        for b in 0..batch {
            if !key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(TensorError::contract("gated_attention", format!("sequence {b} has every key masked")));
            }
        }
        let dh = d / heads;
        let ll = seq * seq;
        let scale_t = T::of(scale);
        let mut logits = vec![T::zero(); batch * heads * ll];
        let mut probs = vec![T::zero(); batch * heads * ll];
        let mut out = vec![T::zero(); n * d];
        let (qv, kv, vv, gv) = (self.value(q), self.value(k), self.value(v), self.value(gates));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * ll;
                let s = &mut logits[p_off..p_off + ll];
                gemm(
                    seq,
                    dh,
                    seq,
                    qv,
                    MatView { offset: off, rs: d as isize, cs: 1 },
                    kv,
                    MatView { offset: off, rs: 1, cs: d as isize },
                    s,
                    MatView::rows(seq),
                    false,
                );
                s.iter_mut().for_each(|x| *x = *x * scale_t);
                let p = &mut probs[p_off..p_off + ll];
                for i in 0..seq {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if key_mask[b * seq + j] {
                            max = max.max((gv[b * seq + j] * s[i * seq + j]).as_f64());
                        }
                    }
                    let mut sum = 0.0f64;
                    for j in 0..seq {
                        let e = if key_mask[b * seq + j] {
                            ((gv[b * seq + j] * s[i * seq + j]).as_f64() - max).exp()
                        } else {
                            0.0
                        };
                        p[i * seq + j] = T::of(e);
                        sum += e;
                    }
                    for j in 0..seq {
                        p[i * seq + j] = T::of(p[i * seq + j].as_f64() / sum);
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    MatView::rows(seq),
                    vv,
                    MatView { offset: off, rs: d as isize, cs: 1 },
                    &mut out,
                    MatView { offset: off, rs: d as isize, cs: 1 },
                    false,
                );
            }
        }
        let rg = self.rg(&[q, k, v, gates]);
        self.push("gated_attention", out, shape, Op::GatedAttention { q, k, v, gates, layout, logits, probs }, rg)
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf reached from `loss`.
    ///
    /// Calling it again (on the same or another scalar) adds to the stored
    /// leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    match &mut self.leaf_grads[i] {
                        Some(g) => g.iter_mut().zip(&gy).for_each(|(a, b)| *a = *a + *b),
                        slot @ None => *slot = Some(gy),
                    }
                    continue;
                }
                op => backward_op(&self.nodes, &mut grads, node, op, &gy),
            }
        }
        if self.leaf_grads.iter().flatten().any(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet<T>) {
        for (node, g) in self.nodes.iter().zip(&self.leaf_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.tensor_mut(*id).grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
            }
        }
    }
}

fn degenerate_cosine() -> TensorError {
    TensorError::Degenerate { op: "cosine", detail: "zero vector".into() }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn acc_map<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl Fn(usize, T) -> T, gy: &[T]) {
    if let Some(g) = acc(grads, nodes, v) {
        for (i, (a, &b)) in g.iter_mut().zip(gy).enumerate() {
            *a = *a + f(i, b);
        }
    }
}

fn backward_op<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, op: &Op<T>, gy: &[T]) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let y = &node.value;
    match op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(m, n, k, gy, MatView::rows(n), val(*b), MatView::transposed(n), ga, MatView::rows(k), true);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm(k, m, n, val(*a), MatView::transposed(k), gy, MatView::rows(n), gb, MatView::rows(n), true);
            }
        }
        Op::Add(a, b) => {
            acc_map(grads, nodes, *a, |_, g| g, gy);
            acc_map(grads, nodes, *b, |_, g| g, gy);
        }
        Op::Sub(a, b) => {
            acc_map(grads, nodes, *a, |_, g| g, gy);
            acc_map(grads, nodes, *b, |_, g| -g, gy);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(grads, nodes, *a, |i, g| g * bv[i], gy);
            acc_map(grads, nodes, *b, |i, g| g * av[i], gy);
        }
        Op::AddBias(x, bias) => {
            acc_map(grads, nodes, *x, |_, g| g, gy);
            let n = val(*bias).len();
            if let Some(gb) = acc(grads, nodes, *bias) {
                let mut sums = vec![0.0f64; n];
                for row in gy.chunks(n) {
                    for (s, g) in sums.iter_mut().zip(row) {
                        *s += g.as_f64();
                    }
                }
                gb.iter_mut().zip(sums).for_each(|(a, s)| *a = *a + T::of(s));
            }
        }
        Op::Affine(x, a) => acc_map(grads, nodes, *x, |_, g| g * *a, gy),
        Op::MulScalar(x, s) => {
            let c = val(*s)[0];
            acc_map(grads, nodes, *x, |_, g| g * c, gy);
            if let Some(gs) = acc(grads, nodes, *s) {
                let d: f64 = gy.iter().zip(val(*x)).map(|(g, v)| g.as_f64() * v.as_f64()).sum();
                gs[0] = gs[0] + T::of(d);
            }
        }
        Op::Sigmoid(x) => acc_map(grads, nodes, *x, |i, g| g * y[i] * (T::one() - y[i]), gy),
        Op::Exp(x) => acc_map(grads, nodes, *x, |i, g| g * y[i], gy),
        Op::Log(x) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i, g| g / xv[i], gy)
        }
        Op::Sqrt(x) => acc_map(grads, nodes, *x, |i, g| g / (T::of(2.0) * y[i]), gy),
        Op::Tanh(x) => acc_map(grads, nodes, *x, |i, g| g * (T::one() - y[i] * y[i]), gy),
        Op::Gelu(x) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i, g| g * T::of(gelu(xv[i].as_f64()).1), gy)
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i, g| if xv[i] > T::zero() { g } else { T::zero() }, gy)
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i, g| if xv[i] > *lo && xv[i] < *hi { g } else { T::zero() }, gy)
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let start = o * len * inner + i;
                        let s: f64 = (0..len).map(|t| (gy[start + t * inner] * y[start + t * inner]).as_f64()).sum();
                        for t in 0..len {
                            let idx = start + t * inner;
                            gx[idx] = gx[idx] + T::of(y[idx].as_f64() * (gy[idx].as_f64() - s));
                        }
                    }
                }
            }
        }
        Op::LogSumExp(x) => {
            let xv = val(*x);
            let n = *nodes[x.0].shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, row) in xv.chunks(n).enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let p = (v.as_f64() - y[r].as_f64()).exp();
                        gx[r * n + j] = gx[r * n + j] + T::of(gy[r].as_f64() * p);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = val(*gain).len();
            let gv = val(*gain);
            if let Some(gg) = acc(grads, nodes, *gain) {
                let mut sums = vec![0.0f64; d];
                for (i, (g, h)) in gy.iter().zip(xhat).enumerate() {
                    sums[i % d] += g.as_f64() * h.as_f64();
                }
                gg.iter_mut().zip(sums).for_each(|(a, s)| *a = *a + T::of(s));
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                let mut sums = vec![0.0f64; d];
                for (i, g) in gy.iter().enumerate() {
                    sums[i % d] += g.as_f64();
                }
                gb.iter_mut().zip(sums).for_each(|(a, s)| *a = *a + T::of(s));
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let rs = rs.as_f64();
                    let base = r * d;
                    let mut mean_d = 0.0f64;
                    let mut mean_dh = 0.0f64;
                    for j in 0..d {
                        let dh = gy[base + j].as_f64() * gv[j].as_f64();
                        mean_d += dh;
                        mean_dh += dh * xhat[base + j].as_f64();
                    }
                    mean_d /= d as f64;
                    mean_dh /= d as f64;
                    for j in 0..d {
                        let dh = gy[base + j].as_f64() * gv[j].as_f64();
                        let v = rs * (dh - mean_d - xhat[base + j].as_f64() * mean_dh);
                        gx[base + j] = gx[base + j] + T::of(v);
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for v in inputs {
                let a = nodes[v.0].shape[*axis];
                let chunk = a * inner;
                if let Some(gx) = acc(grads, nodes, *v) {
                    for o in 0..outer {
                        let src = &gy[o * total * inner + offset..o * total * inner + offset + chunk];
                        gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b);
                    }
                }
                offset += chunk;
            }
        }
        Op::GatherRows { x, rows } => {
            let cols = gy.len() / rows.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    let src = &gy[i * cols..(i + 1) * cols];
                    gx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b);
                }
            }
        }
        Op::GatherElems { x, idx } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (&i, &g) in idx.iter().zip(gy) {
                    gx[i] = gx[i] + g;
                }
            }
        }
        Op::Reshape(x) => acc_map(grads, nodes, *x, |_, g| g, gy),
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + gy[j * r + i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a = *a + gy[0]);
            }
        }
        Op::Mean(x) => {
            let n = T::of(val(*x).len() as f64);
            let g = gy[0] / n;
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a = *a + g);
            }
        }
        Op::L2Norm(x) => {
            let norm = y[0];
            if norm > T::zero() {
                let xv = val(*x);
                let c = gy[0] / norm;
                if let Some(gx) = acc(grads, nodes, *x) {
                    gx.iter_mut().zip(xv).for_each(|(a, v)| *a = *a + c * *v);
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = gy.len() / norms.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, n) in norms.iter().enumerate() {
                    let base = r * d;
                    let gdot: f64 = (0..d).map(|j| (gy[base + j] * y[base + j]).as_f64()).sum();
                    for j in 0..d {
                        let v = (gy[base + j].as_f64() - y[base + j].as_f64() * gdot) / n.as_f64();
                        gx[base + j] = gx[base + j] + T::of(v);
                    }
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let sv = val(*s);
            let cols = gy.len() / sv.len();
            acc_map(grads, nodes, *x, |i, g| g * sv[i / cols], gy);
            let xv = val(*x);
            if let Some(gs) = acc(grads, nodes, *s) {
                for (r, a) in gs.iter_mut().enumerate() {
                    let d: f64 = (0..cols).map(|j| (gy[r * cols + j] * xv[r * cols + j]).as_f64()).sum();
                    *a = *a + T::of(d);
                }
            }
        }
        Op::Dropout { x, mask } => acc_map(grads, nodes, *x, |i, g| g * mask[i], gy),
        Op::ExpandGates { gates, map } => {
            if let Some(gg) = acc(grads, nodes, *gates) {
                for (m, &g) in map.iter().zip(gy) {
                    if let Some(k) = m {
                        gg[*k] = gg[*k] + g;
                    }
                }
            }
        }
        Op::GatedAttention { q, k, v, gates, layout, logits, probs } => {
            attention_backward(nodes, grads, gy, (*q, *k, *v, *gates), *layout, logits, probs);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    gy: &[T],
    (q, k, v, gates): (Var, Var, Var, Var),
    layout: AttnLayout,
    logits: &[T],
    probs: &[T],
) {
    let AttnLayout { batch, seq, heads, scale } = layout;
    let d = nodes[q.0].shape[1];
    let dh = d / heads;
    let ll = seq * seq;
    let gv = &nodes[gates.0].value;
    let mut d_probs = vec![T::zero(); ll];
    let mut d_logits = vec![T::zero(); ll];
    let mut d_gates = vec![0.0f64; batch * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * dh;
            let p_off = (b * heads + h) * ll;
            let p = &probs[p_off..p_off + ll];
            let s = &logits[p_off..p_off + ll];
            let head_view = MatView { offset: off, rs: d as isize, cs: 1 };
            if let Some(gvv) = acc(grads, nodes, v) {
                gemm(seq, seq, dh, p, MatView::transposed(seq), gy, head_view, gvv, head_view, true);
            }
            gemm(
                seq,
                dh,
                seq,
                gy,
                head_view,
                &nodes[v.0].value,
                MatView { offset: off, rs: 1, cs: d as isize },
                &mut d_probs,
                MatView::rows(seq),
                false,
            );
            for i in 0..seq {
                let row = i * seq;
                let dot: f64 = (0..seq).map(|j| (p[row + j] * d_probs[row + j]).as_f64()).sum();
                for j in 0..seq {
                    let dz = p[row + j].as_f64() * (d_probs[row + j].as_f64() - dot);
                    d_gates[b * seq + j] += dz * s[row + j].as_f64();
                    d_logits[row + j] = T::of(dz * gv[b * seq + j].as_f64() * scale);
                }
            }
            if let Some(gq) = acc(grads, nodes, q) {
                gemm(seq, seq, dh, &d_logits, MatView::rows(seq), &nodes[k.0].value, head_view, gq, head_view, true);
            }
            if let Some(gk) = acc(grads, nodes, k) {
                gemm(
                    seq,
                    seq,
                    dh,
                    &d_logits,
                    MatView::transposed(seq),
                    &nodes[q.0].value,
                    head_view,
                    gk,
                    head_view,
                    true,
                );
            }
        }
    }
    if let Some(gg) = acc(grads, nodes, gates) {
        gg.iter_mut().zip(d_gates).for_each(|(a, s)| *a = *a + T::of(s));
    }
}
