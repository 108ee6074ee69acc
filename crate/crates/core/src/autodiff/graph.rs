//! Tape of primitive ops with exact local gradients.
//!
//! Nodes are appended in evaluation order, so the node index is a valid
//! topological order and backward is a single reverse sweep.

use crate::error::{Result, SerError};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    /// `x·wᵀ + b` without materializing `wᵀ`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    BroadcastScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv1d { .. } => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Build it once per forward pass, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(SerError::NumericOverflow {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> SerError {
        SerError::ShapeMismatch {
            node: self.next_id(),
            op,
            detail,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(op, out, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![n, m], data), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(self.mismatch("transpose", format!("rank-2 expected, got {:?}", self.shape(a))));
        }
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(self.mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a), out, rg)
    }

    /// Scalar `[1]` repeated to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(self.mismatch("broadcast_scalar", format!("scalar expected, got {:?}", self.shape(a))));
        }
        let out = Tensor::filled(shape, self.value(a).item());
        let rg = self.rg(&[a]);
        self.push(Op::BroadcastScalar(a), out, rg)
    }

    /// `[m]` repeated as each row of an `[n×m]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(self.mismatch("broadcast_rows", format!("vector expected, got {:?}", self.shape(a))));
        }
        let m = self.value(a).len();
        let v = self.value(a).data();
        let data = (0..n).flat_map(|_| v.iter().copied()).collect();
        let rg = self.rg(&[a]);
        self.push(Op::BroadcastRows(a), Tensor::from_parts(vec![n, m], data), rg)
    }

    /// `[c]` repeated along time into a `[c×t]` matrix.
    pub fn broadcast_cols(&mut self, a: Var, t: usize) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(self.mismatch("broadcast_cols", format!("vector expected, got {:?}", self.shape(a))));
        }
        let c = self.value(a).len();
        let v = self.value(a).data();
        let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, t)).collect();
        let rg = self.rg(&[a]);
        self.push(Op::BroadcastCols(a), Tensor::from_parts(vec![c, t], data), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it (a rank-1 input yields a scalar `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(self.mismatch("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(&[a]);
        self.push(Op::SumAxis(a, axis), Tensor::from_parts(oshape, out), rg)
    }

    /// Row-wise softmax over the trailing axis (a vector is one row).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(Op::SoftmaxRows(a), out, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(self.mismatch("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(self.mismatch("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = Vec::with_capacity(oshape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec(), axis), Tensor::from_parts(oshape, out), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(self.mismatch(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Op::Slice { x: a, axis, start }, Tensor::from_parts(oshape, out), rg)
    }

    /// Dilated 1-D convolution over `x: [c_in×t]` with `w: [c_out×c_in×k]`,
    /// odd `k`, symmetric zero padding so the time length is preserved.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sw[2] % 2 == 0 || dilation == 0 {
            return Err(self.mismatch("conv1d", format!("input {sx:?}, weight {sw:?}, dilation {dilation}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(self.mismatch("conv1d", format!("bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let (cin, t) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = dilation * (k - 1) / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; cout * t];
        for o in 0..cout {
            let orow = &mut out[o * t..(o + 1) * t];
            if let Some(b) = b {
                orow.fill(self.nodes[b.0].value.data()[o]);
            }
            for i in 0..cin {
                let xrow = &xd[i * t..(i + 1) * t];
                for kk in 0..k {
                    let wv = wd[(o * cin + i) * k + kk];
                    let shift = (kk * dilation) as isize - pad as isize;
                    let (lo, hi) = valid_range(t, shift);
                    if lo == hi {
                        continue;
                    }
                    let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (o, &xv) in orow[lo..hi].iter_mut().zip(src) {
                        *o += wv * xv;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(
            Op::Conv1d { x, w, b, dilation },
            Tensor::from_parts(vec![cout, t], out),
            rg,
        )
    }

    /// GroupNorm over `x: [c×t]`: statistics per group of `c / groups`
    /// channels across all time steps, biased variance, `eps` inside the root.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(self.mismatch("group_norm", format!("rank-2 input expected, got {sx:?}")));
        }
        let (c, t) = (sx[0], sx[1]);
        if groups == 0 || c % groups != 0 {
            return Err(SerError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if eps <= 0.0 {
            return Err(SerError::Config(format!("group_norm: eps must be > 0, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(self.mismatch(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let per = c / groups * t;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; c * t];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; c * t];
        for g in 0..groups {
            let span = g * per..(g + 1) * per;
            let chunk = &xd[span.clone()];
            let mu = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[g] = inv;
            for idx in span {
                let ch = idx / t;
                let h = (xd[idx] - mu) * inv;
                xhat[idx] = h;
                out[idx] = gd[ch] * h + bd[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            Tensor::from_parts(sx, out),
            rg,
        )
    }

    /// LayerNorm over each row of `x: [n×d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(self.mismatch(
                "layer_norm",
                format!("input {sx:?}, affine {:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (n, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::from_parts(sx, out),
            rg,
        )
    }

    // ---- composites -------------------------------------------------------

    /// `x · wᵀ + b` for `x: [n×in]`, `w: [out×in]`, `b: [out]`.
    /// `x: [n×k]`, `w: [m×k]`, `b: [m]` → `[n×m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(self.mismatch("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let (n, k, m) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(self.mismatch("linear", format!("bias {:?} for {m} outputs", self.shape(b))));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = Vec::with_capacity(n * m);
        for xrow in xd.chunks_exact(k) {
            for (o, wrow) in wd.chunks_exact(k).enumerate() {
                let dot: f64 = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out.push(dot + b.map_or(0.0, |b| self.nodes[b.0].value.data()[o]));
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Op::Linear { x, w, b }, Tensor::from_parts(vec![n, m], out), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a - mean(a)` over all elements.
    pub fn center(&mut self, a: Var) -> Result<Var> {
        let m = self.mean(a)?;
        let shape = self.shape(a).to_vec();
        let mb = self.broadcast_scalar(m, &shape)?;
        self.sub(a, mb)
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let c = self.center(a)?;
        let sq = self.square(c)?;
        self.mean(sq)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `out` with respect to every node that requires them.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(SerError::ShapeMismatch {
                node: out.0,
                op: "backward",
                detail: format!("scalar output required, got {:?}", self.shape(out)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SerError::NumericOverflow {
                    node: id,
                    op: node.op.name(),
                });
            }
            self.local_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn local_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(da) = self.acc(grads, v) {
                        da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / vb[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] -= g[i] * y[i] / vb[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += k * gi);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * vb[p * m + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    for i in 0..n {
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (k, m) = (self.shape(*x)[1], self.shape(*w)[0]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = self.acc(grads, *x) {
                    for (dxrow, grow) in dx.chunks_exact_mut(k).zip(g.chunks_exact(m)) {
                        for (&gv, wrow) in grow.iter().zip(wd.chunks_exact(k)) {
                            dxrow.iter_mut().zip(wrow).for_each(|(d, &wv)| *d += gv * wv);
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for (xrow, grow) in xd.chunks_exact(k).zip(g.chunks_exact(m)) {
                        for (&gv, dwrow) in grow.iter().zip(dw.chunks_exact_mut(k)) {
                            dwrow.iter_mut().zip(xrow).for_each(|(d, &xv)| *d += gv * xv);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for grow in g.chunks_exact(m) {
                            db.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::BroadcastScalar(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da[0] += g.iter().sum::<f64>();
                }
            }
            Op::BroadcastRows(a) => {
                let m = self.value(*a).len();
                if let Some(da) = self.acc(grads, *a) {
                    for row in g.chunks(m) {
                        da.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::BroadcastCols(a) => {
                let t = node.value.shape()[1];
                if let Some(da) = self.acc(grads, *a) {
                    for (d, row) in da.iter_mut().zip(g.chunks(t)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                if let Some(da) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let xi = x[i];
                        let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        let d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / x[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(da) = self.acc(grads, *a) {
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            da[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(dp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                dp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        for i in 0..len * inner {
                            dx[base + i] += g[o * len * inner + i];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (cin, t) = (sx[0], sx[1]);
                let (cout, k) = (sw[0], sw[2]);
                let pad = dilation * (k - 1) / 2;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..cout {
                        let grow = &g[o * t..(o + 1) * t];
                        for i in 0..cin {
                            for kk in 0..k {
                                let wv = wd[(o * cin + i) * k + kk];
                                let shift = (kk * dilation) as isize - pad as isize;
                                let (lo, hi) = valid_range(t, shift);
                                for tt in lo..hi {
                                    dx[i * t + (tt as isize + shift) as usize] += wv * grow[tt];
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for o in 0..cout {
                        let grow = &g[o * t..(o + 1) * t];
                        for i in 0..cin {
                            let xrow = &xd[i * t..(i + 1) * t];
                            for kk in 0..k {
                                let shift = (kk * dilation) as isize - pad as isize;
                                let (lo, hi) = valid_range(t, shift);
                                let mut s = 0.0;
                                for tt in lo..hi {
                                    s += xrow[(tt as isize + shift) as usize] * grow[tt];
                                }
                                dw[(o * cin + i) * k + kk] += s;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for o in 0..cout {
                            db[o] += g[o * t..(o + 1) * t].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (c, t) = (node.value.shape()[0], node.value.shape()[1]);
                let gd = self.value(*gamma).data();
                if let Some(dgamma) = self.acc(grads, *gamma) {
                    for ch in 0..c {
                        for tt in 0..t {
                            dgamma[ch] += g[ch * t + tt] * xhat[ch * t + tt];
                        }
                    }
                }
                if let Some(dbeta) = self.acc(grads, *beta) {
                    for ch in 0..c {
                        dbeta[ch] += g[ch * t..(ch + 1) * t].iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let per = c / groups * t;
                    for grp in 0..*groups {
                        let span = grp * per..(grp + 1) * per;
                        let dxhat: Vec<f64> = span.clone().map(|i| g[i] * gd[i / t]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        let inv = inv_std[grp];
                        let n = per as f64;
                        for (j, i) in span.enumerate() {
                            dx[i] += inv / n * (n * dxhat[j] - s1 - xhat[i] * s2);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gd = self.value(*gamma).data();
                if let Some(dgamma) = self.acc(grads, *gamma) {
                    for i in 0..rows * d {
                        dgamma[i % d] += g[i] * xhat[i];
                    }
                }
                if let Some(dbeta) = self.acc(grads, *beta) {
                    for i in 0..rows * d {
                        dbeta[i % d] += g[i];
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = d as f64;
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = span.clone().map(|i| g[i] * gd[i % d]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for (j, i) in span.enumerate() {
                            dx[i] += inv_std[r] / n * (n * dxhat[j] - s1 - xhat[i] * s2);
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `tt` in `[lo, hi)` whose source `tt + shift` lies inside `[0, t)`.
fn valid_range(t: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient buffer for `v`, or `None` when `v` does not require grad
    /// or does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.wrt(v)
            .map(|g| Tensor::from_parts(graph.shape(v).to_vec(), g.to_vec()))
    }
}
