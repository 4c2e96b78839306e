use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    /// tanh approximation of GELU.
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Relu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Gelu => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Relu => x.max(0.0),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastLeading(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward computation.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaves
/// that require gradients and are reachable from the loss have entries.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `v` (if any) into `target`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn same_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    // Equal shapes, or the smaller shape is a trailing suffix of the larger.
    let (big, small) = if a.ndim() >= b.ndim() { (a, b) } else { (b, a) };
    let suffix = &big.shape()[big.ndim() - small.ndim()..];
    if suffix != small.shape() {
        return Err(TensorError::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(big.shape().to_vec())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `src` (shape `shape`) permuted by `perm` into a new buffer, or the
/// inverse mapping when `inverse` is set.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize], inverse: bool) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let nd = shape.len();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; nd];
    for (flat_out, _) in src.iter().enumerate() {
        // idx is the multi-index in the output layout.
        let mut rem = flat_out;
        for d in 0..nd {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let flat_in: usize = (0..nd).map(|d| idx[d] * in_strides[perm[d]]).sum();
        if inverse {
            out[flat_in] = src[flat_out];
        } else {
            out[flat_out] = src[flat_in];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by {op:?}"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let Tensor { shape, data, .. } = t;
        self.push(shape, data, Op::Leaf, rg)
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf_ref(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_len(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (na, nb) = (da.len(), db.len());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (da[i % na], db[i % nb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum. Either operand may broadcast along leading axes when
    /// its shape is a trailing suffix of the other's.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Unary(kind, a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product over a shared leading axis: `a[g,m,k] · b[g,k,n]`, or
    /// `a[g,m,k] · b[g,n,k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || {
            TensorError::shape(
                "batch_matmul",
                format!("{:?} · {:?} (transpose_b={transpose_b})", ta.shape(), tb.shape()),
            )
        };
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if transpose_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                transpose_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    /// Strided 1-D convolution of each row of `x[batch, length]` with
    /// `kernels[out_ch, ksize]`, producing `[batch, ntok, out_ch]` where
    /// `ntok = (length - ksize) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (tx, tk, tbias) = (self.value(x), self.value(kernels), self.value(bias));
        if tx.ndim() != 2 || tk.ndim() != 2 || tbias.shape() != [tk.shape()[0]] {
            return Err(TensorError::shape(
                "conv1d",
                format!(
                    "x {:?}, kernels {:?}, bias {:?}",
                    tx.shape(),
                    tk.shape(),
                    tbias.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv1d stride must be >= 1".into()));
        }
        let (batch, len) = (tx.shape()[0], tx.shape()[1]);
        let (ch, ksize) = (tk.shape()[0], tk.shape()[1]);
        if len < ksize {
            return Err(TensorError::shape(
                "conv1d",
                format!("input length {len} shorter than kernel size {ksize}"),
            ));
        }
        let ntok = (len - ksize) / stride + 1;
        let patches = im2col(tx.data(), batch, len, ksize, stride, ntok);
        let mut out = vec![0.0; batch * ntok * ch];
        for row in out.chunks_exact_mut(ch) {
            row.copy_from_slice(tbias.data());
        }
        gemm(batch * ntok, ksize, ch, &patches, false, tk.data(), true, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            vec![batch, ntok, ch],
            out,
            Op::Conv1d {
                x,
                kernels,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| {
            TensorError::shape("softmax", "scalar input has no class axis")
        })?;
        if n == 0 {
            return Err(TensorError::shape("softmax", "empty class axis"));
        }
        let mut out = t.data().to_vec();
        out.chunks_exact_mut(n).for_each(softmax_in_place);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learnable `gamma`/`beta`
    /// of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask (entries 0 or `1/(1-p)`). Mask generation
    /// lives with the caller so the randomness stream is explicit.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(TensorError::shape(
                "dropout",
                format!("mask of {} for tensor of {}", mask.len(), t.numel()),
            ));
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Dropout { x, mask }, rg))
    }

    /// Selects rows of a 2-D `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(TensorError::shape("gather_rows", format!("table {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::shape(
                    "gather_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.numel() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let data = permute_data(self.value(x).data(), &shape, perm, false);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(TensorError::shape("transpose", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let data = t.data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Tiles `x` over new leading axes: output shape is `leading ++ x.shape`.
    pub fn broadcast_leading(&mut self, x: Var, leading: &[usize]) -> Var {
        let t = self.value(x);
        let reps: usize = leading.iter().product();
        let mut data = Vec::with_capacity(reps * t.numel());
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(t.shape());
        let rg = self.rg(x);
        self.push(shape, data, Op::BroadcastLeading(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// Mean over one axis, which is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::MeanAxis { x, axis }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// evaluated through log-sum-exp. `logits` is `[n, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Contract(format!(
                "label index {bad} out of range for {c} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, (&l, logit_row)) in probs
            .chunks_exact_mut(c)
            .zip(labels.iter().zip(t.data().chunks_exact(c)))
        {
            let m = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logit_row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - logit_row[l];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (da.len(), db.len());
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % na] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * db[i % nb],
                            BinaryKind::Div => gi / db[i % nb],
                        };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * da[i % na],
                            BinaryKind::Div => -gi * out[i] / db[i % nb],
                        };
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
            Op::Unary(kind, a) => {
                let xin = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kind.derivative(xin[i], out[i]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, gb);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gi, false, bi, !transpose_b, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gi, true, ai, false, 1.0, gbi);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, 1.0, gbi);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernels,
                bias,
                stride,
            } => {
                let (tx, tk) = (self.value(*x), self.value(*kernels));
                let (batch, len) = (tx.shape()[0], tx.shape()[1]);
                let (ch, ksize) = (tk.shape()[0], tk.shape()[1]);
                let ntok = node.value.shape()[1];
                let rows = batch * ntok;
                if let Some(gk) = self.acc(grads, *kernels) {
                    let patches = im2col(tx.data(), batch, len, ksize, *stride, ntok);
                    gemm(ch, rows, ksize, g, true, &patches, false, 1.0, gk);
                }
                if let Some(gbias) = self.acc(grads, *bias) {
                    for row in g.chunks_exact(ch) {
                        gbias.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dpatches = vec![0.0; rows * ksize];
                    gemm(rows, ch, ksize, g, false, tk.data(), false, 0.0, &mut dpatches);
                    for b in 0..batch {
                        for t in 0..ntok {
                            let src = &dpatches[(b * ntok + t) * ksize..(b * ntok + t + 1) * ksize];
                            let dst = &mut gx[b * len + t * stride..b * len + t * stride + ksize];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((y, gy), gx) in out
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let dn = d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs / dn * (dn * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let d = node.value.shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row_len = g.len() / outer;
                for &v in inputs {
                    let chunk = self.value(v).numel() / outer;
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row_len + offset..o * row_len + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Permute { x, perm } => {
                let in_shape = self.shape(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let back = permute_data(g, in_shape, perm, true);
                    gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let full = shape[*axis];
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::BroadcastLeading(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len();
                    for chunk in g.chunks_exact(n) {
                        gx.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                gx[(o * n + k) * inner + j] += g[o * inner + j] / n as f64;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn im2col(x: &[f64], batch: usize, len: usize, ksize: usize, stride: usize, ntok: usize) -> Vec<f64> {
    let mut patches = Vec::with_capacity(batch * ntok * ksize);
    for b in 0..batch {
        for t in 0..ntok {
            let start = b * len + t * stride;
            patches.extend_from_slice(&x[start..start + ksize]);
        }
    }
    patches
}
