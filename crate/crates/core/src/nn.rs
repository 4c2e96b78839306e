//! Neural layers composed from tape operations.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`] handles.
//! A forward pass binds the store onto a fresh [`Tape`] and layers look up
//! their variables through the resulting [`Bound`] table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{counter_seed, rng_from, truncated_normal};
use crate::tensor::{Gradients, Result, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf_ref(t)).collect())
    }

    /// Replaces every parameter's grad buffer with the gradients in `grads`.
    /// Parameters the loss does not reach receive zeros.
    pub fn load_grads(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            t.zero_grad();
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Contract("parameter sets differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::shape("copy_values_from", "shape differs"));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Train/eval switch plus the coordinates that key dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            train: true,
            seed,
            step,
        }
    }
}

/// Allocates parameters with the standard initialization and hands out
/// dropout site ids.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    next_site: u64,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init_seed: u64) -> Self {
        Self {
            store,
            rng: rng_from(init_seed),
            next_site: 0,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| truncated_normal(&mut self.rng, INIT_STD)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape and data agree");
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn dropout(&mut self, p: f64) -> Dropout {
        self.next_site += 1;
        Dropout {
            p,
            site: self.next_site,
        }
    }
}

/// Inverted dropout: train-mode Bernoulli mask scaled by `1/(1-p)`,
/// identity in eval mode. Masks are keyed by `(seed, site, step)`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
    site: u64,
}

impl Dropout {
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: ForwardMode) -> Result<Var> {
        if !mode.train || self.p == 0.0 {
            return Ok(x);
        }
        let mut rng = rng_from(counter_seed(mode.seed, self.site, mode.step));
        let keep = 1.0 / (1.0 - self.p);
        let mask = (0..tape.value(x).numel())
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        tape.dropout_with_mask(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: b.normal(&format!("{name}.weight"), &[in_dim, out_dim]),
            bias: b.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`; leading axes are preserved.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(TensorError::shape(
                "linear",
                format!("input {shape:?}, expected last dim {}", self.in_dim),
            ));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let y = tape.matmul(flat, p.var(self.weight))?;
        let y = tape.add(y, p.var(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{name}.gamma"), &[dim]),
            beta: b.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product self-attention without masking.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub embed_dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Output of an attention pass, with the per-head weights `[batch*heads, n, n]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!(
                "embed_dim {embed_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            embed_dim,
            heads,
            q: Linear::new(b, &format!("{name}.q"), embed_dim, embed_dim),
            k: Linear::new(b, &format!("{name}.k"), embed_dim, embed_dim),
            v: Linear::new(b, &format!("{name}.v"), embed_dim, embed_dim),
            out: Linear::new(b, &format!("{name}.out"), embed_dim, embed_dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.embed_dim {
            return Err(TensorError::shape(
                "attention",
                format!("input {shape:?}, expected [batch, ntok, {}]", self.embed_dim),
            ));
        }
        let (batch, n) = (shape[0], shape[1]);
        let (h, hd) = (self.heads, self.head_dim());
        let split = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, p, x)?;
            let y = tape.reshape(y, &[batch, n, h, hd])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[batch * h, n, hd])
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, h, n, hd])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, n, self.embed_dim])?;
        let output = self.out.forward(tape, p, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Pre-norm transformer encoder block:
/// `h = x + drop(attn(LN(x)))`, `out = h + drop(fc2(drop(gelu(fc1(LN(h))))))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub attn_drop: Dropout,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc1_drop: Dropout,
    pub fc2: Linear,
    pub fc2_drop: Dropout,
}

impl EncoderBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        embed_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        drop_rate: f64,
    ) -> Result<Self> {
        let hidden = embed_dim * mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), embed_dim),
            attention: MultiHeadAttention::new(b, &format!("{name}.attn"), embed_dim, heads)?,
            attn_drop: b.dropout(drop_rate),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), embed_dim),
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), embed_dim, hidden),
            fc1_drop: b.dropout(drop_rate),
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), hidden, embed_dim),
            fc2_drop: b.dropout(drop_rate),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: ForwardMode) -> Result<Var> {
        let y = self.norm1.forward(tape, p, x)?;
        let y = self.attention.forward(tape, p, y)?.output;
        let y = self.attn_drop.forward(tape, y, mode)?;
        let h = tape.add(x, y)?;
        let y = self.norm2.forward(tape, p, h)?;
        let y = self.fc1.forward(tape, p, y)?;
        let y = tape.gelu(y);
        let y = self.fc1_drop.forward(tape, y, mode)?;
        let y = self.fc2.forward(tape, p, y)?;
        let y = self.fc2_drop.forward(tape, y, mode)?;
        tape.add(h, y)
    }
}

/// Learned position table; row 0 is the class-token position.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub max_tokens: usize,
}

impl PositionalEmbedding {
    pub fn new(b: &mut Builder, name: &str, max_tokens: usize, embed_dim: usize) -> Self {
        Self {
            table: b.normal(name, &[max_tokens + 1, embed_dim]),
            max_tokens,
        }
    }

    /// Rows `0..count` of the table, shape `[count, embed_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, count: usize) -> Result<Var> {
        if count > self.max_tokens + 1 {
            return Err(TensorError::shape(
                "positional_embedding",
                format!("{count} positions requested, table holds {}", self.max_tokens + 1),
            ));
        }
        let idx: Vec<usize> = (0..count).collect();
        tape.gather_rows(p.var(self.table), &idx)
    }
}
