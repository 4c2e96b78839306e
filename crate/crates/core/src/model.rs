//! CTTS: strided 1-D convolution tokenizer, class token and learned
//! positions, a stack of pre-norm encoder blocks, and a LayerNorm + linear
//! softmax head over (up, down, flat).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{standardize, Sample, Sign};
use crate::error::{Error, Result};
use crate::eval::{ClassProbs, SignPrediction, SignPredictor};
use crate::kv::KvMap;
use crate::nn::{
    Bound, Builder, Dropout, EncoderBlock, ForwardMode, LayerNorm, Linear, ParamId, ParamStore,
    PositionalEmbedding,
};
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{counter_seed, rng_from, stream_seed};
use crate::tensor::{Tape, Tensor, TensorError, Var};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Final state of the prepended class token.
    ClassToken,
    /// Mean over all encoder output tokens.
    Mean,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_token" => Ok(Pooling::ClassToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::ClassToken => "class_token",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CttsConfig {
    pub input_len: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub drop_rate: f64,
    pub n_classes: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
}

impl Default for CttsConfig {
    fn default() -> Self {
        Self {
            input_len: 80,
            kernel_size: 16,
            stride: 8,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            drop_rate: 0.3,
            n_classes: 3,
            mlp_ratio: 4,
            pooling: Pooling::ClassToken,
        }
    }
}

impl CttsConfig {
    /// Convolution tokens per window: `(input_len − kernel_size) / stride + 1`.
    pub fn num_tokens(&self) -> usize {
        (self.input_len - self.kernel_size) / self.stride + 1
    }

    /// Sequence length seen by the encoder (tokens plus the class token).
    pub fn encoder_len(&self) -> usize {
        self.num_tokens() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stride == 0 || self.kernel_size == 0 {
            return fail("kernel_size and stride must be >= 1".into());
        }
        if self.input_len < self.kernel_size {
            return fail(format!(
                "input_len {} shorter than kernel_size {}",
                self.input_len, self.kernel_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate {} outside [0,1)", self.drop_rate));
        }
        if self.n_classes != 3 {
            return fail("n_classes must be 3 (up, down, flat)".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("input_len", self.input_len);
        kv.set("kernel_size", self.kernel_size);
        kv.set("stride", self.stride);
        kv.set("embed_dim", self.embed_dim);
        kv.set("depth", self.depth);
        kv.set("heads", self.heads);
        kv.set("drop_rate", self.drop_rate);
        kv.set("n_classes", self.n_classes);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("pooling", self.pooling);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            input_len: kv.get_or("input_len", d.input_len)?,
            kernel_size: kv.get_or("kernel_size", d.kernel_size)?,
            stride: kv.get_or("stride", d.stride)?,
            embed_dim: kv.get_or("embed_dim", d.embed_dim)?,
            depth: kv.get_or("depth", d.depth)?,
            heads: kv.get_or("heads", d.heads)?,
            drop_rate: kv.get_or("drop_rate", d.drop_rate)?,
            n_classes: kv.get_or("n_classes", d.n_classes)?,
            mlp_ratio: kv.get_or("mlp_ratio", d.mlp_ratio)?,
            pooling: kv.get_or("pooling", d.pooling)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct CttsModel {
    cfg: CttsConfig,
    store: ParamStore,
    conv_kernels: ParamId,
    conv_bias: ParamId,
    class_token: ParamId,
    pos: PositionalEmbedding,
    token_drop: Dropout,
    blocks: Vec<EncoderBlock>,
    head_norm: LayerNorm,
    head: Linear,
}

impl CttsModel {
    pub fn new(cfg: CttsConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, init_seed);
        let conv_kernels = b.normal("tokenizer.kernels", &[d, cfg.kernel_size]);
        let conv_bias = b.zeros("tokenizer.bias", &[d]);
        let class_token = b.normal("class_token", &[1, d]);
        let pos = PositionalEmbedding::new(&mut b, "pos_embed", cfg.num_tokens(), d);
        let token_drop = b.dropout(cfg.drop_rate);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut b, &format!("blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.drop_rate))
            .collect::<std::result::Result<Vec<_>, TensorError>>()?;
        let head_norm = LayerNorm::new(&mut b, "head.norm", d);
        let head = Linear::new(&mut b, "head.linear", d, cfg.n_classes);
        Ok(Self {
            cfg,
            store,
            conv_kernels,
            conv_bias,
            class_token,
            pos,
            token_drop,
            blocks,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &CttsConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Token sequence entering the first encoder block, `[b, ntok + 1, d]`,
    /// before token dropout.
    pub fn encoder_input(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_len {
            return Err(TensorError::shape(
                "ctts_forward",
                format!("batch {shape:?}, expected [b, {}]", self.cfg.input_len),
            )
            .into());
        }
        let batch = shape[0];
        let tokens = tape.conv1d(x, p.var(self.conv_kernels), p.var(self.conv_bias), self.cfg.stride)?;
        let cls = tape.broadcast_leading(p.var(self.class_token), &[batch]);
        let seq = tape.concat(&[cls, tokens], 1)?;
        let pos = self.pos.forward(tape, p, self.cfg.encoder_len())?;
        Ok(tape.add(seq, pos)?)
    }

    /// Logits `[b, 3]` for a standardized batch `x` of shape `[b, input_len]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, x: Var, mode: ForwardMode) -> Result<Var> {
        let mut h = self.encoder_input(tape, p, x)?;
        h = self.token_drop.forward(tape, h, mode)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, mode)?;
        }
        let h = self.head_norm.forward(tape, p, h)?;
        let pooled = match self.cfg.pooling {
            Pooling::ClassToken => {
                let cls = tape.slice(h, 1, 0, 1)?;
                let b = tape.shape(cls)[0];
                tape.reshape(cls, &[b, self.cfg.embed_dim])?
            }
            Pooling::Mean => tape.mean_axis(h, 1)?,
        };
        Ok(self.head.forward(tape, p, pooled)?)
    }

    /// Class probabilities for a standardized batch `[b, input_len]`.
    pub fn forward(&self, batch: &Tensor, mode: ForwardMode) -> Result<Vec<ClassProbs>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let logits = self.logits(&mut tape, &p, x, mode)?;
        let probs = tape.softmax(logits)?;
        tape.value(probs)
            .data()
            .chunks_exact(3)
            .map(|r| ClassProbs::new(r[0], r[1], r[2]))
            .collect()
    }

    /// Eval-mode probabilities for already standardized windows.
    pub fn predict(&self, windows: &[Vec<f64>]) -> Result<Vec<ClassProbs>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            let batch = batch_tensor(chunk, self.cfg.input_len)?;
            out.extend(self.forward(&batch, ForwardMode::eval())?);
        }
        Ok(out)
    }

    /// Eval-mode probabilities for raw price windows; scaling is applied here.
    pub fn predict_raw(&self, windows: &[Vec<f64>]) -> Result<Vec<ClassProbs>> {
        let std: Vec<Vec<f64>> = windows.iter().map(|w| standardize(w)).collect();
        self.predict(&std)
    }

    /// Mean cross-entropy of the batch; leaves gradients in the parameter
    /// grad buffers.
    pub fn loss_and_grads(&mut self, batch: &Tensor, labels: &[usize], mode: ForwardMode) -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let logits = self.logits(&mut tape, &p, x, mode)?;
        let predicted = tape
            .value(logits)
            .data()
            .chunks_exact(3)
            .map(argmax_index)
            .collect();
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        self.store.load_grads(&grads, &p)?;
        Ok((tape.value(loss).data()[0], predicted))
    }

    pub fn to_checkpoint(&self, mut meta: KvMap) -> Checkpoint {
        meta.set("model", "ctts");
        meta.merge(&self.cfg.to_kv());
        Checkpoint::from_store(meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta.get_str("model") {
            Some("ctts") => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "expected a ctts checkpoint, found model {other:?}"
                )))
            }
        }
        let mut model = Self::new(CttsConfig::from_kv(&ck.meta)?, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }
}

/// Index of the largest score; earlier classes win ties (up, down, flat).
fn argmax_index(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub fn batch_tensor(windows: &[Vec<f64>], input_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * input_len);
    for w in windows {
        if w.len() != input_len {
            return Err(TensorError::shape(
                "ctts_forward",
                format!("window of length {}, expected {input_len}", w.len()),
            )
            .into());
        }
        data.extend_from_slice(w);
    }
    Ok(Tensor::new(vec![windows.len(), input_len], data)?)
}

/// Mean `−ln p[label]` over a batch of probability vectors.
pub fn cross_entropy(probs: &[ClassProbs], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let sign = Sign::from_index(l).ok_or_else(|| Error::Contract(format!("invalid label index {l}")))?;
        total -= p.get(sign).ln();
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Epoch number of the first epoch run (non-zero when resuming).
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            optimizer: AdamConfig {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            seed: 0,
            start_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={} train_acc={} val_loss={} val_acc={}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Eval-mode mean cross-entropy and accuracy over a sample set.
pub fn evaluate_loss(model: &CttsModel, samples: &[Sample]) -> Result<(f64, f64)> {
    let windows: Vec<Vec<f64>> = samples.iter().map(|s| s.standardized.clone()).collect();
    let probs = model.predict(&windows)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    let loss = cross_entropy(&probs, &labels)?;
    let acc = probs
        .iter()
        .zip(samples)
        .filter(|(p, s)| p.argmax() == s.label)
        .count() as f64
        / samples.len() as f64;
    Ok((loss, acc))
}

/// Mini-batch AdamW training with a fixed learning rate. Batches are
/// reshuffled every epoch from the run seed; the last partial batch is kept.
/// On return the model holds the parameters of the epoch with the lowest
/// validation loss. Each finished epoch is written to `log` and handed to
/// `on_epoch`.
pub fn train(
    model: &mut CttsModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer);
    let shuffle_seed = stream_seed(cfg.seed, "shuffle");
    let dropout_seed = stream_seed(cfg.seed, "dropout");
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for e in 0..cfg.epochs {
        let epoch = cfg.start_epoch + e + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(counter_seed(shuffle_seed, epoch as u64, 0)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let windows: Vec<Vec<f64>> = idx.iter().map(|&i| train_set[i].standardized.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label.index()).collect();
            let batch = batch_tensor(&windows, model.cfg.input_len)?;
            let mode = ForwardMode::train(dropout_seed, (epoch as u64) << 32 | step);
            let (loss, predicted) = model.loss_and_grads(&batch, &labels, mode)?;
            opt.step(model.store.tensors_mut())?;
            loss_sum += loss * idx.len() as f64;
            correct += predicted.iter().zip(&labels).filter(|(a, b)| a == b).count();
            step += 1;
        }
        let (val_loss, val_acc) = evaluate_loss(model, val_set)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", rec.log_line())?;
        }
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.store.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_val_loss) = match best {
        Some((epoch, loss, store)) => {
            model.store.copy_values_from(&store)?;
            (epoch, loss)
        }
        None => (cfg.start_epoch, f64::NAN),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
    })
}

impl SignPredictor for CttsModel {
    fn name(&self) -> String {
        "CTTS".into()
    }

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>> {
        let windows: Vec<Vec<f64>> = samples.iter().map(|s| s.standardized.clone()).collect();
        Ok(self.predict(&windows)?.into_iter().map(SignPrediction::from_probs).collect())
    }
}
