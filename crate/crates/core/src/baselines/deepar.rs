//! DeepAR-lite: a one-layer GRU over the standardized window with a
//! Gaussian head, trained jointly on all windows by teacher-forced negative
//! log-likelihood of each next step. Prediction draws one-step samples for the
//! 81st price and reports the share of samples landing in each sign class.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{classify_delta, population_std, DEFAULT_FLAT_BAND};
use crate::checkpoint::Checkpoint;
use crate::data::{min_max, Sample, Sign, INPUT_LEN};
use crate::error::{Error, Result};
use crate::eval::{ClassProbs, SignPrediction, SignPredictor};
use crate::kv::KvMap;
use crate::nn::{Bound, Builder, Dropout, ForwardMode, ParamId, ParamStore};
use crate::optim::{Adam, AdamConfig, EarlyStopper, PlateauScheduler};
use crate::rng::{content_seed, counter_seed, rng_from, stream_seed};
use crate::tensor::{Tape, Tensor, UnaryKind, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct DeepArConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Added to the softplus output so the predicted std stays positive.
    pub std_floor: f64,
    pub n_samples: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub seed: u64,
}

impl Default for DeepArConfig {
    fn default() -> Self {
        Self {
            hidden: 40,
            dropout: 0.1,
            std_floor: 1e-3,
            n_samples: 200,
            tau: DEFAULT_FLAT_BAND,
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 300,
            early_stop_patience: 15,
            lr_factor: 0.1,
            lr_patience: 5,
            seed: 0,
        }
    }
}

impl DeepArConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.std_floor.is_nan() || self.std_floor <= 0.0 {
            return bad("std_floor must be > 0");
        }
        if self.n_samples == 0 || self.batch_size == 0 {
            return bad("n_samples and batch_size must be >= 1");
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return bad("tau must be >= 0");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("hidden", self.hidden);
        kv.set("dropout", self.dropout);
        kv.set("std_floor", self.std_floor);
        kv.set("n_samples", self.n_samples);
        kv.set("tau", self.tau);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("max_epochs", self.max_epochs);
        kv.set("early_stop_patience", self.early_stop_patience);
        kv.set("lr_factor", self.lr_factor);
        kv.set("lr_patience", self.lr_patience);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            hidden: kv.get_or("hidden", d.hidden)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            std_floor: kv.get_or("std_floor", d.std_floor)?,
            n_samples: kv.get_or("n_samples", d.n_samples)?,
            tau: kv.get_or("tau", d.tau)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            max_epochs: kv.get_or("max_epochs", d.max_epochs)?,
            early_stop_patience: kv.get_or("early_stop_patience", d.early_stop_patience)?,
            lr_factor: kv.get_or("lr_factor", d.lr_factor)?,
            lr_patience: kv.get_or("lr_patience", d.lr_patience)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepArEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
}

impl DeepArEpoch {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_nll={} val_nll={} lr={}",
            self.epoch, self.train_nll, self.val_nll, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepArOutcome {
    pub history: Vec<DeepArEpoch>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub early_stopped: bool,
}

/// Input sequence and next-step targets of one window, both in the
/// window's min-max coordinates.
fn sequence(s: &Sample) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = min_max(&s.input);
    let range = hi - lo;
    let next = if range > 0.0 { (s.next_price - lo) / range } else { 0.0 };
    let mut targets = s.standardized[1..].to_vec();
    targets.push(next);
    (s.standardized.clone(), targets)
}

/// Lays `rows` (each of length `steps`) out time-major as a `[steps·n, 1]` tensor.
fn time_major(rows: &[&[f64]], steps: usize) -> Tensor {
    let n = rows.len();
    let mut data = vec![0.0; steps * n];
    for (b, row) in rows.iter().enumerate() {
        for t in 0..steps {
            data[t * n + b] = row[t];
        }
    }
    Tensor::new(vec![steps * n, 1], data).expect("sizes agree")
}

#[derive(Debug, Clone)]
pub struct DeepArLite {
    cfg: DeepArConfig,
    store: ParamStore,
    w_x: ParamId,
    b_x: ParamId,
    w_h: ParamId,
    b_h: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    drop: Dropout,
}

impl DeepArLite {
    pub fn new(cfg: DeepArConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut store = ParamStore::new();
        let init_seed = stream_seed(cfg.seed, "deepar-init");
        let (head_w, head_b, drop) = {
            let mut b = Builder::new(&mut store, init_seed);
            let w = b.normal("head.weight", &[h, 2]);
            let bias = b.zeros("head.bias", &[2]);
            (w, bias, b.dropout(cfg.dropout))
        };
        // Recurrent weights use the usual U(−1/√h, 1/√h) initialization.
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = rng_from(counter_seed(init_seed, 1, 0));
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("sizes agree")
        };
        let w_x = store.add("gru.w_x", uniform(&[1, 3 * h]));
        let b_x = store.add("gru.b_x", uniform(&[3 * h]));
        let w_h = store.add("gru.w_h", uniform(&[h, 3 * h]));
        let b_h = store.add("gru.b_h", uniform(&[3 * h]));
        Ok(Self {
            cfg,
            store,
            w_x,
            b_x,
            w_h,
            b_h,
            head_w,
            head_b,
            drop,
        })
    }

    pub fn config(&self) -> &DeepArConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Seed of the prediction sampling stream. Weights are untouched.
    pub fn set_seed(&mut self, seed: u64) {
        self.cfg.seed = seed;
    }

    /// Flat band, in units of the window's price std, used when classifying samples.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {tau}")));
        }
        self.cfg.tau = tau;
        Ok(())
    }

    /// Gaussian parameters `(mean, std)` for every step, as `[steps·n, 1]`
    /// vars in time-major order.
    fn gaussian(&self, tape: &mut Tape, p: &Bound, inputs: &[&[f64]], mode: ForwardMode) -> Result<(Var, Var)> {
        let n = inputs.len();
        let h = self.cfg.hidden;
        let x = tape.constant(time_major(inputs, INPUT_LEN));
        let gx = tape.matmul(x, p.var(self.w_x))?;
        let gx = tape.add(gx, p.var(self.b_x))?;
        let mut state = tape.constant(Tensor::zeros(&[n, h]));
        let mut states = Vec::with_capacity(INPUT_LEN);
        for t in 0..INPUT_LEN {
            let gx_t = tape.slice(gx, 0, t * n, n)?;
            let gh = tape.matmul(state, p.var(self.w_h))?;
            let gh = tape.add(gh, p.var(self.b_h))?;
            let xr = tape.slice(gx_t, 1, 0, h)?;
            let xz = tape.slice(gx_t, 1, h, h)?;
            let xn = tape.slice(gx_t, 1, 2 * h, h)?;
            let hr = tape.slice(gh, 1, 0, h)?;
            let hz = tape.slice(gh, 1, h, h)?;
            let hn = tape.slice(gh, 1, 2 * h, h)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let cand = tape.add(xn, rn)?;
            let cand = tape.tanh(cand);
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let diff = tape.sub(state, cand)?;
            let gated = tape.mul(z, diff)?;
            state = tape.add(cand, gated)?;
            states.push(state);
        }
        let all = tape.concat(&states, 0)?;
        let all = self.drop.forward(tape, all, mode)?;
        let out = tape.matmul(all, p.var(self.head_w))?;
        let out = tape.add(out, p.var(self.head_b))?;
        let mean = tape.slice(out, 1, 0, 1)?;
        let raw = tape.slice(out, 1, 1, 1)?;
        let std = tape.unary(UnaryKind::Softplus, raw);
        let std = tape.add_scalar(std, self.cfg.std_floor);
        Ok((mean, std))
    }

    fn nll(&self, tape: &mut Tape, p: &Bound, samples: &[Sample], mode: ForwardMode) -> Result<Var> {
        let seqs: Vec<(Vec<f64>, Vec<f64>)> = samples.iter().map(sequence).collect();
        let inputs: Vec<&[f64]> = seqs.iter().map(|(i, _)| i.as_slice()).collect();
        let targets: Vec<&[f64]> = seqs.iter().map(|(_, t)| t.as_slice()).collect();
        let (mean, std) = self.gaussian(tape, p, &inputs, mode)?;
        let y = tape.constant(time_major(&targets, INPUT_LEN));
        let resid = tape.sub(y, mean)?;
        let z = tape.div(resid, std)?;
        let z2 = tape.unary(UnaryKind::Square, z);
        let half = tape.scale(z2, 0.5);
        let log_std = tape.unary(UnaryKind::Log, std);
        let per = tape.add(log_std, half)?;
        let loss = tape.mean(per);
        Ok(tape.add_scalar(loss, HALF_LN_2PI))
    }

    /// Mean per-step negative log-likelihood in eval mode.
    pub fn evaluate_nll(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("no windows to evaluate".into()));
        }
        let mut total = 0.0;
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let loss = self.nll(&mut tape, &p, chunk, ForwardMode::eval())?;
            total += tape.value(loss).data()[0] * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// Adam on the NLL with reduce-on-plateau and early stopping, both driven
    /// by validation NLL. On return the model holds the best-validation weights.
    pub fn train(
        &mut self,
        train_set: &[Sample],
        val_set: &[Sample],
        mut log: Option<&mut dyn Write>,
        mut on_epoch: impl FnMut(&DeepArEpoch),
    ) -> Result<DeepArOutcome> {
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Contract("training and validation sets must be non-empty".into()));
        }
        let cfg = self.cfg.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.lr_patience);
        let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
        let shuffle_seed = stream_seed(cfg.seed, "deepar-shuffle");
        let dropout_seed = stream_seed(cfg.seed, "deepar-dropout");
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut history = Vec::new();
        let mut early_stopped = false;
        let mut step = 0u64;
        for epoch in 1..=cfg.max_epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng_from(counter_seed(shuffle_seed, epoch as u64, 0)));
            let mut loss_sum = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
                let mut tape = Tape::new();
                let p = self.store.bind(&mut tape);
                let mode = ForwardMode::train(dropout_seed, step);
                let loss = self.nll(&mut tape, &p, &batch, mode)?;
                let grads = tape.backward(loss)?;
                self.store.load_grads(&grads, &p)?;
                opt.step(self.store.tensors_mut())?;
                loss_sum += tape.value(loss).data()[0] * idx.len() as f64;
                step += 1;
            }
            let val_nll = self.evaluate_nll(val_set)?;
            let rec = DeepArEpoch {
                epoch,
                train_nll: loss_sum / train_set.len() as f64,
                val_nll,
                lr: opt.lr(),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.log_line())?;
            }
            on_epoch(&rec);
            history.push(rec);
            if best.as_ref().is_none_or(|(_, b, _)| val_nll < *b) {
                best = Some((epoch, val_nll, self.store.clone()));
            }
            opt.set_lr(scheduler.step(val_nll));
            if stopper.update(val_nll) {
                early_stopped = true;
                break;
            }
        }
        let (best_epoch, best_val_nll) = match best {
            Some((epoch, nll, store)) => {
                self.store.copy_values_from(&store)?;
                (epoch, nll)
            }
            None => (0, f64::NAN),
        };
        Ok(DeepArOutcome {
            history,
            best_epoch,
            best_val_nll,
            early_stopped,
        })
    }

    /// Predicted `(mean, std)` of the 81st step for each standardized window.
    pub fn predict_gaussian(&self, windows: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            if let Some(w) = chunk.iter().find(|w| w.len() != INPUT_LEN) {
                return Err(Error::Data(format!("window of {} values, need {INPUT_LEN}", w.len())));
            }
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let (mean, std) = self.gaussian(&mut tape, &p, chunk, ForwardMode::eval())?;
            let last = (INPUT_LEN - 1) * chunk.len();
            let m = &tape.value(mean).data()[last..];
            let s = &tape.value(std).data()[last..];
            out.extend(m.iter().copied().zip(s.iter().copied()));
        }
        Ok(out)
    }

    /// Sample-proportion class probabilities for raw 80-price windows.
    pub fn predict_windows(&self, windows: &[&[f64]]) -> Result<Vec<SignPrediction>> {
        let standardized: Vec<Vec<f64>> = windows.iter().map(|w| crate::data::standardize(w)).collect();
        let refs: Vec<&[f64]> = standardized.iter().map(|w| w.as_slice()).collect();
        let params = self.predict_gaussian(&refs)?;
        let sample_seed = stream_seed(self.cfg.seed, "deepar-sample");
        Ok(windows
            .iter()
            .zip(params)
            .map(|(w, (mu, sd))| {
                let (lo, hi) = min_max(w);
                let range = hi - lo;
                let last = w[INPUT_LEN - 1];
                let mut rng = rng_from(content_seed(sample_seed, w));
                let probs = sample_class_proportions(
                    lo + range * mu,
                    range * sd,
                    last,
                    self.cfg.tau * population_std(w),
                    self.cfg.n_samples,
                    &mut rng,
                );
                SignPrediction::from_probs(probs)
            })
            .collect())
    }

    pub fn to_checkpoint(&self, mut meta: KvMap) -> Checkpoint {
        meta.set("model", "deepar_lite");
        meta.merge(&self.cfg.to_kv());
        Checkpoint::from_store(meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta.get_str("model") {
            Some("deepar_lite") => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "expected a deepar_lite checkpoint, found model {other:?}"
                )))
            }
        }
        let mut model = Self::new(DeepArConfig::from_kv(&ck.meta)?)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }
}

/// Draws `n` prices from `N(mean, sd)` and returns the fraction classified
/// up, down and flat against `last` with flat band `±band`.
pub fn sample_class_proportions<R: Rng>(mean: f64, sd: f64, last: f64, band: f64, n: usize, rng: &mut R) -> ClassProbs {
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let price = mean + sd * z;
        counts[classify_delta(price - last, band, 1.0).index()] += 1;
    }
    let share = |s: Sign| counts[s.index()] as f64 / n as f64;
    ClassProbs {
        up: share(Sign::Up),
        down: share(Sign::Down),
        flat: share(Sign::Flat),
    }
}

impl SignPredictor for DeepArLite {
    fn name(&self) -> String {
        "DeepAR-lite".into()
    }

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>> {
        let windows: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
        self.predict_windows(&windows)
    }
}
