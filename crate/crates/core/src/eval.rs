//! Sign-accuracy metrics and benchmark tables.
//!
//! Accuracy is reported for the 3-class task (up / down / flat) and the
//! 2-class task (up-or-flat / down), each in a plain and a thresholded
//! form. The thresholded form keeps only samples whose dominating-class
//! probability is strictly above the 75th percentile of those
//! probabilities over the whole evaluated set.

use std::fmt::Write as _;

use crate::data::{class_distribution, Sample, Sign};
use crate::error::{Error, Result};

pub const THRESHOLD_PERCENTILE: f64 = 75.0;
const PROB_TOL: f64 = 1e-9;

/// Probability vector over (up, down, flat).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbs {
    pub up: f64,
    pub down: f64,
    pub flat: f64,
}

impl ClassProbs {
    pub fn new(up: f64, down: f64, flat: f64) -> Result<Self> {
        let p = Self { up, down, flat };
        if !p.is_valid() {
            return Err(Error::Contract(format!(
                "invalid class probabilities ({up}, {down}, {flat})"
            )));
        }
        Ok(p)
    }

    pub fn from_array(p: [f64; 3]) -> Result<Self> {
        Self::new(p[0], p[1], p[2])
    }

    pub fn one_hot(sign: Sign) -> Self {
        let mut p = [0.0; 3];
        p[sign.index()] = 1.0;
        Self {
            up: p[0],
            down: p[1],
            flat: p[2],
        }
    }

    pub fn uniform() -> Self {
        Self {
            up: 1.0 / 3.0,
            down: 1.0 / 3.0,
            flat: 1.0 / 3.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.up, self.down, self.flat]
    }

    pub fn get(&self, sign: Sign) -> f64 {
        self.as_array()[sign.index()]
    }

    pub fn is_valid(&self) -> bool {
        let a = self.as_array();
        a.iter().all(|p| p.is_finite() && *p >= 0.0) && (a.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL
    }

    /// Most probable class; ties resolve up, then down, then flat.
    pub fn argmax(&self) -> Sign {
        let a = self.as_array();
        let mut best = Sign::Up;
        for s in [Sign::Down, Sign::Flat] {
            if a[s.index()] > a[best.index()] {
                best = s;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.up.max(self.down).max(self.flat)
    }
}

/// A method's output for one window. `sign` is always `probs.argmax()`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignPrediction {
    pub probs: ClassProbs,
    pub sign: Sign,
}

impl SignPrediction {
    pub fn from_probs(probs: ClassProbs) -> Self {
        Self {
            sign: probs.argmax(),
            probs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    /// up-or-flat vs down
    Two,
    /// up vs down vs flat
    Three,
}

/// Class 1 = price goes up or stays flat, class 2 = price goes down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryClass {
    UpOrFlat,
    Down,
}

impl From<Sign> for BinaryClass {
    fn from(s: Sign) -> Self {
        match s {
            Sign::Up | Sign::Flat => BinaryClass::UpOrFlat,
            Sign::Down => BinaryClass::Down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryProbs {
    pub up_or_flat: f64,
    pub down: f64,
}

impl BinaryProbs {
    /// Ties go to up-or-flat, matching the 3-class tie order.
    pub fn argmax(&self) -> BinaryClass {
        if self.up_or_flat >= self.down {
            BinaryClass::UpOrFlat
        } else {
            BinaryClass::Down
        }
    }

    pub fn max(&self) -> f64 {
        self.up_or_flat.max(self.down)
    }
}

pub fn to_two_class(probs: &ClassProbs, truth: Sign) -> (BinaryProbs, BinaryClass) {
    (
        BinaryProbs {
            up_or_flat: probs.up + probs.flat,
            down: probs.down,
        },
        truth.into(),
    )
}

/// (dominating probability, correct?) per sample for the given task.
fn scored(preds: &[SignPrediction], truths: &[Sign], mode: TaskMode) -> Result<Vec<(f64, bool)>> {
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, &t)| match mode {
            TaskMode::Three => (p.probs.max(), p.sign == t),
            TaskMode::Two => {
                let (bp, bt) = to_two_class(&p.probs, t);
                (bp.max(), bp.argmax() == bt)
            }
        })
        .collect())
}

pub fn sign_accuracy(preds: &[SignPrediction], truths: &[Sign], mode: TaskMode) -> Result<f64> {
    let s = scored(preds, truths, mode)?;
    Ok(s.iter().filter(|(_, ok)| *ok).count() as f64 / s.len() as f64)
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics (rank `q/100·(n−1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholded {
    /// `None` when no sample exceeds the threshold.
    pub accuracy: Option<f64>,
    pub threshold: f64,
    pub retained: usize,
    pub total: usize,
}

/// Accuracy over samples whose dominating probability exceeds `threshold`.
pub fn thresholded_accuracy_at(
    preds: &[SignPrediction],
    truths: &[Sign],
    mode: TaskMode,
    threshold: f64,
) -> Result<Thresholded> {
    let s = scored(preds, truths, mode)?;
    let kept: Vec<bool> = s.iter().filter(|(p, _)| *p > threshold).map(|(_, ok)| *ok).collect();
    let accuracy = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().filter(|ok| **ok).count() as f64 / kept.len() as f64)
    };
    Ok(Thresholded {
        accuracy,
        threshold,
        retained: kept.len(),
        total: s.len(),
    })
}

/// Thresholded accuracy at the 75th percentile of dominating probabilities.
pub fn thresholded_accuracy(preds: &[SignPrediction], truths: &[Sign], mode: TaskMode) -> Result<Thresholded> {
    let s = scored(preds, truths, mode)?;
    let dom: Vec<f64> = s.iter().map(|(p, _)| *p).collect();
    thresholded_accuracy_at(preds, truths, mode, percentile(&dom, THRESHOLD_PERCENTILE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub n: usize,
    pub acc2: f64,
    pub acc2_thresholded: Thresholded,
    pub acc3: f64,
    pub acc3_thresholded: Thresholded,
    /// Ground-truth fractions (up, down, flat).
    pub truth_distribution: [f64; 3],
}

pub fn evaluate(method: &str, preds: &[SignPrediction], truths: &[Sign]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        method: method.to_string(),
        n: truths.len(),
        acc2: sign_accuracy(preds, truths, TaskMode::Two)?,
        acc2_thresholded: thresholded_accuracy(preds, truths, TaskMode::Two)?,
        acc3: sign_accuracy(preds, truths, TaskMode::Three)?,
        acc3_thresholded: thresholded_accuracy(preds, truths, TaskMode::Three)?,
        truth_distribution: class_distribution(truths.iter().copied()),
    })
}

/// Common contract for every compared method: windows in, predictions out.
pub trait SignPredictor {
    fn name(&self) -> String;
    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Done(MetricsReport),
    Failed { method: String, error: String },
}

impl MethodOutcome {
    pub fn method(&self) -> &str {
        match self {
            MethodOutcome::Done(r) => &r.method,
            MethodOutcome::Failed { method, .. } => method,
        }
    }

    pub fn report(&self) -> Option<&MetricsReport> {
        match self {
            MethodOutcome::Done(r) => Some(r),
            MethodOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub outcomes: Vec<MethodOutcome>,
    pub truth_distribution: [f64; 3],
    pub n: usize,
}

/// Runs every method on the same test set, in input order. A failing
/// method is recorded and the rest still run.
pub fn benchmark(methods: &[&dyn SignPredictor], test: &[Sample]) -> Result<BenchmarkReport> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let truths: Vec<Sign> = test.iter().map(|s| s.label).collect();
    let outcomes = methods
        .iter()
        .map(|m| {
            let name = m.name();
            match m
                .predict_batch(test)
                .and_then(|preds| evaluate(&name, &preds, &truths))
            {
                Ok(r) => MethodOutcome::Done(r),
                Err(e) => MethodOutcome::Failed {
                    method: name,
                    error: e.to_string(),
                },
            }
        })
        .collect();
    Ok(BenchmarkReport {
        outcomes,
        truth_distribution: class_distribution(truths.iter().copied()),
        n: truths.len(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn pct_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), pct)
}

impl BenchmarkReport {
    /// Human-readable table: one row per method, four accuracy columns,
    /// and the ground-truth class distribution as a footer.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .outcomes
            .iter()
            .map(|o| o.method().len())
            .max()
            .unwrap_or(6)
            .max(6);
        let _ = writeln!(
            out,
            "{:<width$} | {:>8} | {:>8} | {:>8} | {:>8}",
            "Method", "2-class", "2-class*", "3-class", "3-class*"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 44));
        for o in &self.outcomes {
            match o {
                MethodOutcome::Done(r) => {
                    let _ = writeln!(
                        out,
                        "{:<width$} | {:>8} | {:>8} | {:>8} | {:>8}",
                        r.method,
                        pct(r.acc2),
                        pct_opt(r.acc2_thresholded.accuracy),
                        pct(r.acc3),
                        pct_opt(r.acc3_thresholded.accuracy)
                    );
                }
                MethodOutcome::Failed { method, error } => {
                    let _ = writeln!(out, "{method:<width$} | FAILED: {error}");
                }
            }
        }
        let [u, d, f] = self.truth_distribution;
        let _ = writeln!(
            out,
            "* thresholded at the 75th percentile of dominating-class probabilities (2-class uses the mapped up-or-flat/down probabilities)."
        );
        let _ = writeln!(
            out,
            "Ground truth over {} samples, up | down | flat: {} | {} | {}",
            self.n,
            pct(u),
            pct(d),
            pct(f)
        );
        out
    }

    /// One `key=value` record per method.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        let [u, d, f] = self.truth_distribution;
        let _ = writeln!(out, "truth n={} up={u} down={d} flat={f}", self.n);
        for o in &self.outcomes {
            match o {
                MethodOutcome::Done(r) => {
                    let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| v.to_string());
                    let _ = writeln!(
                        out,
                        "method={} acc2={} acc2_thr={} acc3={} acc3_thr={} threshold2={} threshold3={} retained2={} retained3={} n={}",
                        r.method,
                        r.acc2,
                        opt(r.acc2_thresholded.accuracy),
                        r.acc3,
                        opt(r.acc3_thresholded.accuracy),
                        r.acc2_thresholded.threshold,
                        r.acc3_thresholded.threshold,
                        r.acc2_thresholded.retained,
                        r.acc3_thresholded.retained,
                        r.n
                    );
                }
                MethodOutcome::Failed { method, error } => {
                    let _ = writeln!(out, "method={method} failed={error:?}");
                }
            }
        }
        out
    }
}
