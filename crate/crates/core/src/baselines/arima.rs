//! ARIMA(p,d,q) fitted by conditional sum of squares.
//!
//! The window is differenced `d` times; on the differenced series `w`
//!
//! ```text
//! e_t = w_t − c − Σ φ_i·w_{t−i} − Σ θ_j·e_{t−j},   t = p..n−1
//! ```
//!
//! with pre-sample innovations set to zero. The intercept `c` is only
//! estimated when `d = 0`. Coefficients are searched through `tanh` so each
//! stays inside (−1, 1).

use std::fmt;
use std::str::FromStr;

use super::nelder_mead::minimize;
use super::{delta_prediction, DEFAULT_FLAT_BAND};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{SignPrediction, SignPredictor};

pub const MIN_WINDOW: usize = 20;
const STARTS: [f64; 3] = [0.0, 0.3, -0.3];
const NM_TOL: f64 = 1e-9;
const NM_MAX_ITER: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const DEFAULT: ArimaOrder = ArimaOrder { p: 1, d: 1, q: 1 };
    pub const RANDOM_WALK: ArimaOrder = ArimaOrder { p: 0, d: 1, q: 0 };

    pub fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.p, self.d, self.q)
    }
}

impl FromStr for ArimaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim_matches(|c| c == '(' || c == ')').split(',').collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>();
        match nums.as_deref() {
            Ok([p, d, q]) => Ok(Self::new(*p, *d, *q)),
            _ => Err(Error::Config(format!("ARIMA order must look like 1,1,1, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub intercept: f64,
    /// CSS / number of residuals.
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaFit {
    pub model: ArimaModel,
    /// True when the requested order failed to converge and the random-walk
    /// order was used instead.
    pub fallback: bool,
}

fn difference(y: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut levels = vec![y.to_vec()];
    for _ in 0..d {
        let prev = levels.last().expect("at least one level");
        let next = prev.windows(2).map(|w| w[1] - w[0]).collect();
        levels.push(next);
    }
    levels
}

fn residuals(w: &[f64], c: f64, ar: &[f64], ma: &[f64]) -> Vec<f64> {
    let p = ar.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = c;
        for (i, phi) in ar.iter().enumerate() {
            pred += phi * w[t - 1 - i];
        }
        for (j, theta) in ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

impl ArimaModel {
    fn css(w: &[f64], c: f64, ar: &[f64], ma: &[f64]) -> f64 {
        residuals(w, c, ar, ma)[ar.len()..].iter().map(|e| e * e).sum()
    }

    /// Conditional sum of squares on `y` for this model's coefficients.
    pub fn conditional_sse(&self, y: &[f64]) -> f64 {
        let levels = difference(y, self.order.d);
        Self::css(&levels[self.order.d], self.intercept, &self.ar, &self.ma)
    }

    /// One-step forecast of the next raw value after `y`.
    pub fn forecast(&self, y: &[f64]) -> f64 {
        let d = self.order.d;
        let levels = difference(y, d);
        let w = &levels[d];
        let e = residuals(w, self.intercept, &self.ar, &self.ma);
        let n = w.len();
        let mut next = self.intercept;
        for (i, phi) in self.ar.iter().enumerate() {
            next += phi * w[n - 1 - i];
        }
        for (j, theta) in self.ma.iter().enumerate() {
            next += theta * e[n - 1 - j];
        }
        for level in levels[..d].iter().rev() {
            next += level[level.len() - 1];
        }
        next
    }

    /// CSS fit of a single order. `Ok(None)` signals non-convergence.
    pub fn fit_order(y: &[f64], order: ArimaOrder) -> Result<Option<Self>> {
        if y.len() < MIN_WINDOW {
            return Err(Error::Contract(format!(
                "ARIMA needs at least {MIN_WINDOW} prices, got {}",
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite price {bad}")));
        }
        let ArimaOrder { p, d, q } = order;
        let levels = difference(y, d);
        let w = &levels[d];
        if w.len() <= p + q + 1 {
            return Err(Error::Contract(format!(
                "order ({order}) leaves too few points to fit"
            )));
        }
        let with_c = d == 0;
        let unpack = |x: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let ar = x[..p].iter().map(|v| v.tanh()).collect();
            let ma = x[p..p + q].iter().map(|v| v.tanh()).collect();
            let c = if with_c { x[p + q] } else { 0.0 };
            (c, ar, ma)
        };
        let objective = |x: &[f64]| {
            let (c, ar, ma) = unpack(x);
            Self::css(w, c, &ar, &ma)
        };
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let scale = w.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);

        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in STARTS {
            let mut x0 = vec![s.atanh(); p + q];
            if with_c {
                x0.push(mean * (1.0 - s * p as f64));
            }
            // Normalize the objective so the tolerance is scale free.
            let norm = |x: &[f64]| objective(x) / (scale * scale);
            let m = minimize(norm, &x0, 0.2, NM_TOL, NM_MAX_ITER);
            if m.converged && m.f.is_finite() && best.as_ref().is_none_or(|b| m.f < b.1) {
                best = Some((m.x, m.f));
            }
        }
        Ok(best.map(|(x, _)| {
            let (c, ar, ma) = unpack(&x);
            let n_res = (w.len() - p) as f64;
            let sigma2 = Self::css(w, c, &ar, &ma) / n_res;
            Self {
                order,
                ar,
                ma,
                intercept: c,
                sigma2,
            }
        }))
    }

    /// Fits `order`, falling back to the random walk when it does not converge.
    pub fn fit(y: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
        if let Some(model) = Self::fit_order(y, order)? {
            return Ok(ArimaFit {
                model,
                fallback: false,
            });
        }
        let model = Self::fit_order(y, ArimaOrder::RANDOM_WALK)?.expect("random walk has no free parameters");
        Ok(ArimaFit {
            model,
            fallback: true,
        })
    }
}

pub fn arima_fit_predict(window: &[f64], order: ArimaOrder, tau: f64) -> Result<(ArimaFit, SignPrediction)> {
    let fit = ArimaModel::fit(window, order)?;
    let pred = delta_prediction(fit.model.forecast(window), window, tau);
    Ok((fit, pred))
}

#[derive(Debug, Clone, Copy)]
pub struct ArimaBaseline {
    pub order: ArimaOrder,
    pub tau: f64,
}

impl Default for ArimaBaseline {
    fn default() -> Self {
        Self {
            order: ArimaOrder::DEFAULT,
            tau: DEFAULT_FLAT_BAND,
        }
    }
}

impl ArimaBaseline {
    /// Predictions plus the number of windows that fell back to the random walk.
    pub fn predict_with_fallbacks(&self, samples: &[Sample]) -> Result<(Vec<SignPrediction>, usize)> {
        let mut fallbacks = 0;
        let preds = samples
            .iter()
            .map(|s| {
                let (fit, pred) = arima_fit_predict(&s.input, self.order, self.tau)?;
                fallbacks += fit.fallback as usize;
                Ok(pred)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, fallbacks))
    }
}

impl SignPredictor for ArimaBaseline {
    fn name(&self) -> String {
        format!("ARIMA({})", self.order)
    }

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>> {
        self.predict_with_fallbacks(samples).map(|(p, _)| p)
    }
}
