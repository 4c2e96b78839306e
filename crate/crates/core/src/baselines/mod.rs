//! Comparison methods: exponential smoothing, ARIMA, a one-step Gaussian
//! recurrent forecaster, and constant-class predictors.
//!
//! EMA and ARIMA produce a point forecast; its delta against the last input
//! price gives the sign and a confidence `c`:
//!
//! * `σ` = population standard deviation of the 80 input prices,
//! * `r = min(|delta| / σ, 1)`,
//! * flat when `|delta| ≤ τ·σ` with `c = 1 − r`, otherwise up/down with `c = r`.
//!
//! The predicted class gets probability `(1 + 2c)/3` and the other two
//! `(1 − c)/3` each, so `c = 1` is one-hot and the predicted class is always
//! the argmax.

pub mod arima;
pub mod deepar;
pub mod ema;
mod nelder_mead;

pub use arima::{ArimaBaseline, ArimaFit, ArimaModel, ArimaOrder};
pub use deepar::{DeepArConfig, DeepArLite};
pub use ema::{EmaBaseline, EmaModel};

use crate::data::{Sample, Sign};
use crate::error::Result;
use crate::eval::{ClassProbs, SignPrediction, SignPredictor};

pub const DEFAULT_FLAT_BAND: f64 = 0.05;

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Sign for a forecast delta under the flat band `|delta| ≤ tau·sigma`.
pub fn classify_delta(delta: f64, sigma: f64, tau: f64) -> Sign {
    if delta.abs() <= tau * sigma {
        Sign::Flat
    } else if delta > 0.0 {
        Sign::Up
    } else {
        Sign::Down
    }
}

/// Distribution with `sign` at `(1+2c)/3` and the rest split evenly.
pub fn confidence_probs(sign: Sign, confidence: f64) -> ClassProbs {
    let c = confidence.clamp(0.0, 1.0);
    if c == 1.0 {
        return ClassProbs::one_hot(sign);
    }
    let rest = (1.0 - c) / 3.0;
    let mut p = [rest; 3];
    p[sign.index()] = 1.0 - 2.0 * rest;
    ClassProbs {
        up: p[0],
        down: p[1],
        flat: p[2],
    }
}

/// Sign prediction for a point forecast against the input window.
pub fn delta_prediction(forecast: f64, window: &[f64], tau: f64) -> SignPrediction {
    let last = *window.last().expect("non-empty window");
    let sigma = population_std(window);
    let delta = forecast - last;
    if sigma == 0.0 {
        return SignPrediction::from_probs(ClassProbs::one_hot(Sign::Flat));
    }
    let r = (delta.abs() / sigma).min(1.0);
    let sign = classify_delta(delta, sigma, tau);
    let confidence = if sign == Sign::Flat { 1.0 - r } else { r };
    SignPrediction::from_probs(confidence_probs(sign, confidence))
}

/// Always predicts one class with probability 1.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClass(pub Sign);

impl ConstantClass {
    pub fn predict(&self) -> SignPrediction {
        SignPrediction::from_probs(ClassProbs::one_hot(self.0))
    }
}

impl SignPredictor for ConstantClass {
    fn name(&self) -> String {
        format!("Const-{}", self.0)
    }

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>> {
        Ok(vec![self.predict(); samples.len()])
    }
}
