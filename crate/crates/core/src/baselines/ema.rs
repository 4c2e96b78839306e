//! Simple exponential smoothing with an estimated initial level.
//!
//! `ℓ_t = α·y_t + (1−α)·ℓ_{t−1}`, one-step forecast `ŷ_{t+1} = ℓ_t`, with
//! `ℓ_{−1} = level0`. For a fixed α every in-sample forecast is affine in
//! `level0`, so the SSE-optimal `level0` has a closed form and only α needs a
//! numerical search.

use super::{delta_prediction, DEFAULT_FLAT_BAND};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{SignPrediction, SignPredictor};

const GRID_STEP: f64 = 0.02;
const GOLDEN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaModel {
    pub alpha: f64,
    pub level0: f64,
}

impl EmaModel {
    /// Final smoothed level after consuming `y`.
    pub fn forecast(&self, y: &[f64]) -> f64 {
        y.iter()
            .fold(self.level0, |level, &v| self.alpha * v + (1.0 - self.alpha) * level)
    }

    /// Sum of squared one-step errors over `y`.
    pub fn sse(&self, y: &[f64]) -> f64 {
        let mut level = self.level0;
        let mut sse = 0.0;
        for &v in y {
            sse += (v - level) * (v - level);
            level = self.alpha * v + (1.0 - self.alpha) * level;
        }
        sse
    }

    /// Best `level0` for a fixed `alpha`, with its SSE.
    pub fn fit_level0(y: &[f64], alpha: f64) -> (f64, f64) {
        // ŷ_t = a_t·level0 + b_t; a_0 = 1, b_0 = 0.
        let (mut a, mut b) = (1.0, 0.0);
        let (mut saa, mut sab) = (0.0, 0.0);
        for &v in y {
            saa += a * a;
            sab += a * (v - b);
            b = alpha * v + (1.0 - alpha) * b;
            a *= 1.0 - alpha;
        }
        let level0 = sab / saa;
        let sse = Self { alpha, level0 }.sse(y);
        (level0, sse)
    }

    /// Joint SSE minimization: coarse α grid, then golden-section refinement
    /// around the best grid point.
    pub fn fit(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Contract("cannot fit smoothing to an empty window".into()));
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite price {bad}")));
        }
        // Shifting by y[0] leaves α unchanged and keeps the sums well scaled.
        let shift = y[0];
        let z: Vec<f64> = y.iter().map(|v| v - shift).collect();
        let cost = |alpha: f64| Self::fit_level0(&z, alpha).1;

        let steps = (1.0 / GRID_STEP).round() as usize;
        let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        let (best_i, _) = grid
            .iter()
            .map(|&a| cost(a))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty grid");
        let lo = grid[best_i.saturating_sub(1)];
        let hi = grid[(best_i + 1).min(steps)];
        let refined = golden_section(&cost, lo, hi, GOLDEN_TOL);
        let alpha = [grid[best_i], refined]
            .into_iter()
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .expect("two candidates");
        let (level0, _) = Self::fit_level0(&z, alpha);
        Ok(Self {
            alpha,
            level0: level0 + shift,
        })
    }
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// Fits on the window and turns the one-step forecast into a sign prediction.
pub fn ema_fit_predict(window: &[f64], tau: f64) -> Result<(EmaModel, SignPrediction)> {
    let model = EmaModel::fit(window)?;
    let pred = delta_prediction(model.forecast(window), window, tau);
    Ok((model, pred))
}

#[derive(Debug, Clone, Copy)]
pub struct EmaBaseline {
    pub tau: f64,
}

impl Default for EmaBaseline {
    fn default() -> Self {
        Self {
            tau: DEFAULT_FLAT_BAND,
        }
    }
}

impl SignPredictor for EmaBaseline {
    fn name(&self) -> String {
        "EMA".into()
    }

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<SignPrediction>> {
        samples
            .iter()
            .map(|s| ema_fit_predict(&s.input, self.tau).map(|(_, p)| p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sign;

    #[test]
    fn constant_window_forecasts_constant() {
        let w = vec![42.5; 80];
        let (m, pred) = ema_fit_predict(&w, DEFAULT_FLAT_BAND).unwrap();
        assert!((m.forecast(&w) - 42.5).abs() < 1e-12);
        assert_eq!(pred.sign, Sign::Flat);
    }

    #[test]
    fn alpha_one_forecasts_last_price() {
        let w: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin() + 10.0).collect();
        let m = EmaModel {
            alpha: 1.0,
            level0: 3.0,
        };
        assert_eq!(m.forecast(&w), w[79]);
    }

    #[test]
    fn closed_form_level_is_stationary() {
        let w: Vec<f64> = (0..80).map(|i| (i as f64 * 0.21).cos() * 3.0 + 50.0).collect();
        let (l0, sse) = EmaModel::fit_level0(&w, 0.4);
        for d in [-1e-3, 1e-3] {
            let other = EmaModel {
                alpha: 0.4,
                level0: l0 + d,
            };
            assert!(other.sse(&w) > sse);
        }
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(EmaModel::fit(&[]).is_err());
        assert!(EmaModel::fit(&[1.0, f64::NAN]).is_err());
    }
}
