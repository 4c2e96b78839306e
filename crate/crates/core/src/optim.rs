//! Adam-family optimizers, a reduce-on-plateau scheduler and early stopping.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decay {
    /// `θ ← θ − lr·wd·θ`, separate from the adaptive step.
    Decoupled,
    /// `g ← g + wd·θ` before the moment updates.
    L2,
}

#[derive(Debug, Clone)]
struct Moments {
    cfg: AdamConfig,
    decay: Decay,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Moments {
    fn new(cfg: AdamConfig, decay: Decay) -> Self {
        assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));
        Self {
            cfg,
            decay,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::Contract(format!(
                "parameter {i} has no gradient"
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Contract("parameter count changed".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            let theta = p.data_mut();
            for i in 0..theta.len() {
                let mut g = grad[i];
                match self.decay {
                    Decay::Decoupled => {
                        if weight_decay != 0.0 {
                            theta[i] -= lr * weight_decay * theta[i];
                        }
                    }
                    Decay::L2 => g += weight_decay * theta[i],
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW(Moments);

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self(Moments::new(cfg, Decay::Decoupled))
    }

    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.0.step(params)
    }

    pub fn lr(&self) -> f64 {
        self.0.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.0.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.0.step
    }
}

/// Classic Adam; any weight decay is an L2 term folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam(Moments);

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self(Moments::new(cfg, Decay::L2))
    }

    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.0.step(params)
    }

    pub fn lr(&self) -> f64 {
        self.0.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.0.cfg.lr = lr;
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0,1)");
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric (lower is better) and returns the new rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without a new best.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    counter: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    /// Returns `true` when training should stop.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        self.counter >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
