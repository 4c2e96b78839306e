//! Central finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use ctts_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
/// gradient is numerically zero from dominating.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes to the checked gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = uniform(tape.shape(y), seed ^ 0x5eed);
    let w = tape.constant(w);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod)
}

#[derive(Debug, Clone, Copy)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compares tape gradients of `f(inputs)` against central differences for
/// every coordinate of every input. `f` must return a scalar var.
pub fn check<F>(inputs: &[Tensor], f: F, floor: f64) -> Worst
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |perturbed: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut worst = Worst {
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &gj) in g.iter().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + H;
            let up = eval(&work);
            work[i].data_mut()[j] = x - H;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * H);
            let rel = rel_err(gj, numeric, floor);
            if rel > worst.rel {
                worst = Worst {
                    input: i,
                    index: j,
                    analytic: gj,
                    numeric,
                    rel,
                };
            }
        }
    }
    worst
}

/// Central differences over selected coordinates of a parameter list.
/// `loss_at(tensor, index, value)` must evaluate the loss with that single
/// coordinate overwritten (and leave the parameters as it found them).
pub fn check_coords<F>(values: &[Vec<f64>], analytic: &[Vec<f64>], coords: &[(usize, usize)], mut loss_at: F, floor: f64) -> Worst
where
    F: FnMut(usize, usize, f64) -> f64,
{
    let mut worst = Worst {
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel: 0.0,
    };
    for &(i, j) in coords {
        let x = values[i][j];
        let numeric = (loss_at(i, j, x + H) - loss_at(i, j, x - H)) / (2.0 * H);
        let rel = rel_err(analytic[i][j], numeric, floor);
        if rel > worst.rel {
            worst = Worst {
                input: i,
                index: j,
                analytic: analytic[i][j],
                numeric,
                rel,
            };
        }
    }
    worst
}
