#![allow(dead_code)]

use freqnet_core::autodiff::{Tape, Var};
use freqnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, for kinked primitives.
pub fn random_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces any real node to a scalar through a fixed random projection so
/// every output element contributes to the gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.tensor(out).unwrap().shape().to_vec();
    let r = tape.constant(random(&shape, seed));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central-difference check of every input element. Returns the worst
/// relative error.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let h = 1e-5;
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.tensor(loss).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.real_or_zeros(vars[k], input);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}
