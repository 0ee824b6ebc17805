//! Finite-difference oracle shared by the unit tests.

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Relative L2 error between the tape gradient and central differences for
/// each input, for the scalar function `build` of `inputs`.
pub fn grad_check(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs).unwrap();
        t.item(o)
    };

    inputs
        .iter()
        .enumerate()
        .map(|(k, input)| {
            let analytic = grads.get(vars[k]).unwrap().data().to_vec();
            let mut numeric = vec![0.0; input.len()];
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            rel_err(&analytic, &numeric)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn random_tensor(rng: &mut impl rand::Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}
