use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Shape of a multi-layer perceptron: `layers` linear maps, ReLU between
/// them, none after the last.
///
/// A single layer is one linear map `d_in → d_out`; `d_hidden` is then unused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl MlpSpec {
    pub fn new(layers: usize, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self { layers, d_in, d_hidden, d_out }
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let fan_in = if i == 0 { self.d_in } else { self.d_hidden };
                let fan_out = if i + 1 == self.layers { self.d_out } else { self.d_hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub(crate) fn init(&self, rng: &mut impl rand::Rng, store: &mut ParamStore, prefix: &str) {
        for (i, (fi, fo)) in self.widths().into_iter().enumerate() {
            store.add_linear(rng, &format!("{prefix}.{i}"), fi, fo);
        }
    }
}

/// `x·W + b` for `x: [n×in]`.
pub(crate) fn linear(tape: &mut Tape, params: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = params.var(&format!("{name}.w"))?;
    let b = params.var(&format!("{name}.b"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row_bias(h, b)
}

/// Applies the perceptron stored under `prefix` to the rows of `x`.
pub fn mlp_forward(tape: &mut Tape, params: &Bound, prefix: &str, spec: &MlpSpec, x: Var) -> Result<Var> {
    if spec.layers == 0 {
        return Err(Error::shape("mlp_forward", "perceptron needs at least one layer"));
    }
    let cols = tape.value(x).cols();
    if cols != spec.d_in {
        return Err(Error::shape("mlp_forward", format!("{prefix}: input width {cols}, expected {}", spec.d_in)));
    }
    let mut h = x;
    for i in 0..spec.layers {
        h = linear(tape, params, &format!("{prefix}.{i}"), h)?;
        if i + 1 < spec.layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::testutil::{grad_check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(3, 2, 4, 3);
        let mut store = ParamStore::new();
        spec.init(&mut ChaCha8Rng::seed_from_u64(0), &mut store, "m");
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = mlp_forward(&mut tape, &p, "m", &spec, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_net_passes_positive_entries() {
        let spec = MlpSpec::new(2, 3, 3, 3);
        let mut store = ParamStore::new();
        spec.init(&mut ChaCha8Rng::seed_from_u64(0), &mut store, "m");
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        store.insert("m.0.w", eye.clone());
        store.insert("m.1.w", eye);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.5, 2.0, -1.0]).unwrap());
        let y = mlp_forward(&mut tape, &p, "m", &spec, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 2.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_width() {
        let spec = MlpSpec::new(2, 3, 4, 1);
        let mut store = ParamStore::new();
        spec.init(&mut ChaCha8Rng::seed_from_u64(0), &mut store, "m");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, 2.0]).unwrap());
        assert!(matches!(mlp_forward(&mut tape, &p, "m", &spec, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_differences() {
        let spec = MlpSpec::new(3, 3, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        spec.init(&mut rng, &mut store, "m");
        for (_, t) in store.iter_mut() {
            // non-zero biases so every kink location moves with the inputs
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
        let x = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(x);
        let errs = grad_check(&inputs, 1e-6, |t, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
            let y = mlp_forward(t, &bound, "m", &spec, v[names.len()])?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        });
        assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
    }
}
