use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Task, TaskMeta, TaskSource};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

const JITTERS: [f64; 3] = [1e-6, 1e-5, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern32,
    Periodic,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern32 => "matern",
            KernelFamily::Periodic => "periodic",
        }
    }
}

fn default_two_pi() -> f64 {
    2.0 * PI
}
fn default_freq() -> f64 {
    1.0
}

/// Stationary covariance function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Signal scale `s`; `k(x, x) = s²`.
    pub s: f64,
    /// Lengthscale `l`.
    pub l: f64,
    #[serde(default = "default_freq")]
    pub freq: f64,
    #[serde(default = "default_two_pi")]
    pub p: f64,
}

impl KernelSpec {
    pub fn rbf(s: f64, l: f64) -> Self {
        Self { family: KernelFamily::Rbf, s, l, freq: 1.0, p: 2.0 * PI }
    }

    pub fn matern32(s: f64, l: f64) -> Self {
        Self { family: KernelFamily::Matern32, s, l, freq: 1.0, p: 2.0 * PI }
    }

    pub fn periodic(s: f64, l: f64, freq: f64, p: f64) -> Self {
        Self { family: KernelFamily::Periodic, s, l, freq, p }
    }

    /// Training kernel of the regression experiments.
    pub fn paper_train() -> Self {
        Self::rbf(3.0, 3.0)
    }

    /// High-frequency additive noise for the noisy training curves.
    pub fn paper_noise() -> Self {
        Self::periodic(1.0, 1.0, 30.0, 2.0 * PI)
    }

    /// One of the three evaluation kernels, by name (`rbf`, `matern`, `periodic`).
    pub fn paper_test(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "rbf" => Ok(Self::rbf(3.0, 3.0)),
            "matern" | "matern32" => Ok(Self::matern32(3.0, 3.0)),
            "periodic" => Ok(Self::periodic(3.0, 3.0, 10.0, 2.0 * PI)),
            other => Err(Error::validation("kernel", format!("unknown kernel {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite() && self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::validation("kernel", "s and l must be positive"));
        }
        if self.family == KernelFamily::Periodic && !(self.freq >= 1.0 && self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::validation("kernel", "periodic kernel needs freq ≥ 1 and p > 0"));
        }
        Ok(())
    }
}

/// `k(x, x')` for points given as coordinate slices.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> f64 {
    let d = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let s2 = spec.s * spec.s;
    match spec.family {
        KernelFamily::Rbf => s2 * (-d * d / (2.0 * spec.l * spec.l)).exp(),
        KernelFamily::Matern32 => {
            let r = 3f64.sqrt() * d / spec.l;
            s2 * (1.0 + r) * (-r).exp()
        }
        KernelFamily::Periodic => {
            let sn = (PI * spec.freq * d / spec.p).sin();
            s2 * (-2.0 * sn * sn / (spec.l * spec.l)).exp()
        }
    }
}

/// One draw from the zero-mean process at one-dimensional inputs `xs`.
///
/// The covariance gets `1e-6` added on its diagonal, raised to `1e-5` and
/// `1e-4` when the Cholesky factorisation fails.
pub fn gp_sample(spec: &KernelSpec, xs: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::precondition("gp_sample", "no inputs"));
    }
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel_eval(spec, &[xs[i]], &[xs[j]]));
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    for jitter in JITTERS {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            let y = chol.l() * &z;
            return Ok(y.iter().copied().collect());
        }
    }
    Err(Error::numeric("gp_sample", "covariance not positive definite after jitter 1e-4"))
}

/// A regression curve with context and extra-target counts drawn as in the
/// paper: `n_context ~ U{3..97}`, `n_extra ~ U{3..100 − n_context}`.
pub fn make_regression_task(
    kernel: &KernelSpec,
    noise: Option<&KernelSpec>,
    rng: &mut impl Rng,
) -> Result<Task> {
    let n_context = rng.random_range(3..=97);
    let n_extra = rng.random_range(3..=100 - n_context);
    make_regression_task_with_counts(kernel, noise, n_context, n_extra, rng)
}

/// A regression curve with fixed counts; inputs are i.i.d. `U(−2, 2)`.
pub fn make_regression_task_with_counts(
    kernel: &KernelSpec,
    noise: Option<&KernelSpec>,
    n_context: usize,
    n_extra: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    kernel.validate()?;
    if let Some(n) = noise {
        n.validate()?;
    }
    let n = n_context + n_extra;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut ys = gp_sample(kernel, &xs, rng)?;
    if let Some(spec) = noise {
        for (y, e) in ys.iter_mut().zip(gp_sample(spec, &xs, rng)?) {
            *y += e;
        }
    }
    let meta = TaskMeta { source: kernel.family.name().to_string(), noisy: noise.is_some(), seed: 0 };
    Task::from_targets(Tensor::matrix(n, 1, xs)?, Tensor::matrix(n, 1, ys)?, n_context, meta)
}

/// Regression tasks from a fixed kernel, optionally with additive noise.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSource {
    pub kernel: KernelSpec,
    pub noise: Option<KernelSpec>,
}

impl TaskSource for RegressionSource {
    fn task(&self, seed: u64) -> Result<Task> {
        let mut rng = rng_from_seed(seed);
        let mut t = make_regression_task(&self.kernel, self.noise.as_ref(), &mut rng)?;
        t.meta.seed = seed;
        Ok(t)
    }

    fn name(&self) -> String {
        self.kernel.family.name().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_examples() {
        let k = KernelSpec::paper_train();
        assert_eq!(kernel_eval(&k, &[0.4], &[0.4]), 9.0);
        assert!((kernel_eval(&k, &[0.0], &[3.0]) - 9.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((kernel_eval(&k, &[0.0], &[3.0]) - 5.458_775_937_413_7).abs() < 1e-9);
        assert_eq!(kernel_eval(&KernelSpec::matern32(3.0, 3.0), &[1.0], &[1.0]), 9.0);
        let p = KernelSpec::paper_test("periodic").unwrap();
        assert_eq!(kernel_eval(&p, &[1.0], &[1.0]), 9.0);
        assert_eq!(p.freq, 10.0);
        assert_eq!((p.s, p.l), (3.0, 3.0));
        for spec in [k, p, KernelSpec::paper_noise(), KernelSpec::matern32(3.0, 3.0)] {
            assert_eq!(kernel_eval(&spec, &[0.3], &[-1.1]), kernel_eval(&spec, &[-1.1], &[0.3]));
        }
    }

    #[test]
    fn periodic_noise_repeats() {
        let n = KernelSpec::paper_noise();
        // one period is p / freq
        let period = n.p / n.freq;
        assert!((kernel_eval(&n, &[0.0], &[period]) - 1.0).abs() < 1e-12);
        assert!(kernel_eval(&n, &[0.0], &[period / 2.0]) < 0.2);
    }

    #[test]
    fn gp_sample_is_seeded() {
        let xs = [-1.0, 0.0, 0.5, 1.9];
        let a = gp_sample(&KernelSpec::paper_train(), &xs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gp_sample(&KernelSpec::paper_train(), &xs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(gp_sample(&KernelSpec::paper_train(), &[], &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn duplicated_inputs_agree() {
        let xs = [0.3, 0.3, -1.0];
        for seed in 0..50 {
            let y = gp_sample(&KernelSpec::paper_train(), &xs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((y[0] - y[1]).abs() < 1e-2);
        }
    }

    #[test]
    fn noiseless_task_is_plain_draw() {
        let k = KernelSpec::paper_train();
        let t = make_regression_task(&k, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_c: usize = rng.random_range(3..=97);
        let n_e: usize = rng.random_range(3..=100 - n_c);
        let xs: Vec<f64> = (0..n_c + n_e).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys = gp_sample(&k, &xs, &mut rng).unwrap();
        assert_eq!(t.x_target.data(), xs.as_slice());
        assert_eq!(t.y_target.data(), ys.as_slice());
        assert!(!t.meta.noisy);
    }
}
