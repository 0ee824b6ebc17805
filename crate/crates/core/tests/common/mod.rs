//! Numerical oracles shared by the integration tests.
#![allow(dead_code)]

use statrs::function::gamma::ln_gamma;

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Sum of Simpson integrals over consecutive pieces, to keep narrow peaks visible.
pub fn simpson_pieces(f: &impl Fn(f64) -> f64, edges: &[f64], tol: f64) -> f64 {
    edges.windows(2).map(|w| simpson(f, w[0], w[1], tol / edges.len() as f64)).sum()
}

/// `ln q(x)` for `Weibull(k, λ)`.
pub fn weibull_log_pdf(x: f64, k: f64, lambda: f64) -> f64 {
    k.ln() - lambda.ln() + (k - 1.0) * (x / lambda).ln() - (x / lambda).powf(k)
}

/// `ln p(x)` for `Gamma(α, β)` with rate `β`.
pub fn gamma_log_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * x.ln() - beta * x
}

/// `KL(Weibull ‖ Gamma)` by quadrature in `t = ln((x/λ)^k)`, where the
/// integrand `s e^{−s} ln(q/p)` with `s = e^t` is smooth for every shape.
pub fn kl_weibull_gamma_quadrature(k: f64, lambda: f64, alpha: f64, beta: f64) -> f64 {
    let f = |t: f64| {
        let s = t.exp();
        let x = lambda * (t / k).exp();
        let log_q = k.ln() - lambda.ln() + (k - 1.0) / k * t - s;
        s * (-s).exp() * (log_q - gamma_log_pdf(x, alpha, beta))
    };
    let edges: Vec<f64> = (-60..=5).map(f64::from).collect();
    simpson_pieces(&f, &edges, 1e-11)
}

/// `sup |F_n − F|` of a sample against a continuous CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).max((i + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max)
}

/// Sample mean, variance and the standard errors of both.
pub struct MomentCheck {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

pub fn moments(v: &[f64]) -> MomentCheck {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    MomentCheck { mean, var, se_mean: (var / n).sqrt(), se_var: ((m4 - var * var) / n).sqrt() }
}
