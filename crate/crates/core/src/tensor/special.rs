//! Scalar special functions: log-gamma, digamma and trigamma.
//!
//! All three are defined for `x > 0` only and return NaN elsewhere; the tape
//! operations built on them reject non-positive input before calling in.

use std::f64::consts::PI;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut series = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (z + 0.5) * t.ln() - t + series.ln()
}

/// Gamma function for positive arguments.
pub fn gamma(x: f64) -> f64 {
    ln_gamma(x).exp()
}

/// Digamma ψ(x), the derivative of `ln_gamma`.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    let tail = f
        * (1.0 / 12.0
            - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 / x - tail
}

/// Trigamma ψ'(x), the derivative of `digamma`.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - 0.5 * PI.ln()).abs() < 1e-14);
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-13);
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-12);
        // Γ(1.5) = √π / 2
        assert!((gamma(1.5) - PI.sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn agrees_with_statrs_on_working_range() {
        let mut x = 0.1;
        while x <= 100.0 {
            let lg = statrs::function::gamma::ln_gamma(x);
            assert!((ln_gamma(x) - lg).abs() < 1e-10, "ln_gamma({x})");
            let dg = statrs::function::gamma::digamma(x);
            assert!((digamma(x) - dg).abs() < 1e-10, "digamma({x})");
            x += 0.137;
        }
    }

    #[test]
    fn derivative_chain_matches_differences() {
        for &x in &[0.3, 1.0, 2.7, 11.0, 64.0] {
            let h = 1e-5;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((fd - digamma(x)).abs() < 1e-7, "digamma vs fd at {x}");
            let fd2 = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd2 - trigamma(x)).abs() < 1e-6 * trigamma(x).max(1.0), "trigamma at {x}");
        }
    }

    #[test]
    fn non_positive_is_nan() {
        assert!(ln_gamma(0.0).is_nan());
        assert!(digamma(-1.0).is_nan());
        assert!(trigamma(0.0).is_nan());
    }
}
