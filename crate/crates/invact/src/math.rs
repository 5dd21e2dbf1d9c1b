//! Small numeric helpers shared across modules.

use std::f64::consts::{PI, SQRT_2};

/// Standard normal CDF, evaluated through erfc so the far-left tail keeps
/// relative accuracy (erf saturates to -1 around |x| ~ 6).
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Logistic sigmoid, branch-stable on both tails.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bisection root finder on `[lo, hi]`; assumes f(lo) and f(hi) have opposite
/// signs. Runs until the bracket is narrower than `xtol`.
pub(crate) fn bisect(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, xtol: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut flo = f(lo);
    debug_assert!(flo * f(hi) <= 0.0, "bisect: no sign change in bracket");
    while hi - lo > xtol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // bracket collapsed to adjacent floats
        }
        let fmid = f(mid);
        if (fmid >= 0.0) == (flo >= 0.0) {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse standard normal CDF. Acklam's rational approximation polished with
/// two Newton steps against the erfc-based CDF; good to ~1e-15 on (0, 1).
#[allow(clippy::excessive_precision)] // constants kept as published
pub(crate) fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit: p must be in (0, 1)");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    for _ in 0..2 {
        let err = normal_cdf(x) - p;
        let pdf = normal_pdf(x);
        if pdf > 0.0 {
            x -= err / pdf;
        }
    }
    x
}

/// Deterministic stratified "sample" of N(0,1): the quantiles at
/// (i + 0.5) / n for i in 0..n, in ascending order.
pub(crate) fn gaussian_quantile_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| probit((i as f64 + 0.5) / n as f64)).collect()
}
