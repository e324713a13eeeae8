//! Standard normal density, distribution and quantile functions.
//!
//! `erfc` comes from `libm` (a port of the msun implementation, accurate to
//! about one ulp). The quantile starts from `statrs`'s inverse erfc, which is
//! only good to ~1e-11, and is polished with Newton steps against `cdf`.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile. Returns `-inf` at 0 and `+inf` at 1.
pub fn quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..2 {
        let density = pdf(x);
        if !(density > 1e-300) {
            break;
        }
        // Work on the smaller tail so the residual keeps its relative precision.
        let residual = if x < 0.0 { cdf(x) - p } else { (1.0 - p) - cdf(-x) };
        x -= residual / density;
    }
    x
}

/// Ratio `Φ(z) / φ(z)`, stable for very negative `z` where both underflow.
pub fn mills_ratio_lower(z: f64) -> f64 {
    if z > -30.0 {
        cdf(z) / pdf(z)
    } else {
        let w = 1.0 / (z * z);
        // Asymptotic expansion of the lower-tail Mills ratio.
        (1.0 - w + 3.0 * w * w - 15.0 * w * w * w) / -z
    }
}
