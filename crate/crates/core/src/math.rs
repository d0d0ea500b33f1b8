//! Deterministic numeric helpers.
//!
//! Transcendentals that feed quantization decisions go through `libm` so that
//! codes, artifacts and synthetic corpora are byte-identical across platforms
//! (platform libm implementations may differ in the last ulp). `sqrt` stays on
//! std since IEEE 754 requires it correctly rounded.

/// Base-2 logarithm. Exact (integer result) when `x` is a power of two.
pub fn log2(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    // Powers of two have an all-zero mantissa; return the exponent directly so
    // integer log-magnitude grids survive round-trips bit-exactly.
    let bits = x.to_bits();
    let mantissa = bits & ((1u64 << 52) - 1);
    let exp = ((bits >> 52) & 0x7ff) as i64;
    if mantissa == 0 && exp != 0 {
        return (exp - 1023) as f64;
    }
    libm::log2(x)
}

/// 2^x. Exact when `x` is an integer in the normal exponent range.
pub fn exp2(x: f64) -> f64 {
    if x.fract() == 0.0 && (-1022.0..=1023.0).contains(&x) {
        return ldexp(1.0, x as i32);
    }
    libm::exp2(x)
}

/// x * 2^n with exact scaling.
pub fn ldexp(x: f64, n: i32) -> f64 {
    libm::ldexp(x, n)
}

pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// Round half away from zero (the rounding mode used by every quantizer here;
/// `f64::round` already implements it, the alias documents the contract).
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}
