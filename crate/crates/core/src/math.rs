// SPDX-License-Identifier: Apache-2.0

//! Thin wrappers over `libm` so the numerics are identical on every target.

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    // the focal exponent is almost always one of these
    if y == 2.0 {
        x * x
    } else if y == 1.0 {
        x
    } else if y == 0.0 {
        1.0
    } else {
        libm::pow(x, y)
    }
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
