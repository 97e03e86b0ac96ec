//! Float helpers backed by `libm` so the crate stays `no_std`.

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// Logistic sigmoid `G(x; tau) = 1 / (1 + exp(-x / tau))`, evaluated without
/// overflow for either sign of `x`.
#[inline]
pub(crate) fn sigmoid(x: f64, tau: f64) -> f64 {
    let z = x / tau;
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] with respect to `x`: `G (1 - G) / tau`.
#[inline]
pub(crate) fn sigmoid_slope(x: f64, tau: f64) -> f64 {
    sigmoid(x, tau) * sigmoid(-x, tau) / tau
}
