//! Scalar nonlinearities shared by the loss and the head.

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Inverse of [`sigmoid`] on (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
#[inline]
pub fn softplus_derivative(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of [`softplus`] on (0, inf).
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    // x = ln(e^y - 1); rewrite for stability at large y.
    y + (-(-y).exp()).ln_1p()
}
