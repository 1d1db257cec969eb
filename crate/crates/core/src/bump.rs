//! Smooth cut-offs used for amplitudes and partitions of unity.

/// `exp(1 - 1/(1 - t^2))` on `|t| < 1`, zero elsewhere.
pub fn bump(t: f64) -> f64 {
    let s = 1.0 - t * t;
    if s <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / s).exp()
    }
}

/// Smooth step: 0 for `x <= 0`, 1 for `x >= 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Equal to 1 on `|t| <= 1`, 0 on `|t| >= 2`, smooth in between.
pub fn plateau(t: f64) -> f64 {
    smooth_step(2.0 - t.abs())
}

/// Tensor product of [`plateau`] under the sup norm.
pub fn plateau_sup(xi: &[f64]) -> f64 {
    let mut v = 1.0;
    for &t in xi {
        if t.abs() >= 2.0 {
            return 0.0;
        }
        v *= plateau(t);
    }
    v
}
