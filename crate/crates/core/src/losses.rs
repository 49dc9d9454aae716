//! Scalar losses of the training objective.

/// Hinge loss `(1 - tau)_+` on the classification margin.
pub fn hinge(tau: f64) -> f64 {
    (1.0 - tau).max(0.0)
}

/// Subgradient of [`hinge`]; the kink at `tau = 1` maps to 0.
pub fn hinge_subgrad(tau: f64) -> f64 {
    if tau < 1.0 {
        -1.0
    } else {
        0.0
    }
}

/// Misalignment of a co-occurring pair with transfer activation `a`:
/// `log(1 + exp(-2a)) = -log(0.5 * (1 + tanh(a)))`.
pub fn misalign(a: f64) -> f64 {
    if a >= 0.0 {
        (-2.0 * a).exp().ln_1p()
    } else {
        -2.0 * a + (2.0 * a).exp().ln_1p()
    }
}

/// Derivative of [`misalign`], `tanh(a) - 1`.
pub fn misalign_deriv(a: f64) -> f64 {
    a.tanh() - 1.0
}
