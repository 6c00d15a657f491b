//! Characteristic exponents of the overflow problem.
//!
//! For each station the exponent `beta` is the unique positive root of
//!
//! ```text
//! c + lambda (1 - e^beta) + mu (1 - e^{-beta}) = 0.
//! ```
//!
//! Substituting `y = e^beta` turns this into the quadratic
//! `lambda y^2 - (c + lambda + mu) y + mu = 0`, whose value at `y = 1` is
//! `-c < 0`; the larger root therefore always exceeds 1 and `beta = log y`
//! is positive. The same equation with per-class arrival rates gives the
//! exponents of the single-server multiclass variant.
//!
//! The gradient basis of the closed-form value function is
//! `b_i = beta_i (e_1 + ... + e_i)`.

use crate::model::NetworkParams;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RootsError {
    #[error("{name} must be positive (got {value}); no positive root exists otherwise")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("station index {index} out of range for J={j}")]
    IndexOutOfRange { index: usize, j: usize },
    #[error("root refinement failed: residual {residual:e} above tolerance {tol:e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
}

/// A solved characteristic root together with the defect of the defining
/// equation at the returned value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootResult {
    pub root: f64,
    pub residual: f64,
}

/// Left-hand side of the characteristic equation at `beta`.
pub fn char_residual(beta: f64, lambda: f64, mu: f64, c: f64) -> f64 {
    c + lambda * (1.0 - beta.exp()) + mu * (1.0 - (-beta).exp())
}

fn check_positive(name: &'static str, v: f64) -> Result<(), RootsError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(RootsError::NonPositiveParam { name, value: v });
    }
    Ok(())
}

fn bisect(lambda: f64, mu: f64, c: f64) -> f64 {
    // The residual is positive near 0 (it tends to c) and eventually
    // negative, so plain bisection on [tiny, 50] brackets the root.
    let (mut lo, mut hi) = (1e-12f64, 50.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if char_residual(mid, lambda, mu, c) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves the characteristic equation for the unique positive root.
///
/// The quadratic in `y = e^beta` is solved in its cancellation-free form
/// (both terms of the larger root are positive), one Newton step polishes
/// the result, and the residual is verified against
/// `1e-12 * (c + lambda + mu)`; bisection is the fallback if the closed
/// form ever fails that check.
pub fn beta_root(lambda: f64, mu: f64, c: f64) -> Result<RootResult, RootsError> {
    check_positive("lambda", lambda)?;
    check_positive("mu", mu)?;
    check_positive("c", c)?;

    let s = c + lambda + mu;
    let disc = s * s - 4.0 * lambda * mu;
    let y = (s + disc.sqrt()) / (2.0 * lambda);
    let mut root = y.ln();

    // One Newton step on the residual; keep it only if it helps.
    let f = char_residual(root, lambda, mu, c);
    let fp = -lambda * root.exp() + mu * (-root).exp();
    if fp != 0.0 {
        let refined = root - f / fp;
        if refined.is_finite()
            && refined > 0.0
            && char_residual(refined, lambda, mu, c).abs() < f.abs()
        {
            root = refined;
        }
    }

    let tol = 1e-12 * s;
    let mut residual = char_residual(root, lambda, mu, c);
    if residual.abs() > tol {
        root = bisect(lambda, mu, c);
        residual = char_residual(root, lambda, mu, c);
        if residual.abs() > tol {
            return Err(RootsError::ResidualTooLarge { residual, tol });
        }
    }
    Ok(RootResult { root, residual })
}

/// Per-class exponent of the single-server multiclass system; the defining
/// equation is identical to the tandem one with the class arrival rate.
pub fn alpha_root(lambda_class: f64, mu_class: f64, c: f64) -> Result<RootResult, RootsError> {
    beta_root(lambda_class, mu_class, c)
}

/// All `J` exponents of an instance.
pub fn betas(params: &NetworkParams) -> Result<Vec<f64>, RootsError> {
    params
        .mu()
        .iter()
        .map(|&mu| beta_root(params.lambda(), mu, params.c()).map(|r| r.root))
        .collect()
}

/// The gradient basis vector `b_i = beta_i (e_1 + ... + e_i)`: `beta_i` on
/// coordinates `0..=i`, zero afterwards.
pub fn b_vector(i: usize, params: &NetworkParams) -> Result<Vec<f64>, RootsError> {
    let j = params.j();
    if i >= j {
        return Err(RootsError::IndexOutOfRange { index: i, j });
    }
    let beta = beta_root(params.lambda(), params.mu()[i], params.c())?.root;
    let mut b = vec![0.0; j];
    for coord in b.iter_mut().take(i + 1) {
        *coord = beta;
    }
    Ok(b)
}
