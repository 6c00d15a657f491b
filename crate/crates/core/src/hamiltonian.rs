//! Running cost, drift, and the Hamiltonian of the overflow game.
//!
//! One player picks service intensities `u` in `[0,1]^J`, the adversary
//! perturbs the arrival and service rates to `m = (lambda_bar, mu_bar)`
//! paying relative entropy at rate
//! `rho(u, m) = lambda l(lambda_bar/lambda) + sum u_i mu_i l(mu_bar_i/mu_i)`
//! with `l(x) = x log x - x + 1`. The three-argument Hamiltonian is
//! `c + p . v(u, m) + rho(u, m)` with drift
//! `v(u, m) = lambda_bar e_1 - sum u_i mu_bar_i gamma_i`.
//!
//! The inner minimum over rates is attained at `lambda_bar = lambda e^{-p_1}`,
//! `mu_bar_i = mu_i e^{gamma_i . p}` -- independently of `u` -- giving
//!
//! ```text
//! H(p, u) = c + lambda (1 - e^{-p_1}) + sum_i u_i mu_i (1 - e^{gamma_i . p})
//! ```
//!
//! and the outer supremum over `u` picks each coordinate by sign:
//!
//! ```text
//! H(p) = c + lambda (1 - e^{-p_1}) + sum_i max(0, mu_i (1 - e^{gamma_i . p})).
//! ```
//!
//! Two identities tie the optimal perturbed rates to the nominal ones:
//! when `H(p, u) = 0` the active rates balance,
//! `lambda_bar + sum u_i mu_bar_i = c + lambda + sum u_i mu_i`, and for
//! every `p` the product is invariant,
//! `lambda_bar prod_i mu_bar_i = lambda prod_i mu_i` (the tandem directions
//! telescope to `e_1`).

use crate::model::{gamma_dot, ModelError, NetworkParams};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HamiltonianError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sum relation requires H(p,u) = 0; got H(p,u) = {h_value:e}")]
    SumRelationPrecondition { h_value: f64 },
}

/// Arrival and per-station service rates, nominal or perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector {
    pub lambda: f64,
    pub mu: Vec<f64>,
}

impl RateVector {
    pub fn nominal(params: &NetworkParams) -> Self {
        Self {
            lambda: params.lambda(),
            mu: params.mu().to_vec(),
        }
    }
}

/// The entropy integrand `x log x - x + 1`, extended by `+inf` on `x < 0`
/// and by continuity (`0 log 0 = 0`) at zero. Convex, minimized at 1.
pub fn ell(x: f64) -> f64 {
    if x < 0.0 {
        f64::INFINITY
    } else if x == 0.0 {
        1.0
    } else {
        x * x.ln() - x + 1.0
    }
}

/// Fluid drift `lambda_bar e_1 - sum_i u_i mu_bar_i gamma_i`.
pub fn drift(u: &[f64], m: &RateVector) -> Vec<f64> {
    let j = u.len();
    debug_assert_eq!(m.mu.len(), j);
    let mut v = vec![0.0; j];
    v[0] = m.lambda;
    for i in 0..j {
        let flow = u[i] * m.mu[i];
        v[i] -= flow;
        if i + 1 < j {
            v[i + 1] += flow;
        }
    }
    v
}

/// Relative-entropy running cost of holding the rates at `m` under
/// control `u`; zero exactly at the nominal rates (on active coordinates).
pub fn running_cost(u: &[f64], m: &RateVector, params: &NetworkParams) -> f64 {
    let mut rho = params.lambda() * ell(m.lambda / params.lambda());
    for i in 0..u.len() {
        if u[i] > 0.0 {
            rho += u[i] * params.mu()[i] * ell(m.mu[i] / params.mu()[i]);
        }
    }
    rho
}

fn h_full_raw(
    p: &[f64],
    u: &[f64],
    lambda_bar: f64,
    mu_bar: &[f64],
    params: &NetworkParams,
) -> f64 {
    // c + p . v(u, m) + rho(u, m), with the dot product expanded through
    // the tandem directions.
    let mut h =
        params.c() + lambda_bar * p[0] + params.lambda() * ell(lambda_bar / params.lambda());
    for i in 0..u.len() {
        if u[i] > 0.0 {
            h += u[i]
                * (-mu_bar[i] * gamma_dot(p, i) + params.mu()[i] * ell(mu_bar[i] / params.mu()[i]));
        }
    }
    h
}

/// The three-argument Hamiltonian `c + p . v(u, m) + rho(u, m)`.
/// `+inf` propagates from negative rate entries.
pub fn h_full(p: &[f64], u: &[f64], m: &RateVector, params: &NetworkParams) -> f64 {
    h_full_raw(p, u, m.lambda, &m.mu, params)
}

/// `H(p, u)`: the Hamiltonian minimized over the perturbed rates.
pub fn h_min_rates(p: &[f64], u: &[f64], params: &NetworkParams) -> f64 {
    let mut h = params.c() + params.lambda() * (1.0 - (-p[0]).exp());
    for i in 0..u.len() {
        h += u[i] * params.mu()[i] * (1.0 - gamma_dot(p, i).exp());
    }
    h
}

/// `H(p)`: the full Hamiltonian, with the supremum over controls taken
/// coordinatewise through the positive part.
pub fn hamiltonian(p: &[f64], params: &NetworkParams) -> f64 {
    let mut h = params.c() + params.lambda() * (1.0 - (-p[0]).exp());
    for i in 0..params.j() {
        h += (params.mu()[i] * (1.0 - gamma_dot(p, i).exp())).max(0.0);
    }
    h
}

/// The rates minimizing the three-argument Hamiltonian for any control:
/// `lambda_bar = lambda e^{-p_1}`, `mu_bar_i = mu_i e^{gamma_i . p}`.
pub fn optimal_rates(p: &[f64], params: &NetworkParams) -> RateVector {
    RateVector {
        lambda: params.lambda() * (-p[0]).exp(),
        mu: (0..params.j())
            .map(|i| params.mu()[i] * gamma_dot(p, i).exp())
            .collect(),
    }
}

/// Per-coordinate status of the maximizing control at `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlStatus {
    ForcedOn,
    ForcedOff,
    /// The coordinate does not affect the supremum (its term vanishes).
    Free,
}

/// Classifies each control coordinate of the supremum in `H(p)`.
pub fn optimal_controls(p: &[f64], params: &NetworkParams) -> Vec<ControlStatus> {
    (0..params.j())
        .map(|i| {
            let term = params.mu()[i] * (1.0 - gamma_dot(p, i).exp());
            if term.abs() <= 1e-12 {
                ControlStatus::Free
            } else if term > 0.0 {
                ControlStatus::ForcedOn
            } else {
                ControlStatus::ForcedOff
            }
        })
        .collect()
}

/// Residual of the active-rate balance
/// `lambda_bar + sum u_i mu_bar_i = c + lambda + sum u_i mu_i`
/// at the optimal perturbed rates. The identity is a consequence of
/// `H(p, u) = 0`, which is enforced as a precondition.
pub fn sum_relation(u: &[f64], p: &[f64], params: &NetworkParams) -> Result<f64, HamiltonianError> {
    let scale = params.c() + params.total_rate();
    let h = h_min_rates(p, u, params);
    if h.abs() > 1e-9 * scale {
        return Err(HamiltonianError::SumRelationPrecondition { h_value: h });
    }
    let m = optimal_rates(p, params);
    let mut lhs = m.lambda;
    let mut rhs = params.c() + params.lambda();
    for i in 0..u.len() {
        lhs += u[i] * m.mu[i];
        rhs += u[i] * params.mu()[i];
    }
    Ok((lhs - rhs).abs())
}

/// Residual of the product invariance
/// `lambda_bar prod_i mu_bar_i = lambda prod_i mu_i`, which holds at the
/// optimal perturbed rates for every `p`.
pub fn product_relation(p: &[f64], params: &NetworkParams) -> f64 {
    let m = optimal_rates(p, params);
    let perturbed: f64 = m.lambda * m.mu.iter().product::<f64>();
    let nominal: f64 = params.lambda() * params.mu().iter().product::<f64>();
    (perturbed - nominal).abs()
}

/// Discretization used by [`isaacs_gap`]: a log-uniform box of rates
/// centered at the optimal perturbation, and the control hypercube
/// represented by its vertices plus edge midpoints.
#[derive(Debug, Clone, Copy)]
pub struct IsaacsGrid {
    pub rate_points_per_axis: usize,
    pub rate_log_halfwidth: f64,
}

impl Default for IsaacsGrid {
    fn default() -> Self {
        Self {
            rate_points_per_axis: 33,
            rate_log_halfwidth: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsaacsReport {
    pub sup_inf: f64,
    pub inf_sup: f64,
    pub gap: f64,
}

fn control_grid(j: usize) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    for mask in 0u32..1 << j {
        points.push((0..j).map(|i| f64::from(mask >> i & 1)).collect());
    }
    for axis in 0..j {
        for mask in 0u32..1 << (j - 1) {
            let mut u = Vec::with_capacity(j);
            let mut bit = 0;
            for i in 0..j {
                if i == axis {
                    u.push(0.5);
                } else {
                    u.push(f64::from(mask >> bit & 1));
                    bit += 1;
                }
            }
            points.push(u);
        }
    }
    points
}

/// Numerically compares the two optimization orders of the Hamiltonian
/// over finite grids. A sanity harness for the minimax interchange, not a
/// proof: the gap should be small (and shrink as the grids refine).
pub fn isaacs_gap(p: &[f64], params: &NetworkParams, grid: &IsaacsGrid) -> IsaacsReport {
    let j = params.j();
    let n = grid.rate_points_per_axis.max(2);
    let center = optimal_rates(p, params);
    let controls = control_grid(j);

    let log_factor = |idx: usize| -> f64 {
        let t =
            -grid.rate_log_halfwidth + 2.0 * grid.rate_log_halfwidth * idx as f64 / (n - 1) as f64;
        t.exp()
    };
    let total = n.pow(j as u32 + 1);
    let mut mu_buf = vec![0.0; j];

    // sup over controls of (inf over the rate grid)
    let mut sup_inf = f64::NEG_INFINITY;
    for u in &controls {
        let mut inf = f64::INFINITY;
        for flat in 0..total {
            let mut rem = flat;
            let lambda_bar = center.lambda * log_factor(rem % n);
            rem /= n;
            for (axis, slot) in mu_buf.iter_mut().enumerate() {
                *slot = center.mu[axis] * log_factor(rem % n);
                rem /= n;
            }
            let h = h_full_raw(p, u, lambda_bar, &mu_buf, params);
            if h < inf {
                inf = h;
            }
        }
        if inf > sup_inf {
            sup_inf = inf;
        }
    }

    // inf over the rate grid of (sup over controls)
    let mut inf_sup = f64::INFINITY;
    for flat in 0..total {
        let mut rem = flat;
        let lambda_bar = center.lambda * log_factor(rem % n);
        rem /= n;
        for (axis, slot) in mu_buf.iter_mut().enumerate() {
            *slot = center.mu[axis] * log_factor(rem % n);
            rem /= n;
        }
        let mut sup = f64::NEG_INFINITY;
        for u in &controls {
            let h = h_full_raw(p, u, lambda_bar, &mu_buf, params);
            if h > sup {
                sup = h;
            }
        }
        if sup < inf_sup {
            inf_sup = sup;
        }
    }

    IsaacsReport {
        sup_inf,
        inf_sup,
        gap: (sup_inf - inf_sup).abs(),
    }
}
