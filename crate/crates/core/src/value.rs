//! The closed-form value function and the bottleneck structure.
//!
//! With `y = z - x` (free buffer space) the limit value is
//!
//! ```text
//! V(x) = min_{i} beta_i (y_1 + ... + y_i),
//! ```
//!
//! the minimum of `J` affine functions. The minimizing index is the
//! *bottleneck*: the station that must be served at `x`. Candidates are
//! restricted a priori to the running-minimum set `A'` (a station can only
//! be a bottleneck if no earlier station is strictly slower) and, state by
//! state, to `A(x)`, which drops any candidate that is followed by a
//! contiguous block of full buffers ending at a station no faster than it.
//! The minimum over all indices always agrees with the minimum over
//! `A(x)`; [`ValueFn::lemma1_holds`] checks that equivalence exactly.
//!
//! The same shape with per-class arrival rates and decoupled terms
//! `alpha_i (z_i - x_i)` solves the single-server multiclass system when
//! the risk parameter is large; see [`SingleServerParams`].

use crate::model::{self, active_sets_in_g, classify, BoundaryClass, ModelError, NetworkParams};
use crate::roots::{self, RootsError};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roots(#[from] RootsError),
    #[error("gradient requested on the boundary; only interior points are differentiable")]
    BoundaryPoint,
    #[error("resolution must be at least {min}, got {got}")]
    ResolutionTooSmall { min: usize, got: usize },
}

/// Relative tolerance for declaring two value terms tied.
const TIE_REL_TOL: f64 = 1e-12;

/// Per-index terms of the value minimum at one state.
///
/// `argmin` keeps every tied minimizer (restricted to `A(x)` when `x` lies
/// in `G`; on the overflow face the restriction is vacuous and skipped),
/// and `bottleneck` is the least index among them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBreakdown {
    pub terms: Vec<f64>,
    pub value: f64,
    pub argmin: u32,
    pub bottleneck: usize,
}

/// Gradient of the value function at an interior point.
#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Differentiable(Vec<f64>),
    /// The minimum is attained by more than one index; `DV` does not exist.
    Nondifferentiable {
        argmin: u32,
    },
}

/// One row of a bottleneck region map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub x: Vec<f64>,
    pub value: f64,
    pub argmin: u32,
    pub a_of_x: u32,
}

/// The value function of an instance with its exponents precomputed.
#[derive(Debug, Clone)]
pub struct ValueFn {
    params: NetworkParams,
    betas: Vec<f64>,
    a_prime: u32,
}

impl ValueFn {
    pub fn new(params: NetworkParams) -> Result<Self, RootsError> {
        let betas = roots::betas(&params)?;
        let a_prime = running_min_mask(params.mu());
        Ok(Self {
            params,
            betas,
            a_prime,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn b_vector(&self, i: usize) -> Vec<f64> {
        let mut b = vec![0.0; self.params.j()];
        for coord in b.iter_mut().take(i + 1) {
            *coord = self.betas[i];
        }
        b
    }

    /// `A'`: stations whose service rate is a running minimum (ties kept);
    /// station 0 is always a member.
    pub fn a_prime(&self) -> u32 {
        self.a_prime
    }

    /// The terms `beta_i (y_1 + ... + y_i)`, `y = z - x`.
    pub fn terms(&self, x: &[f64]) -> Vec<f64> {
        let z = self.params.z();
        let mut cum = 0.0;
        self.betas
            .iter()
            .enumerate()
            .map(|(i, &beta)| {
                cum += z[i] - x[i];
                beta * cum
            })
            .collect()
    }

    /// Allocation-free minimum and achiever mask over the value terms.
    fn scan(&self, x: &[f64]) -> (f64, u32) {
        let z = self.params.z();
        let j = z.len();
        let mut terms = [0.0f64; model::MAX_QUEUES];
        let mut cum = 0.0;
        let mut min = f64::INFINITY;
        for i in 0..j {
            cum += z[i] - x[i];
            let t = self.betas[i] * cum;
            terms[i] = t;
            if t < min {
                min = t;
            }
        }
        let tol = TIE_REL_TOL * (1.0 + min.abs());
        let mut mask = 0u32;
        for (i, &t) in terms.iter().enumerate().take(j) {
            if t <= min + tol {
                mask |= 1 << i;
            }
        }
        (min, mask)
    }

    /// `V(x)` on the closed rectangle; zero exactly on the overflow face.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.scan(x).0
    }

    /// `A(x)`: `A'` minus every index followed by a contiguous run of full
    /// buffers that reaches a station no faster than it.
    pub fn a_of_x(&self, x: &[f64]) -> Result<u32, ModelError> {
        let sets = active_sets_in_g(x, &self.params)?;
        Ok(self.a_of_x_from_full(sets.full))
    }

    fn a_of_x_from_full(&self, full: u32) -> u32 {
        let mu = self.params.mu();
        let j = mu.len();
        let mut a = self.a_prime;
        for i in model::mask_indices(self.a_prime) {
            let mut probe = i + 1;
            while probe < j && model::mask_contains(full, probe) {
                if mu[probe] <= mu[i] {
                    a &= !(1 << i);
                    break;
                }
                probe += 1;
            }
        }
        a
    }

    /// Tied minimizers of the value terms, restricted to `A(x)` for `x` in
    /// `G` (on the overflow face the unrestricted achievers are returned).
    pub fn argmin_mask(&self, x: &[f64]) -> Result<u32, ModelError> {
        self.params.check_dim(x)?;
        if classify(x, &self.params) == BoundaryClass::Outside {
            return Err(ModelError::OutsideDomain);
        }
        let (_, achievers) = self.scan(x);
        if x[0] == self.params.z()[0] {
            return Ok(achievers);
        }
        let sets = active_sets_in_g(x, &self.params)?;
        let filtered = achievers & self.a_of_x_from_full(sets.full);
        // The exact minimizer always survives the restriction; ties kept
        // by tolerance may not, but at least one achiever remains.
        debug_assert!(filtered != 0);
        Ok(filtered)
    }

    /// The least bottleneck index at `x`.
    pub fn bottleneck(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(self.argmin_mask(x)?.trailing_zeros() as usize)
    }

    pub fn breakdown(&self, x: &[f64]) -> Result<ValueBreakdown, ModelError> {
        let argmin = self.argmin_mask(x)?;
        Ok(ValueBreakdown {
            terms: self.terms(x),
            value: self.value(x),
            argmin,
            bottleneck: argmin.trailing_zeros() as usize,
        })
    }

    /// Exact check that the minimum over all indices equals the minimum
    /// over `A(x)`.
    pub fn lemma1_holds(&self, x: &[f64]) -> Result<bool, ModelError> {
        let a = self.a_of_x(x)?;
        let terms = self.terms(x);
        let full_min = terms.iter().cloned().fold(f64::INFINITY, f64::min);
        let restricted_min = model::mask_indices(a)
            .map(|i| terms[i])
            .fold(f64::INFINITY, f64::min);
        Ok(full_min == restricted_min)
    }

    /// `DV(x) = -b_j` at interior points with a unique minimizer.
    pub fn gradient(&self, x: &[f64]) -> Result<Gradient, ValueError> {
        self.params.check_dim(x)?;
        if classify(x, &self.params) != BoundaryClass::Interior {
            return Err(ValueError::BoundaryPoint);
        }
        let argmin = self.argmin_mask(x)?;
        if argmin.count_ones() > 1 {
            return Ok(Gradient::Nondifferentiable { argmin });
        }
        let j = argmin.trailing_zeros() as usize;
        let mut g = self.b_vector(j);
        for coord in g.iter_mut() {
            *coord = -*coord;
        }
        Ok(Gradient::Differentiable(g))
    }

    /// Uniform grid of `G` (axis 0 stops short of the overflow face) with
    /// the value, the tied minimizers, and `A(x)` at every node.
    pub fn region_map(&self, resolution: usize) -> Result<Vec<RegionRow>, ValueError> {
        if resolution < 2 {
            return Err(ValueError::ResolutionTooSmall {
                min: 2,
                got: resolution,
            });
        }
        let j = self.params.j();
        let z = self.params.z();
        let total: usize = resolution.pow(j as u32);
        let mut rows = Vec::with_capacity(total);
        let mut x = vec![0.0; j];
        for flat in 0..total {
            let mut rem = flat;
            for axis in (0..j).rev() {
                let k = rem % resolution;
                rem /= resolution;
                x[axis] = if axis == 0 {
                    // open face: k/R * z keeps x1 strictly below z1
                    k as f64 / resolution as f64 * z[axis]
                } else {
                    k as f64 / (resolution - 1) as f64 * z[axis]
                };
            }
            let argmin = self.argmin_mask(&x)?;
            let sets = active_sets_in_g(&x, &self.params)?;
            rows.push(RegionRow {
                x: x.clone(),
                value: self.value(&x),
                argmin,
                a_of_x: self.a_of_x_from_full(sets.full),
            });
        }
        Ok(rows)
    }
}

fn running_min_mask(mu: &[f64]) -> u32 {
    let mut mask = 1u32;
    let mut best = mu[0];
    for (i, &m) in mu.iter().enumerate().skip(1) {
        if m <= best {
            mask |= 1 << i;
            best = m;
        }
    }
    mask
}

/// A single server offering service to `J` independent classes, each with
/// its own Poisson arrivals and finite buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleServerParams {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    z: Vec<f64>,
    c: f64,
}

#[derive(Deserialize)]
struct RawSingleServer {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    z: Vec<f64>,
    c: f64,
}

impl SingleServerParams {
    pub fn new(lambda: Vec<f64>, mu: Vec<f64>, z: Vec<f64>, c: f64) -> Result<Self, ModelError> {
        let j = lambda.len();
        if j == 0 || j > model::MAX_QUEUES {
            return Err(ModelError::InvalidField {
                field: "lambda",
                reason: format!("need between 1 and {} classes", model::MAX_QUEUES),
            });
        }
        for (field, vs) in [("lambda", &lambda), ("mu", &mu), ("z", &z)] {
            if vs.len() != j {
                return Err(ModelError::InvalidField {
                    field,
                    reason: format!("expected {} entries, got {}", j, vs.len()),
                });
            }
            if let Some(pos) = vs.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(ModelError::InvalidField {
                    field,
                    reason: format!("entry {pos} must be positive, got {}", vs[pos]),
                });
            }
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(ModelError::InvalidField {
                field: "c",
                reason: format!("must be a positive finite number, got {c}"),
            });
        }
        Ok(Self { lambda, mu, z, c })
    }

    /// Parses `{"lambda": [...], "mu": [...], "z": [...], "c": float}`.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: RawSingleServer =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::new(raw.lambda, raw.mu, raw.z, raw.c)
    }

    pub fn j(&self) -> usize {
        self.lambda.len()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn alphas(&self) -> Result<Vec<f64>, RootsError> {
        (0..self.j())
            .map(|i| roots::alpha_root(self.lambda[i], self.mu[i], self.c).map(|r| r.root))
            .collect()
    }
}

/// `min_i alpha_i (z_i - x_i)` with the class to serve.
///
/// Valid as the limit value only for sufficiently large `c` (the threshold
/// is not quantified); the formula is evaluated unconditionally and output
/// should be labelled accordingly.
pub fn single_server_value(
    x: &[f64],
    params: &SingleServerParams,
) -> Result<ValueBreakdown, ValueError> {
    let j = params.j();
    if x.len() != j {
        return Err(ModelError::DimensionMismatch {
            expected: j,
            got: x.len(),
        }
        .into());
    }
    if x.iter()
        .zip(params.z())
        .any(|(&v, &b)| !(0.0..=b).contains(&v))
    {
        return Err(ModelError::OutsideDomain.into());
    }
    let alphas = params.alphas()?;
    let terms: Vec<f64> = alphas
        .iter()
        .zip(x.iter().zip(params.z()))
        .map(|(&a, (&xi, &zi))| a * (zi - xi))
        .collect();
    let value = terms.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = TIE_REL_TOL * (1.0 + value.abs());
    let mut argmin = 0u32;
    for (i, &t) in terms.iter().enumerate() {
        if t <= value + tol {
            argmin |= 1 << i;
        }
    }
    Ok(ValueBreakdown {
        terms,
        value,
        argmin,
        bottleneck: argmin.trailing_zeros() as usize,
    })
}

/// One row of the single-server priority map.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleServerRegionRow {
    pub x: Vec<f64>,
    pub value: f64,
    pub serve: u32,
}

/// Uniform grid of the open box `[0, z_i)` per class with the class-to-serve
/// set at every node.
pub fn single_server_region_map(
    params: &SingleServerParams,
    resolution: usize,
) -> Result<Vec<SingleServerRegionRow>, ValueError> {
    if resolution < 2 {
        return Err(ValueError::ResolutionTooSmall {
            min: 2,
            got: resolution,
        });
    }
    let j = params.j();
    let total: usize = resolution.pow(j as u32);
    let mut rows = Vec::with_capacity(total);
    let mut x = vec![0.0; j];
    for flat in 0..total {
        let mut rem = flat;
        for axis in (0..j).rev() {
            let k = rem % resolution;
            rem /= resolution;
            x[axis] = k as f64 / resolution as f64 * params.z()[axis];
        }
        let b = single_server_value(&x, params)?;
        rows.push(SingleServerRegionRow {
            x: x.clone(),
            value: b.value,
            serve: b.argmin,
        });
    }
    Ok(rows)
}
