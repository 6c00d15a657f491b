//! Problem instance and the geometry of the buffer rectangle.
//!
//! The state space is the rectangle
//!
//! ```text
//! G = { x : 0 <= x_1 < z_1,  0 <= x_i <= z_i  (i >= 2) }
//! ```
//!
//! open on the overflow face `x_1 = z_1` (overflow there cannot be blocked)
//! and closed on the downstream faces `x_i = z_i`, where exit is prevented
//! by idling the upstream server. The boundary splits into three parts:
//! the overflow face, the blockable faces, and the empty-queue faces.
//!
//! Service at station `i` moves the state by `-gamma_i`, where
//! `gamma_i = e_i - e_{i+1}` for `i < J` and `gamma_J = e_J`.
//!
//! Station indices are 0-based throughout the crate.

use serde::Deserialize;
use thiserror::Error;

/// Index sets are stored as `u32` bitmasks, capping the network size.
pub const MAX_QUEUES: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("state has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("station index {index} out of range for J={j}")]
    IndexOutOfRange { index: usize, j: usize },
    #[error("state lies outside the closed rectangle")]
    OutsideDomain,
    #[error("state lies on the overflow face x1 = z1; caller requires x in G")]
    OnOverflowFace,
}

/// A fixed tandem-network instance: arrival rate, service rates, buffer
/// sizes and the risk-sensitivity parameter.
///
/// Routing is fixed to tandem (station `i` feeds station `i+1`, the last
/// departs the system); the closed-form solution is specific to it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    lambda: f64,
    mu: Vec<f64>,
    z: Vec<f64>,
    c: f64,
}

#[derive(Deserialize)]
struct RawConfig {
    #[serde(rename = "J")]
    j: usize,
    lambda: f64,
    mu: Vec<f64>,
    z: Vec<f64>,
    c: f64,
}

fn require_positive(field: &'static str, v: f64) -> Result<(), ModelError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(ModelError::InvalidField {
            field,
            reason: format!("must be a positive finite number, got {v}"),
        });
    }
    Ok(())
}

impl NetworkParams {
    pub fn new(lambda: f64, mu: Vec<f64>, z: Vec<f64>, c: f64) -> Result<Self, ModelError> {
        let j = mu.len();
        if j == 0 {
            return Err(ModelError::InvalidField {
                field: "mu",
                reason: "at least one station is required".into(),
            });
        }
        if j > MAX_QUEUES {
            return Err(ModelError::InvalidField {
                field: "mu",
                reason: format!("at most {MAX_QUEUES} stations are supported"),
            });
        }
        if z.len() != j {
            return Err(ModelError::InvalidField {
                field: "z",
                reason: format!("expected {} buffer sizes, got {}", j, z.len()),
            });
        }
        // The explicit solution needs lambda > 0 even though the pre-limit
        // model would tolerate lambda = 0.
        require_positive("lambda", lambda)?;
        require_positive("c", c)?;
        for (i, &m) in mu.iter().enumerate() {
            if !(m.is_finite() && m > 0.0) {
                return Err(ModelError::InvalidField {
                    field: "mu",
                    reason: format!("mu[{i}] must be positive, got {m}"),
                });
            }
        }
        for (i, &b) in z.iter().enumerate() {
            if !(b.is_finite() && b > 0.0) {
                return Err(ModelError::InvalidField {
                    field: "z",
                    reason: format!("z[{i}] must be positive, got {b}"),
                });
            }
        }
        Ok(Self { lambda, mu, z, c })
    }

    /// Parses the JSON instance document
    /// `{"J": int, "lambda": float, "mu": [...], "z": [...], "c": float}`.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        if raw.mu.len() != raw.j {
            return Err(ModelError::InvalidField {
                field: "mu",
                reason: format!("expected {} rates (J), got {}", raw.j, raw.mu.len()),
            });
        }
        if raw.z.len() != raw.j {
            return Err(ModelError::InvalidField {
                field: "z",
                reason: format!("expected {} buffer sizes (J), got {}", raw.j, raw.z.len()),
            });
        }
        Self::new(raw.lambda, raw.mu, raw.z, raw.c)
    }

    pub fn j(&self) -> usize {
        self.mu.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `lambda + sum_i mu_i`; the natural scale for residual tolerances and
    /// the uniformization rate.
    pub fn total_rate(&self) -> f64 {
        self.lambda + self.mu.iter().sum::<f64>()
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.j() {
            return Err(ModelError::DimensionMismatch {
                expected: self.j(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Which part of the closed rectangle a point belongs to.
///
/// The three boundary tags partition the topological boundary of `G`:
/// `BoundaryO` is the overflow face `x_1 = z_1`, `BoundaryC` the blockable
/// faces `x_i = z_i` (`i >= 2`, with `x_1 < z_1`), and `BoundaryPlus` the
/// empty-queue faces (`x_i = 0` for some `i`, all buffers strictly below
/// capacity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryClass {
    Interior,
    BoundaryPlus,
    BoundaryC,
    BoundaryO,
    Outside,
}

/// The two boundary parts through which a trajectory can actually exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitFace {
    /// Overflow of the first buffer (`x_1` reaches `z_1`); unblockable.
    BoundaryO,
    /// Overflow of a downstream buffer, pushed by an upstream service.
    BoundaryC,
}

/// Classifies a nonnegative point against the rectangle of `params`.
///
/// Coordinate equality is exact: callers are expected to supply lattice
/// points `k/n` or exact buffer values, so no epsilon fuzz is applied.
pub fn classify(x: &[f64], params: &NetworkParams) -> BoundaryClass {
    let z = params.z();
    debug_assert_eq!(x.len(), z.len());
    if x.iter().any(|&v| v < 0.0) || x[0] > z[0] {
        return BoundaryClass::Outside;
    }
    if x.iter().zip(z).skip(1).any(|(&v, &b)| v > b) {
        return BoundaryClass::Outside;
    }
    if x[0] == z[0] {
        return BoundaryClass::BoundaryO;
    }
    if x.iter().zip(z).skip(1).any(|(&v, &b)| v == b) {
        return BoundaryClass::BoundaryC;
    }
    if x.contains(&0.0) {
        return BoundaryClass::BoundaryPlus;
    }
    BoundaryClass::Interior
}

/// The index sets that drive the boundary combinatorics, as bitmasks:
/// `empty = {i : x_i = 0}`, `full = {i : x_i = z_i}`, `slack` the rest.
///
/// For `x` in `G` station 0 is never in `full` (the overflow face is
/// excluded from `G`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSets {
    pub empty: u32,
    pub full: u32,
    pub slack: u32,
}

pub fn mask_contains(mask: u32, i: usize) -> bool {
    i < 32 && mask >> i & 1 == 1
}

pub fn mask_indices(mask: u32) -> impl Iterator<Item = usize> {
    (0..32usize).filter(move |&i| mask >> i & 1 == 1)
}

/// Computes the empty/full/slack sets of a point of the closed rectangle.
pub fn active_sets(x: &[f64], params: &NetworkParams) -> Result<ActiveSets, ModelError> {
    params.check_dim(x)?;
    if classify(x, params) == BoundaryClass::Outside {
        return Err(ModelError::OutsideDomain);
    }
    let z = params.z();
    let mut empty = 0u32;
    let mut full = 0u32;
    let mut slack = 0u32;
    for i in 0..x.len() {
        if x[i] == 0.0 {
            empty |= 1 << i;
        } else if x[i] == z[i] {
            full |= 1 << i;
        } else {
            slack |= 1 << i;
        }
    }
    Ok(ActiveSets { empty, full, slack })
}

/// As [`active_sets`], but additionally rejects points on the overflow face
/// (callers of the bottleneck machinery require `x` in `G`, not just its
/// closure).
pub fn active_sets_in_g(x: &[f64], params: &NetworkParams) -> Result<ActiveSets, ModelError> {
    let sets = active_sets(x, params)?;
    if x[0] == params.z()[0] {
        return Err(ModelError::OnOverflowFace);
    }
    Ok(sets)
}

/// The direction `gamma_i = e_i - e_{i+1}` (last station: `e_J`) by which
/// service at station `i` moves the state by `-gamma_i`.
pub fn gamma(i: usize, j: usize) -> Result<Vec<i64>, ModelError> {
    if i >= j {
        return Err(ModelError::IndexOutOfRange { index: i, j });
    }
    let mut g = vec![0i64; j];
    g[i] = 1;
    if i + 1 < j {
        g[i + 1] = -1;
    }
    Ok(g)
}

/// `p . gamma_i` without materializing the direction vector.
pub fn gamma_dot(p: &[f64], i: usize) -> f64 {
    if i + 1 < p.len() {
        p[i] - p[i + 1]
    } else {
        p[i]
    }
}
