//! Executable verification that the closed-form value solves the PDE in
//! the viscosity sense.
//!
//! At a point `x` of `G` every superdifferential element has the form
//! `p = -sum_{i in A(x)} nu_i b_i + delta` with `nu` a probability vector
//! on `A(x)` and `delta` nonnegative on empty queues, nonpositive on full
//! buffers, zero elsewhere (and `delta_{J+1} = 0`). Under the chain
//! constraints `p . gamma_i <= 0` the Hamiltonian restricted to these
//! elements is the concave function
//!
//! ```text
//! h(nu, delta) = c + lambda (1 - e^{sum nu_i beta_i - delta_1})
//!              + sum_i mu_i (1 - e^{-nu_i beta_i + delta_i - delta_{i+1}}),
//! ```
//!
//! so nonnegativity needs to be checked only at the extreme points of the
//! constraint polytope. Those extremes are staircases: `nu` concentrated
//! on one bottleneck candidate `k`, and `delta` equal to `beta_k` on a
//! trailing segment of the empty-queue run left of `k` (or `-beta_k` on a
//! leading segment of the full-buffer run right of `k`). Their `h`-values
//! reduce to `c` (staircase reaching the left edge), to the characteristic
//! equation of station `k` (flat staircase, exactly zero), or to a strictly
//! positive combination because candidates in `A(x)` are rate-monotone.
//!
//! The checks here enumerate those extremes exactly, then cross-check with
//! randomized draws from the constraint polytope, with the chain relaxed
//! off the empty set, and for the subdifferential side. A whole-grid
//! driver, [`pde_scan`], aggregates everything over a uniform grid of the
//! closed rectangle.

use crate::hamiltonian;
use crate::model::{self, active_sets_in_g, classify, ActiveSets, BoundaryClass, ModelError};
use crate::value::ValueFn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Absolute floor for enumerated extreme-point values.
const EXTREME_TOL: f64 = 1e-12;
/// Tolerance for the flat staircase, whose value is the characteristic
/// residual of station `k`.
const KERNEL_TOL: f64 = 1e-10;
/// Strictness margin implementing `p . gamma_i < 0` on sampled elements.
const STRICT_MARGIN: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ViscosityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("subdifferential checks require a point off the blockable faces (no full buffer)")]
    SubdiffOnBlockableFace,
    #[error("resolution must be at least {min}, got {got}")]
    ResolutionTooSmall { min: usize, got: usize },
}

/// One extreme point of the superdifferential constraint polytope.
///
/// `r = None` encodes the staircase that reaches the left edge (value
/// exactly `c`); `r = Some(k)` is the flat staircase (`delta = 0`, value
/// zero); other `r` index the station whose rate enters the `h`-value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremePoint {
    pub k: usize,
    pub r: Option<usize>,
    pub delta: Vec<f64>,
    pub h: f64,
}

/// `h` at the extreme point `(k, r)`: `c` when the staircase reaches the
/// left edge, otherwise `c + lambda (1 - e^{beta_k}) + mu_r (1 - e^{-beta_k})`
/// (zero when `r = k` by the definition of `beta_k`).
pub fn h_value(vf: &ValueFn, k: usize, r: Option<usize>) -> f64 {
    let params = vf.params();
    match r {
        None => params.c(),
        Some(r0) => {
            let beta = vf.betas()[k];
            params.c()
                + params.lambda() * (1.0 - beta.exp())
                + params.mu()[r0] * (1.0 - (-beta).exp())
        }
    }
}

/// Paper-style staircase bounds around candidate `k` (0-based): `s` is one
/// past the nearest non-empty index at or left of `k` (0 if the empty run
/// reaches the left edge), `t` one past the nearest non-full index right
/// of `k` (`J + 1` if the full run reaches the right edge). Extremes are
/// indexed by `r` in `[s, t)`, shifted down by one into `Option<usize>`.
fn staircase_bounds(k: usize, sets: &ActiveSets, j: usize) -> (usize, usize) {
    let blocked_left = sets.full | sets.slack;
    let open_right = sets.empty | sets.slack;
    let s = (0..=k)
        .rev()
        .find(|&q| model::mask_contains(blocked_left, q))
        .map_or(0, |q| q + 1);
    let t = (k + 1..j)
        .find(|&q| model::mask_contains(open_right, q))
        .map_or(j + 1, |q| q + 1);
    (s, t)
}

fn staircase_delta(k: usize, r: Option<usize>, beta: f64, j: usize) -> Vec<f64> {
    let r_edge = r.map_or(0, |r0| r0 + 1);
    (0..j)
        .map(|a| beta * (f64::from(a >= r_edge) - f64::from(a > k)))
        .collect()
}

/// Enumerates all extreme points of the superdifferential polytope at `x`.
pub fn superdiff_extremes(x: &[f64], vf: &ValueFn) -> Result<Vec<ExtremePoint>, ViscosityError> {
    let params = vf.params();
    let sets = active_sets_in_g(x, params)?;
    let a = vf.a_of_x(x)?;
    let j = params.j();
    let mut out = Vec::new();
    for k in model::mask_indices(a) {
        let (s, t) = staircase_bounds(k, &sets, j);
        for r_paper in s..t {
            let r = r_paper.checked_sub(1);
            out.push(ExtremePoint {
                k,
                r,
                delta: staircase_delta(k, r, vf.betas()[k], j),
                h: h_value(vf, k, r),
            });
        }
    }
    Ok(out)
}

/// What went wrong, if anything, during a check.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Extreme {
        k: usize,
        r: Option<usize>,
        h: f64,
    },
    Sample {
        nu: Vec<f64>,
        delta: Vec<f64>,
        h: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperdiffReport {
    pub extreme_count: usize,
    pub min_extreme_h: f64,
    pub sample_count: usize,
    pub min_sample_h: f64,
    /// Max observed |h(nu, delta) - H(p)| on the subsample where both
    /// routes were evaluated; the two expressions agree on the chain set.
    pub max_form_gap: f64,
    pub pass: bool,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedReport {
    pub sample_count: usize,
    /// Samples whose direction products were strictly negative on every
    /// empty queue; only those bind `H(p) >= 0` (the rest satisfy the
    /// supersolution inequality through the direction term). At some
    /// corners the binding set is empty and the count stays zero.
    pub binding_count: usize,
    /// Min of `H(p)` over binding samples.
    pub min_h: f64,
    pub pass: bool,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubdiffReport {
    /// No check is possible at ties: the subdifferential is empty there.
    pub empty_subdiff: bool,
    pub sample_count: usize,
    /// Samples whose direction products were strictly positive on every
    /// empty queue; only those bind the subsolution inequality.
    pub binding_count: usize,
    pub max_binding_h: f64,
    pub pass: bool,
}

/// Shared sampling state for the superdifferential polytope at one point.
struct PolytopeSampler<'a> {
    vf: &'a ValueFn,
    sets: ActiveSets,
    candidates: Vec<usize>,
    nu_beta: Vec<f64>,
    suffix: Vec<f64>,
    /// Tightest completable upper bound for each `delta_i` under the chain
    /// and sign constraints; keeps the sequential draw inside the polytope
    /// with no rejection (degenerate faces collapse to exact values).
    chain_ub: Vec<f64>,
    delta: Vec<f64>,
}

impl<'a> PolytopeSampler<'a> {
    fn new(x: &[f64], vf: &'a ValueFn) -> Result<Self, ViscosityError> {
        let sets = active_sets_in_g(x, vf.params())?;
        let candidates: Vec<usize> = model::mask_indices(vf.a_of_x(x)?).collect();
        let j = vf.params().j();
        Ok(Self {
            vf,
            sets,
            candidates,
            nu_beta: vec![0.0; j],
            suffix: vec![0.0; j + 1],
            chain_ub: vec![0.0; j + 1],
            delta: vec![0.0; j + 1],
        })
    }

    /// Uniform weights on the candidate simplex, stored premultiplied by
    /// the exponents; refreshes the suffix sums `sum_{l >= i} nu_l beta_l`
    /// and the chain upper bounds.
    fn draw_weights(&mut self, rng: &mut ChaCha12Rng) {
        let j = self.nu_beta.len();
        self.nu_beta.iter_mut().for_each(|v| *v = 0.0);
        let mut raw = [0.0f64; model::MAX_QUEUES];
        let mut total = 0.0;
        for slot in raw.iter_mut().take(self.candidates.len()) {
            let e = -(1.0 - rng.gen::<f64>()).ln();
            *slot = e;
            total += e;
        }
        for (slot, &k) in raw.iter().zip(&self.candidates) {
            self.nu_beta[k] = slot / total * self.vf.betas()[k];
        }
        self.suffix[j] = 0.0;
        self.chain_ub[j] = 0.0;
        for i in (0..j).rev() {
            self.suffix[i] = self.suffix[i + 1] + self.nu_beta[i];
            let (_, sign_hi) = self.sign_bounds(i);
            self.chain_ub[i] = sign_hi.min(self.chain_ub[i + 1] + self.nu_beta[i]);
        }
    }

    /// Draws `delta` inside the chained polytope; every constraint holds by
    /// construction because the upper bounds already account for what the
    /// remaining coordinates can absorb.
    fn draw_delta_chained(&mut self, rng: &mut ChaCha12Rng) {
        let j = self.nu_beta.len();
        for i in 0..j {
            let (sign_lo, _) = self.sign_bounds(i);
            let chain_lo = if i == 0 {
                f64::NEG_INFINITY
            } else {
                self.delta[i - 1] - self.nu_beta[i - 1]
            };
            let lo = sign_lo.max(chain_lo);
            let hi = self.chain_ub[i];
            debug_assert!(lo <= hi);
            self.delta[i] = if hi > lo {
                lo + rng.gen::<f64>() * (hi - lo)
            } else {
                hi
            };
        }
        self.delta[j] = 0.0;
    }

    /// Draws `delta` with only the sign constraints (the chain dropped off
    /// the empty set); reports whether the draw is *binding*, i.e. has
    /// strictly negative direction products on every empty queue.
    fn draw_delta_relaxed(&mut self, rng: &mut ChaCha12Rng) -> bool {
        let j = self.nu_beta.len();
        let cap_down = 3.0 * self.vf.betas().iter().cloned().fold(0.0, f64::max);
        for i in 0..j {
            self.delta[i] = if model::mask_contains(self.sets.empty, i) {
                rng.gen::<f64>() * self.suffix[0]
            } else if model::mask_contains(self.sets.full, i) {
                -rng.gen::<f64>() * cap_down
            } else {
                0.0
            };
        }
        self.delta[j] = 0.0;
        model::mask_indices(self.sets.empty)
            .all(|i| -self.nu_beta[i] + self.delta[i] - self.delta[i + 1] <= -STRICT_MARGIN)
    }

    fn sign_bounds(&self, i: usize) -> (f64, f64) {
        if model::mask_contains(self.sets.empty, i) {
            (0.0, f64::INFINITY)
        } else if model::mask_contains(self.sets.full, i) {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (0.0, 0.0)
        }
    }

    /// `h(nu, delta)` of the chained form.
    fn h_chained(&self) -> f64 {
        let params = self.vf.params();
        let j = self.nu_beta.len();
        let mut h = params.c() + params.lambda() * (1.0 - (self.suffix[0] - self.delta[0]).exp());
        for i in 0..j {
            h += params.mu()[i]
                * (1.0 - (-self.nu_beta[i] + self.delta[i] - self.delta[i + 1]).exp());
        }
        h
    }

    /// The gradient candidate `p_i = delta_i - sum_{l >= i} nu_l beta_l`.
    fn fill_p(&self, p: &mut [f64]) {
        for i in 0..p.len() {
            p[i] = self.delta[i] - self.suffix[i];
        }
    }

    fn nu(&self) -> Vec<f64> {
        self.nu_beta
            .iter()
            .enumerate()
            .map(|(i, &nb)| {
                if nb == 0.0 {
                    0.0
                } else {
                    nb / self.vf.betas()[i]
                }
            })
            .collect()
    }
}

fn check_superdifferential_with(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SuperdiffReport, ViscosityError> {
    let params = vf.params();
    let extremes = superdiff_extremes(x, vf)?;
    let mut min_extreme_h = f64::INFINITY;
    let mut pass = true;
    let mut violation = None;

    for e in &extremes {
        min_extreme_h = min_extreme_h.min(e.h);
        let ok = match e.r {
            None => e.h == params.c(),
            Some(r0) if r0 == e.k => e.h.abs() <= KERNEL_TOL,
            _ => e.h >= -EXTREME_TOL,
        };
        if !ok && violation.is_none() {
            pass = false;
            violation = Some(Violation::Extreme {
                k: e.k,
                r: e.r,
                h: e.h,
            });
        }
    }

    let mut sampler = PolytopeSampler::new(x, vf)?;
    let mut p = vec![0.0; params.j()];
    let mut min_sample_h = f64::INFINITY;
    let mut max_form_gap = 0.0f64;
    for drawn in 0..samples {
        sampler.draw_weights(rng);
        sampler.draw_delta_chained(rng);
        let h = sampler.h_chained();
        min_sample_h = min_sample_h.min(h);
        if drawn % 16 == 0 {
            sampler.fill_p(&mut p);
            let big_h = hamiltonian::hamiltonian(&p, params);
            max_form_gap = max_form_gap.max((h - big_h).abs());
        }
        // the supersolution inequality on the sample, and concavity: no
        // interior sample may undercut the worst extreme point
        if (h < -tol || h < min_extreme_h - 1e-9) && violation.is_none() {
            pass = false;
            violation = Some(Violation::Sample {
                nu: sampler.nu(),
                delta: sampler.delta.clone(),
                h,
            });
        }
    }

    Ok(SuperdiffReport {
        extreme_count: extremes.len(),
        min_extreme_h,
        sample_count: samples,
        min_sample_h,
        max_form_gap,
        pass,
        violation,
    })
}

fn check_superdiff_relaxed_with(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RelaxedReport, ViscosityError> {
    let params = vf.params();
    let mut sampler = PolytopeSampler::new(x, vf)?;
    let mut p = vec![0.0; params.j()];
    let mut min_h = f64::INFINITY;
    let mut binding_count = 0usize;
    let mut pass = true;
    let mut violation = None;
    for _ in 0..samples {
        sampler.draw_weights(rng);
        let binding = sampler.draw_delta_relaxed(rng);
        if !binding {
            // some empty-queue direction product is nonnegative, so the
            // supersolution inequality holds through that term
            continue;
        }
        binding_count += 1;
        sampler.fill_p(&mut p);
        let h = hamiltonian::hamiltonian(&p, params);
        min_h = min_h.min(h);
        if h < -tol && violation.is_none() {
            pass = false;
            violation = Some(Violation::Sample {
                nu: sampler.nu(),
                delta: sampler.delta.clone(),
                h,
            });
        }
    }
    Ok(RelaxedReport {
        sample_count: samples,
        binding_count,
        min_h,
        pass,
        violation,
    })
}

fn check_subdifferential_with(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SubdiffReport, ViscosityError> {
    let params = vf.params();
    let sets = active_sets_in_g(x, params)?;
    if sets.full != 0 {
        return Err(ViscosityError::SubdiffOnBlockableFace);
    }
    let breakdown = vf.breakdown(x)?;
    if breakdown.argmin.count_ones() > 1 {
        // minimum of smooth functions: ties have no subdifferential
        return Ok(SubdiffReport {
            empty_subdiff: true,
            sample_count: 0,
            binding_count: 0,
            max_binding_h: f64::NEG_INFINITY,
            pass: true,
        });
    }
    let k = breakdown.bottleneck;
    let j = params.j();
    let cap = 3.0 * vf.betas().iter().cloned().fold(0.0, f64::max);
    let base: Vec<f64> = vf.b_vector(k).iter().map(|v| -v).collect();
    let mut p = vec![0.0; j];

    // with no empty queue the element is unique: p = -b_k
    let effective = if sets.empty == 0 { 1 } else { samples };
    let mut binding_count = 0usize;
    let mut max_binding_h = f64::NEG_INFINITY;
    let mut pass = true;
    for _ in 0..effective {
        p.copy_from_slice(&base);
        for i in model::mask_indices(sets.empty) {
            p[i] -= rng.gen::<f64>() * cap;
        }
        let binding = model::mask_indices(sets.empty).all(|i| model::gamma_dot(&p, i) > 0.0);
        if binding {
            binding_count += 1;
            let h = hamiltonian::hamiltonian(&p, params);
            max_binding_h = max_binding_h.max(h);
            if h > tol {
                pass = false;
            }
        }
    }
    Ok(SubdiffReport {
        empty_subdiff: false,
        sample_count: effective,
        binding_count,
        max_binding_h,
        pass,
    })
}

pub fn check_superdifferential(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<SuperdiffReport, ViscosityError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    check_superdifferential_with(x, vf, tol, samples, &mut rng)
}

pub fn check_superdiff_relaxed(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<RelaxedReport, ViscosityError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    check_superdiff_relaxed_with(x, vf, tol, samples, &mut rng)
}

pub fn check_subdifferential(
    x: &[f64],
    vf: &ValueFn,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<SubdiffReport, ViscosityError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    check_subdifferential_with(x, vf, tol, samples, &mut rng)
}

/// Aggregate of a whole-grid PDE verification run.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeScanSummary {
    pub resolution: usize,
    pub points: usize,
    /// Max |H(-b_j)| over interior grid points with a unique minimizer.
    pub max_residual_interior: f64,
    /// Worst violation magnitude across every super- and subdifferential
    /// check (0 when everything held).
    pub max_h_violation: f64,
    /// Max |V| over overflow-face grid points (must vanish there).
    pub boundary_o_max_abs_v: f64,
    /// Points on blockable faces where the subdifferential check does not
    /// apply and was skipped.
    pub subdiff_skipped: usize,
    pub pass: bool,
}

struct PointOutcome {
    residual_interior: f64,
    h_violation: f64,
    boundary_o_abs_v: f64,
    subdiff_skipped: usize,
    pass: bool,
}

fn scan_point(
    flat: usize,
    vf: &ValueFn,
    resolution: usize,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<PointOutcome, ViscosityError> {
    let params = vf.params();
    let j = params.j();
    let z = params.z();
    let mut x = vec![0.0; j];
    let mut rem = flat;
    for axis in (0..j).rev() {
        let k = rem % resolution;
        rem /= resolution;
        x[axis] = k as f64 / (resolution - 1) as f64 * z[axis];
    }

    let mut out = PointOutcome {
        residual_interior: 0.0,
        h_violation: 0.0,
        boundary_o_abs_v: 0.0,
        subdiff_skipped: 0,
        pass: true,
    };

    if x[0] == z[0] {
        out.boundary_o_abs_v = vf.value(&x).abs();
        out.pass = out.boundary_o_abs_v <= EXTREME_TOL;
        return Ok(out);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(flat as u64);

    let sup = check_superdifferential_with(&x, vf, tol, samples, &mut rng)?;
    out.pass &= sup.pass;
    out.h_violation = out
        .h_violation
        .max(-sup.min_extreme_h)
        .max(-sup.min_sample_h);

    let relaxed = check_superdiff_relaxed_with(&x, vf, tol, samples, &mut rng)?;
    out.pass &= relaxed.pass;
    out.h_violation = out.h_violation.max(-relaxed.min_h);

    let sets = active_sets_in_g(&x, params)?;
    if sets.full == 0 {
        let sub = check_subdifferential_with(&x, vf, tol, samples, &mut rng)?;
        out.pass &= sub.pass;
        if sub.binding_count > 0 {
            out.h_violation = out.h_violation.max(sub.max_binding_h);
        }
    } else {
        out.subdiff_skipped = 1;
    }

    if classify(&x, params) == BoundaryClass::Interior {
        let argmin = vf.argmin_mask(&x)?;
        if argmin.count_ones() == 1 {
            let jdx = argmin.trailing_zeros() as usize;
            let p: Vec<f64> = vf.b_vector(jdx).iter().map(|v| -v).collect();
            out.residual_interior = hamiltonian::hamiltonian(&p, params).abs();
            out.pass &= out.residual_interior <= KERNEL_TOL;
        }
    }

    out.h_violation = out.h_violation.max(0.0);
    Ok(out)
}

/// Runs every check over a uniform grid of the closed rectangle
/// (`resolution` points per axis, spacing `z_i / (resolution - 1)`).
///
/// Grid points are processed in parallel with one deterministic RNG stream
/// per point, so the summary does not depend on the thread count.
pub fn pde_scan(
    vf: &ValueFn,
    resolution: usize,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<PdeScanSummary, ViscosityError> {
    if resolution < 3 {
        return Err(ViscosityError::ResolutionTooSmall {
            min: 3,
            got: resolution,
        });
    }
    let total = resolution.pow(vf.params().j() as u32);
    let outcomes: Result<Vec<PointOutcome>, ViscosityError> = (0..total)
        .into_par_iter()
        .map(|flat| scan_point(flat, vf, resolution, tol, samples, seed))
        .collect();
    let outcomes = outcomes?;

    let mut summary = PdeScanSummary {
        resolution,
        points: total,
        max_residual_interior: 0.0,
        max_h_violation: 0.0,
        boundary_o_max_abs_v: 0.0,
        subdiff_skipped: 0,
        pass: true,
    };
    for o in outcomes {
        summary.max_residual_interior = summary.max_residual_interior.max(o.residual_interior);
        summary.max_h_violation = summary.max_h_violation.max(o.h_violation);
        summary.boundary_o_max_abs_v = summary.boundary_o_max_abs_v.max(o.boundary_o_abs_v);
        summary.subdiff_skipped += o.subdiff_skipped;
        summary.pass &= o.pass;
    }
    Ok(summary)
}
