//! Pre-limit risk-sensitive dynamic program on the scaled lattice.
//!
//! For scale `n` the state space is the lattice `G^n = (1/n) Z_+^J`
//! intersected with the rectangle: axis 1 stops strictly below `z_1`,
//! the other axes include their caps. With killing rate `c` per unit of
//! scaled time, conditioning the cost `E exp(-n c sigma)` on the first
//! jump of the uniformized chain gives the ratio fixed point
//!
//! ```text
//! W(x) = min_u [ lambda W(x + e_1/n) + sum_i u_i mu_i 1{x_i > 0} W(x - gamma_i/n) ]
//!              / (c + lambda + sum_i u_i mu_i 1{x_i > 0}),
//! ```
//!
//! with `W = 1` on every edge that leaves `G` (the `n` in the jump rates
//! cancels in the ratio). The update is monotone and a sup-norm
//! contraction with factor at most
//! `rho = (lambda + sum mu) / (c + lambda + sum mu) < 1`, so synchronous
//! value-iteration sweeps converge geometrically from any start; the stop
//! rule `delta <= tol (1 - rho) / rho` guarantees a sup-norm error of at
//! most `tol` at the fixed point. The normalized value is
//! `V^n = -(1/n) log W`, which converges to the closed-form limit as `n`
//! grows.
//!
//! Minimization is over the vertex controls (subsets of the stations with
//! work available); the ratio is monotone in each `u_i` separately, so
//! vertices suffice. A warm start seeds `W` with `exp(-n V)` from the
//! limit value.

use crate::model::{classify, BoundaryClass, ExitFace, ModelError, NetworkParams};
use crate::value::ValueFn;
use rayon::prelude::*;
use thiserror::Error;

/// Serial sweeps below this state count; parallel sweeps above.
const PARALLEL_SWEEP_THRESHOLD: usize = 2048;
/// Refuse lattices above this many states.
const MAX_STATES: usize = 50_000_000;
/// Snap `n z_i` to an integer when within this relative distance, so that
/// intended-integral products survive floating-point rounding.
const GRID_SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("lattice for n={n} would have {states} states (cap {max})")]
    LatticeTooLarge { n: u32, states: usize, max: usize },
    #[error("iteration cap {max_iter} reached; last sweep still moved {final_delta:e}")]
    IterationLimit { max_iter: usize, final_delta: f64 },
    #[error("point is not on the n={n} lattice")]
    NotLatticePoint { n: u32 },
}

/// The scaled lattice `G^n` with row-major indexing (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    n: u32,
    counts: Vec<usize>,
    strides: Vec<usize>,
    /// Whether the top lattice index of each axis sits exactly on `z_i`
    /// (false on axis 0 by construction, and on axes whose `n z_i` is not
    /// integral).
    cap_is_full: Vec<bool>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= GRID_SNAP_TOL * v.abs().max(1.0) {
        r
    } else {
        v
    }
}

impl Lattice {
    pub fn new(params: &NetworkParams, n: u32) -> Result<Self, DpError> {
        assert!(n >= 1, "scale must be positive");
        let j = params.j();
        let z = params.z();
        let nf = f64::from(n);
        let mut counts = Vec::with_capacity(j);
        let mut cap_is_full = Vec::with_capacity(j);
        for (axis, &zi) in z.iter().enumerate() {
            let scaled = snap(nf * zi);
            if axis == 0 {
                // strictly below z_1
                counts.push(scaled.ceil() as usize);
                cap_is_full.push(false);
            } else {
                let top = scaled.floor() as usize;
                counts.push(top + 1);
                cap_is_full.push(top as f64 / nf == zi);
            }
        }
        let mut states = 1usize;
        for &c in &counts {
            states = states.saturating_mul(c.max(1));
        }
        if states > MAX_STATES {
            return Err(DpError::LatticeTooLarge {
                n,
                states,
                max: MAX_STATES,
            });
        }
        let mut strides = vec![1usize; j];
        for axis in (0..j.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * counts[axis + 1];
        }
        Ok(Self {
            n,
            counts,
            strides,
            cap_is_full,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn cap_is_full(&self) -> &[bool] {
        &self.cap_is_full
    }

    pub fn ks_into(&self, flat: usize, ks: &mut [usize]) {
        let mut rem = flat;
        for axis in 0..self.counts.len() {
            ks[axis] = rem / self.strides[axis];
            rem %= self.strides[axis];
        }
    }

    pub fn flat_of_ks(&self, ks: &[usize]) -> usize {
        ks.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    pub fn coords_into(&self, flat: usize, x: &mut [f64]) {
        let mut rem = flat;
        let nf = f64::from(self.n);
        for axis in 0..self.counts.len() {
            x[axis] = (rem / self.strides[axis]) as f64 / nf;
            rem %= self.strides[axis];
        }
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.counts.len()];
        self.coords_into(flat, &mut x);
        x
    }

    /// Flat index of an exact lattice point.
    pub fn exact(&self, x: &[f64]) -> Result<usize, DpError> {
        let nf = f64::from(self.n);
        let mut flat = 0usize;
        for axis in 0..self.counts.len() {
            let scaled = x[axis] * nf;
            let k = scaled.round();
            if (scaled - k).abs() > GRID_SNAP_TOL * scaled.abs().max(1.0)
                || k < 0.0
                || (k as usize) >= self.counts[axis]
            {
                return Err(DpError::NotLatticePoint { n: self.n });
            }
            flat += k as usize * self.strides[axis];
        }
        Ok(flat)
    }

    /// Nearest lattice point, clamped into the grid.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let nf = f64::from(self.n);
        let mut flat = 0usize;
        for axis in 0..self.counts.len() {
            let k = (x[axis] * nf).round().max(0.0) as usize;
            flat += k.min(self.counts[axis] - 1) * self.strides[axis];
        }
        flat
    }
}

/// Target of a single transition edge, in user coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpTarget {
    State(Vec<f64>),
    Exit(ExitFace),
}

/// The outgoing edges of one lattice state under a vertex control: the
/// arrival edge plus one service edge per controlled station with work.
/// Rates are unscaled (the factor `n` cancels in the Bellman ratio).
pub fn transitions(
    params: &NetworkParams,
    n: u32,
    x: &[f64],
    control: u32,
) -> Result<Vec<(JumpTarget, f64)>, DpError> {
    params.check_dim(x).map_err(DpError::from)?;
    let lattice = Lattice::new(params, n)?;
    let flat = lattice.exact(x)?;
    let j = params.j();
    let mut ks = vec![0usize; j];
    lattice.ks_into(flat, &mut ks);
    let nf = f64::from(n);

    let mut out = Vec::with_capacity(j + 1);
    // arrival
    if ks[0] + 1 >= lattice.counts[0] {
        out.push((JumpTarget::Exit(ExitFace::BoundaryO), params.lambda()));
    } else {
        let mut tgt = x.to_vec();
        tgt[0] = (ks[0] + 1) as f64 / nf;
        out.push((JumpTarget::State(tgt), params.lambda()));
    }
    // services
    for i in 0..j {
        if control >> i & 1 == 0 || ks[i] == 0 {
            continue;
        }
        let rate = params.mu()[i];
        if i + 1 < j && ks[i + 1] + 1 >= lattice.counts[i + 1] {
            // the slot above the downstream cap is outside the rectangle
            out.push((JumpTarget::Exit(ExitFace::BoundaryC), rate));
        } else {
            let mut tgt = x.to_vec();
            tgt[i] = (ks[i] - 1) as f64 / nf;
            if i + 1 < j {
                tgt[i + 1] = (ks[i + 1] + 1) as f64 / nf;
            }
            out.push((JumpTarget::State(tgt), rate));
        }
    }
    Ok(out)
}

const EDGE_EXIT: usize = usize::MAX;
const EDGE_INACTIVE: usize = usize::MAX - 1;

/// Precomputed sweep machinery for one `(params, n)` pair.
#[derive(Debug, Clone)]
pub struct BellmanOperator {
    params: NetworkParams,
    lattice: Lattice,
    arrival: Vec<usize>,
    service: Vec<usize>,
    active: Vec<u32>,
}

impl BellmanOperator {
    pub fn new(params: &NetworkParams, n: u32) -> Result<Self, DpError> {
        let lattice = Lattice::new(params, n)?;
        let j = params.j();
        let states = lattice.len();
        let mut arrival = vec![EDGE_EXIT; states];
        let mut service = vec![EDGE_INACTIVE; states * j];
        let mut active = vec![0u32; states];
        let mut ks = vec![0usize; j];
        for s in 0..states {
            lattice.ks_into(s, &mut ks);
            if ks[0] + 1 < lattice.counts[0] {
                arrival[s] = s + lattice.strides[0];
            }
            for i in 0..j {
                if ks[i] == 0 {
                    continue;
                }
                active[s] |= 1 << i;
                let slot = s * j + i;
                if i + 1 < j {
                    if ks[i + 1] + 1 < lattice.counts[i + 1] {
                        service[slot] = s - lattice.strides[i] + lattice.strides[i + 1];
                    } else {
                        service[slot] = EDGE_EXIT;
                    }
                } else {
                    service[slot] = s - lattice.strides[i];
                }
            }
        }
        Ok(Self {
            params: params.clone(),
            lattice,
            arrival,
            service,
            active,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// `(lambda + sum mu) / (c + lambda + sum mu)`, the sup-norm
    /// contraction factor of one sweep.
    pub fn contraction_factor(&self) -> f64 {
        let total = self.params.total_rate();
        total / (self.params.c() + total)
    }

    fn edge_value(&self, edge: usize, w: &[f64]) -> f64 {
        if edge == EDGE_EXIT {
            1.0
        } else {
            w[edge]
        }
    }

    /// Bellman ratio at `state` for one vertex control (restricted to
    /// stations with work; inactive bits contribute nothing).
    pub fn ratio(&self, state: usize, control: u32, w: &[f64]) -> f64 {
        let j = self.params.j();
        let mask = control & self.active[state];
        let mut num = self.params.lambda() * self.edge_value(self.arrival[state], w);
        let mut den = self.params.c() + self.params.lambda();
        for i in 0..j {
            if mask >> i & 1 == 1 {
                let mu = self.params.mu()[i];
                num += mu * self.edge_value(self.service[state * j + i], w);
                den += mu;
            }
        }
        num / den
    }

    /// Bellman ratio at `state` for a fractional control in `[0,1]^J`.
    pub fn ratio_fractional(&self, state: usize, u: &[f64], w: &[f64]) -> f64 {
        let j = self.params.j();
        let mut num = self.params.lambda() * self.edge_value(self.arrival[state], w);
        let mut den = self.params.c() + self.params.lambda();
        for i in 0..j {
            if self.active[state] >> i & 1 == 1 && u[i] > 0.0 {
                let mu = u[i] * self.params.mu()[i];
                num += mu * self.edge_value(self.service[state * j + i], w);
                den += mu;
            }
        }
        num / den
    }

    fn best_control(&self, state: usize, w: &[f64]) -> (f64, u32) {
        let active = self.active[state];
        // enumerate subsets of the active set, starting from serve-all so
        // that exact ties prefer serving
        let mut best = self.ratio(state, active, w);
        let mut best_mask = active;
        let mut sub = active;
        while sub != 0 {
            sub = (sub - 1) & active;
            let r = self.ratio(state, sub, w);
            if r < best {
                best = r;
                best_mask = sub;
            }
            if sub == 0 {
                break;
            }
        }
        (best, best_mask)
    }

    /// One synchronous sweep of the minimizing update; returns the new
    /// table and the minimizing vertex control per state.
    pub fn apply(&self, w: &[f64]) -> (Vec<f64>, Vec<u32>) {
        let states = self.lattice.len();
        let pairs: Vec<(f64, u32)> = if states >= PARALLEL_SWEEP_THRESHOLD {
            (0..states)
                .into_par_iter()
                .map(|s| self.best_control(s, w))
                .collect()
        } else {
            (0..states).map(|s| self.best_control(s, w)).collect()
        };
        let mut new_w = Vec::with_capacity(states);
        let mut policy = Vec::with_capacity(states);
        for (v, m) in pairs {
            new_w.push(v);
            policy.push(m);
        }
        (new_w, policy)
    }

    /// One synchronous sweep under a fixed per-state vertex control.
    pub fn apply_policy(&self, w: &[f64], policy: &[u32]) -> Vec<f64> {
        let states = self.lattice.len();
        if states >= PARALLEL_SWEEP_THRESHOLD {
            (0..states)
                .into_par_iter()
                .map(|s| self.ratio(s, policy[s], w))
                .collect()
        } else {
            (0..states).map(|s| self.ratio(s, policy[s], w)).collect()
        }
    }

    pub fn active_mask(&self, state: usize) -> u32 {
        self.active[state]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: bool,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
            warm_start: false,
        }
    }
}

/// Solved table on the lattice.
#[derive(Debug, Clone)]
pub struct DpResult {
    lattice: Lattice,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub policy: Vec<u32>,
    pub iterations: usize,
    pub final_delta: f64,
}

impl DpResult {
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn w_at(&self, x: &[f64]) -> Result<f64, DpError> {
        Ok(self.w[self.lattice.exact(x)?])
    }

    pub fn v_at(&self, x: &[f64]) -> Result<f64, DpError> {
        Ok(self.v[self.lattice.exact(x)?])
    }

    pub fn policy_at(&self, x: &[f64]) -> Result<u32, DpError> {
        Ok(self.policy[self.lattice.exact(x)?])
    }
}

fn sup_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sup_rel_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn iterate<F>(
    op: &BellmanOperator,
    mut w: Vec<f64>,
    opts: &DpOptions,
    mut sweep: F,
) -> Result<(Vec<f64>, usize, f64), DpError>
where
    F: FnMut(&BellmanOperator, &[f64]) -> Vec<f64>,
{
    let rho = op.contraction_factor();
    let threshold = opts.tol * (1.0 - rho) / rho;
    let mut delta = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        let next = sweep(op, &w);
        delta = sup_delta(&next, &w);
        // the absolute test guarantees sup-norm error <= tol; states deep
        // in the rectangle have exponentially small W, so also wait for
        // relative settling or -(1/n) log W is meaningless there
        let rel_delta = sup_rel_delta(&next, &w);
        w = next;
        if delta <= threshold && rel_delta <= threshold {
            return Ok((w, iter, delta));
        }
    }
    Err(DpError::IterationLimit {
        max_iter: opts.max_iter,
        final_delta: delta,
    })
}

fn initial_table(op: &BellmanOperator, vf: &ValueFn, warm: bool) -> Vec<f64> {
    let states = op.lattice().len();
    if !warm {
        return vec![1.0; states];
    }
    let nf = f64::from(op.lattice().n());
    let mut x = vec![0.0; vf.params().j()];
    (0..states)
        .map(|s| {
            op.lattice().coords_into(s, &mut x);
            (-nf * vf.value(&x)).exp()
        })
        .collect()
}

/// Value iteration for the minimizing fixed point.
pub fn solve(vf: &ValueFn, n: u32, opts: &DpOptions) -> Result<DpResult, DpError> {
    let op = BellmanOperator::new(vf.params(), n)?;
    let w0 = initial_table(&op, vf, opts.warm_start);
    let (w, iterations, final_delta) = iterate(&op, w0, opts, |op, w| op.apply(w).0)?;
    let nf = f64::from(n);
    let (_, policy) = op.apply(&w);
    let v = w.iter().map(|&wi| -wi.ln() / nf).collect();
    Ok(DpResult {
        lattice: op.lattice,
        w,
        v,
        policy,
        iterations,
        final_delta,
    })
}

/// Fixed point of a stationary deterministic policy (no minimization).
/// The policy is sampled once per lattice state from scaled coordinates.
pub fn evaluate_policy<F>(
    vf: &ValueFn,
    n: u32,
    policy_fn: F,
    opts: &DpOptions,
) -> Result<DpResult, DpError>
where
    F: Fn(&[f64]) -> u32,
{
    let op = BellmanOperator::new(vf.params(), n)?;
    let states = op.lattice().len();
    let mut x = vec![0.0; vf.params().j()];
    let mut policy = Vec::with_capacity(states);
    for s in 0..states {
        op.lattice().coords_into(s, &mut x);
        policy.push(policy_fn(&x) & op.active_mask(s));
    }
    let w0 = initial_table(&op, vf, opts.warm_start);
    let (w, iterations, final_delta) = iterate(&op, w0, opts, |op, w| op.apply_policy(w, &policy))?;
    let nf = f64::from(n);
    let v = w.iter().map(|&wi| -wi.ln() / nf).collect();
    Ok(DpResult {
        lattice: op.lattice,
        w,
        v,
        policy,
        iterations,
        final_delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: u32,
    pub x_on_grid: Vec<f64>,
    pub vn: f64,
    pub v_limit: f64,
    pub gap: f64,
}

/// Solves the DP across scales and tabulates `V^n` at (the nearest lattice
/// point to) `x0` against the limit value. Points on the overflow face
/// exit immediately: their row is identically zero.
pub fn convergence_study(
    vf: &ValueFn,
    n_list: &[u32],
    x0: &[f64],
) -> Result<Vec<ConvergenceRow>, DpError> {
    vf.params().check_dim(x0).map_err(DpError::from)?;
    if classify(x0, vf.params()) == BoundaryClass::Outside {
        return Err(DpError::Model(ModelError::OutsideDomain));
    }
    let on_overflow_face = x0[0] >= vf.params().z()[0];
    let v_limit = vf.value(x0);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        if on_overflow_face {
            rows.push(ConvergenceRow {
                n,
                x_on_grid: x0.to_vec(),
                vn: 0.0,
                v_limit,
                gap: v_limit.abs(),
            });
            continue;
        }
        let opts = DpOptions {
            warm_start: true,
            ..DpOptions::default()
        };
        let result = solve(vf, n, &opts)?;
        let flat = result.lattice().nearest(x0);
        let x_on_grid = result.lattice().coords(flat);
        let vn = result.v[flat];
        rows.push(ConvergenceRow {
            n,
            x_on_grid,
            vn,
            v_limit,
            gap: (vn - v_limit).abs(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vf(lambda: f64, mu: Vec<f64>, z: Vec<f64>, c: f64) -> ValueFn {
        ValueFn::new(NetworkParams::new(lambda, mu, z, c).unwrap()).unwrap()
    }

    fn vf_j1() -> ValueFn {
        vf(1.0, vec![2.0], vec![1.0], 1.0)
    }

    fn vf_j2() -> ValueFn {
        vf(1.0, vec![2.0, 1.0], vec![1.0, 1.0], 1.0)
    }

    #[test]
    fn lattice_counts_and_caps() {
        let p = NetworkParams::new(1.0, vec![2.0, 1.0], vec![1.0, 1.0], 1.0).unwrap();
        let lat = Lattice::new(&p, 4).unwrap();
        assert_eq!(lat.counts(), &[4, 5]);
        assert_eq!(lat.cap_is_full(), &[false, true]);
        assert_eq!(lat.len(), 20);

        // non-integral caps leave the top shy of z
        let p = NetworkParams::new(1.0, vec![2.0, 1.0], vec![0.7, 0.7], 1.0).unwrap();
        let lat = Lattice::new(&p, 4).unwrap();
        assert_eq!(lat.counts(), &[3, 3]);
        assert_eq!(lat.cap_is_full(), &[false, false]);

        // products that only just miss an integer snap back
        let p = NetworkParams::new(1.0, vec![2.0], vec![0.3], 1.0).unwrap();
        let lat = Lattice::new(&p, 10).unwrap();
        assert_eq!(lat.counts(), &[3]);
    }

    #[test]
    fn lattice_round_trips() {
        let p = NetworkParams::new(1.0, vec![2.0, 1.0], vec![1.0, 2.0], 1.0).unwrap();
        let lat = Lattice::new(&p, 3).unwrap();
        let mut ks = [0usize; 2];
        for s in 0..lat.len() {
            lat.ks_into(s, &mut ks);
            assert_eq!(lat.flat_of_ks(&ks), s);
            let x = lat.coords(s);
            assert_eq!(lat.exact(&x).unwrap(), s);
            assert_eq!(lat.nearest(&x), s);
        }
        assert!(lat.exact(&[0.17, 0.0]).is_err());
    }

    #[test]
    fn transitions_examples() {
        let p = NetworkParams::new(1.0, vec![2.0, 1.0], vec![1.0, 1.0], 1.0).unwrap();
        // origin: only the arrival edge regardless of control
        let t = transitions(&p, 2, &[0.0, 0.0], 0b11).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0], (JumpTarget::State(vec![0.5, 0.0]), 1.0));

        // serving station 0 at full downstream buffer exits through the
        // blockable face
        let t = transitions(&p, 2, &[0.5, 1.0], 0b11).unwrap();
        let service0 = t
            .iter()
            .find(|(_, rate)| *rate == 2.0)
            .expect("service edge");
        assert_eq!(service0.0, JumpTarget::Exit(ExitFace::BoundaryC));

        // arrival at the top of axis 0 exits through the overflow face
        let t = transitions(&p, 2, &[0.5, 0.0], 0b00).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0], (JumpTarget::Exit(ExitFace::BoundaryO), 1.0));

        // J = 1, n = 1: the single state exits immediately on arrival
        let p1 = NetworkParams::new(1.0, vec![2.0], vec![1.0], 1.0).unwrap();
        let t = transitions(&p1, 1, &[0.0], 0b1).unwrap();
        assert_eq!(t[0], (JumpTarget::Exit(ExitFace::BoundaryO), 1.0));
    }

    #[test]
    fn hand_fixed_point_n1() {
        let r = solve(&vf_j1(), 1, &DpOptions::default()).unwrap();
        assert_eq!(r.lattice().len(), 1);
        assert!((r.w[0] - 0.5).abs() < 1e-10);
        assert!((r.v[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn hand_fixed_point_n2() {
        let r = solve(&vf_j1(), 2, &DpOptions::default()).unwrap();
        assert!((r.w_at(&[0.0]).unwrap() - 1.0 / 6.0).abs() < 1e-10);
        assert!((r.w_at(&[0.5]).unwrap() - 1.0 / 3.0).abs() < 1e-10);
        assert!((r.v_at(&[0.0]).unwrap() - 6.0f64.ln() / 2.0).abs() < 1e-9);
        // optimal policy serves the nonempty state
        assert_eq!(r.policy_at(&[0.5]).unwrap(), 0b1);
    }

    #[test]
    fn serves_whenever_nonempty_j1() {
        for n in [2u32, 5, 16] {
            let r = solve(&vf_j1(), n, &DpOptions::default()).unwrap();
            for s in 0..r.lattice().len() {
                let x = r.lattice().coords(s);
                if x[0] > 0.0 {
                    assert_eq!(r.policy[s], 0b1, "n={n} x={x:?}");
                }
            }
        }
    }

    #[test]
    fn warm_start_agrees_and_saves_iterations() {
        for (vf, n) in [(vf_j1(), 16u32), (vf_j2(), 8u32)] {
            let cold = solve(&vf, n, &DpOptions::default()).unwrap();
            let warm = solve(
                &vf,
                n,
                &DpOptions {
                    warm_start: true,
                    ..DpOptions::default()
                },
            )
            .unwrap();
            let dist = sup_delta(&cold.w, &warm.w);
            assert!(dist <= 2.0 * 1e-10, "tables differ by {dist:e}");
            assert!(
                warm.iterations <= cold.iterations,
                "warm {} vs cold {}",
                warm.iterations,
                cold.iterations
            );
        }
    }

    #[test]
    fn policy_evaluation_consistency() {
        let vf = vf_j2();
        let n = 4;
        let opt = solve(&vf, n, &DpOptions::default()).unwrap();
        let lattice = opt.lattice().clone();
        let table = opt.policy.clone();
        let replay = evaluate_policy(
            &vf,
            n,
            |x| table[lattice.exact(x).unwrap()],
            &DpOptions::default(),
        )
        .unwrap();
        assert!(sup_delta(&opt.w, &replay.w) <= 2.0 * 1e-10);

        // any fixed policy sits above the optimal table
        let serve_all = evaluate_policy(&vf, n, |_| u32::MAX, &DpOptions::default()).unwrap();
        for s in 0..opt.w.len() {
            assert!(serve_all.w[s] >= opt.w[s] - 1e-12);
        }
    }

    #[test]
    fn serving_beats_idling_the_bottleneck_at_the_origin() {
        // idling station 0 reduces exit to a pure birth chain on axis 0:
        // W(0,0) = (lambda/(c+lambda))^(n z1); serving keeps W near optimal
        let vf = vf_j2();
        let n = 8;
        let serve_all = evaluate_policy(&vf, n, |_| 0b11, &DpOptions::default()).unwrap();
        let idle0 = evaluate_policy(&vf, n, |_| 0b10, &DpOptions::default()).unwrap();
        let origin = [0.0, 0.0];
        let erlang = 0.5f64.powi(8);
        assert!((idle0.w_at(&origin).unwrap() - erlang).abs() < 1e-9);
        assert!(serve_all.w_at(&origin).unwrap() < idle0.w_at(&origin).unwrap());
    }

    #[test]
    fn idle_policy_hand_value() {
        // never serving turns the queue into a pure birth chain; from 0 it
        // exits after one arrival, so W = lambda / (c + lambda)
        let r = evaluate_policy(&vf_j1(), 1, |_| 0, &DpOptions::default()).unwrap();
        assert!((r.w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn convergence_rows_increase_toward_limit() {
        let rows = convergence_study(&vf_j1(), &[1, 2, 4, 8, 16], &[0.0]).unwrap();
        let beta = vf_j1().betas()[0];
        for pair in rows.windows(2) {
            assert!(pair[1].vn > pair[0].vn);
            assert!(pair[1].gap < pair[0].gap);
        }
        for row in &rows {
            assert!((row.v_limit - beta).abs() < 1e-12);
            assert!(row.vn < beta);
        }
    }

    #[test]
    fn deep_states_reach_relative_accuracy() {
        // frozen from the closed-form solution of the two-sided linear
        // recurrence (serve-always policy is optimal for J = 1):
        // W(k) = A s+^k + B s-^k with boundary rows at 0 and the cap.
        // The absolute stop rule alone would leave O(1e-3) relative error
        // at the origin for n = 64, where W is of order 1e-34.
        let exact_n8 = 1.14130387359349;
        let exact_n64 = 1.21711675260327;
        for warm in [false, true] {
            let opts = DpOptions {
                warm_start: warm,
                ..DpOptions::default()
            };
            let r8 = solve(&vf_j1(), 8, &opts).unwrap();
            assert!(
                (r8.v_at(&[0.0]).unwrap() - exact_n8).abs() < 1e-9,
                "warm={warm}"
            );
            let r64 = solve(&vf_j1(), 64, &opts).unwrap();
            assert!(
                (r64.v_at(&[0.0]).unwrap() - exact_n64).abs() < 1e-9,
                "warm={warm}: {}",
                r64.v_at(&[0.0]).unwrap()
            );
        }
    }

    #[test]
    fn convergence_on_overflow_face_is_identically_zero() {
        let rows = convergence_study(&vf_j1(), &[1, 2, 4], &[1.0]).unwrap();
        for row in rows {
            assert_eq!(row.vn, 0.0);
            assert_eq!(row.v_limit, 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sweep_is_monotone_and_contracting(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let vf = vf_j2();
            let op = BellmanOperator::new(vf.params(), 3).unwrap();
            let states = op.lattice().len();
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let w1: Vec<f64> = (0..states).map(|_| rng.gen_range(1e-6..=1.0)).collect();
            // w2 dominates w1 pointwise
            let w2: Vec<f64> = w1
                .iter()
                .map(|&v| (v + rng.gen_range(0.0..0.5)).min(1.0))
                .collect();
            let (u1, _) = op.apply(&w1);
            let (u2, _) = op.apply(&w2);
            let rho = op.contraction_factor();
            for s in 0..states {
                prop_assert!(u1[s] <= u2[s] + 1e-14);
                prop_assert!(u1[s] > 0.0 && u1[s] <= 1.0);
            }
            prop_assert!(sup_delta(&u1, &u2) <= rho * sup_delta(&w1, &w2) + 1e-14);
        }

        #[test]
        fn vertex_controls_suffice(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let vf = vf_j2();
            let op = BellmanOperator::new(vf.params(), 3).unwrap();
            let states = op.lattice().len();
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..states).map(|_| rng.gen_range(1e-3..=1.0)).collect();
            let s = rng.gen_range(0..states);
            let (best_vertex, _) = op.apply(&w);
            let mut best_frac = f64::INFINITY;
            let grid = 11usize;
            for a in 0..grid {
                for b in 0..grid {
                    let u = [a as f64 / (grid - 1) as f64, b as f64 / (grid - 1) as f64];
                    best_frac = best_frac.min(op.ratio_fractional(s, &u, &w));
                }
            }
            prop_assert!(best_frac >= best_vertex[s] - 1e-10);
        }
    }
}
