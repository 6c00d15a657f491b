//! Event-driven simulation of the scaled controlled network and Monte
//! Carlo estimators of `E exp(-n c sigma)`.
//!
//! The chain is simulated on the lattice `G^n` by uniformization: one
//! exponential holding time at the total active rate, then a categorical
//! event draw. Active clocks are the arrival (rate `n lambda`) and every
//! controlled station with work (rate `n mu_i`); a jump that would leave
//! the rectangle terminates the path and stamps the exit face.
//!
//! The importance sampler replaces the active rates by their adversarial
//! tilt at the current bottleneck `j(x)`: arrivals speed up to
//! `lambda e^{beta_j}` and the bottleneck server slows to
//! `mu_j e^{-beta_j}` (all other stations keep their nominal rates). That
//! is the most likely rate perturbation along overflow paths, frozen per
//! bottleneck region. The exact likelihood ratio of the embedded
//! chain-with-holding-times is accumulated per jump:
//! `log(rate_nom(event) / rate_tilt(event)) + (Lambda_tilt - Lambda_nom) t`,
//! making `exp(-n c sigma + log_weight)` unbiased for the nominal-measure
//! cost. With the identity tilt the weight terms are exactly zero and the
//! estimator reproduces naive Monte Carlo bit for bit.
//!
//! Reproducibility: each trajectory draws from its own counter-based
//! stream (master seed + trajectory index), so estimates are identical
//! across thread counts; means use pairwise summation.

use crate::dp::{DpError, Lattice};
use crate::model::{self, ExitFace, ModelError, NetworkParams};
use crate::value::ValueFn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Deserialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] DpError),
    #[error("need at least 2 trajectories, got {got}")]
    TooFewTrajectories { got: u64 },
    #[error("custom policy: {0}")]
    CustomPolicy(String),
}

/// A stationary deterministic policy table for one lattice, keyed by flat
/// state index, with a default control for unlisted states.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomPolicy {
    map: HashMap<usize, u32>,
    default: u32,
}

#[derive(Deserialize)]
struct RawPolicyEntry {
    x: Vec<f64>,
    u: Vec<u8>,
}

#[derive(Deserialize)]
struct RawPolicy {
    default: Vec<u8>,
    #[serde(default)]
    entries: Vec<RawPolicyEntry>,
}

fn control_mask(bits: &[u8], j: usize) -> Result<u32, SimError> {
    if bits.len() != j {
        return Err(SimError::CustomPolicy(format!(
            "control has {} entries, expected {}",
            bits.len(),
            j
        )));
    }
    let mut mask = 0u32;
    for (i, &b) in bits.iter().enumerate() {
        match b {
            0 => {}
            1 => mask |= 1 << i,
            other => {
                return Err(SimError::CustomPolicy(format!(
                    "control entries must be 0 or 1, got {other}"
                )))
            }
        }
    }
    Ok(mask)
}

impl CustomPolicy {
    /// Parses `{"default": [0/1; J], "entries": [{"x": [...], "u": [0/1; J]}]}`
    /// against the `n`-lattice of `params`.
    pub fn from_json(text: &str, params: &NetworkParams, n: u32) -> Result<Self, SimError> {
        let raw: RawPolicy = serde_json::from_str(text)
            .map_err(|e| SimError::CustomPolicy(format!("parse error: {e}")))?;
        let j = params.j();
        let lattice = Lattice::new(params, n)?;
        let default = control_mask(&raw.default, j)?;
        let mut map = HashMap::with_capacity(raw.entries.len());
        for entry in &raw.entries {
            params.check_dim(&entry.x)?;
            let flat = lattice.exact(&entry.x)?;
            map.insert(flat, control_mask(&entry.u, j)?);
        }
        Ok(Self { map, default })
    }

    pub fn from_table(map: HashMap<usize, u32>, default: u32) -> Self {
        Self { map, default }
    }

    fn control(&self, flat: usize) -> u32 {
        self.map.get(&flat).copied().unwrap_or(self.default)
    }
}

/// Service discipline applied while the path runs.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Every station with work serves.
    ServeAll,
    /// Exactly the current bottleneck set (tied minimizers within `A(x)`)
    /// serves; everything else idles.
    BottleneckOnly,
    /// Serve-all except one station that always idles.
    IdleStation(usize),
    Custom(CustomPolicy),
}

impl Policy {
    fn control(&self, vf: &ValueFn, x: &[f64], flat: usize) -> u32 {
        let all = (1u32 << vf.params().j()) - 1;
        match self {
            Policy::ServeAll => all,
            Policy::BottleneckOnly => vf.argmin_mask(x).expect("trajectory states stay in G"),
            Policy::IdleStation(i) => all & !(1 << i),
            Policy::Custom(table) => table.control(flat),
        }
    }
}

/// Change of measure applied to the active clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tilt {
    /// No change of measure; the weight terms are exactly zero.
    Nominal,
    /// Adversarial rates at the current bottleneck region.
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub sigma: f64,
    pub exit_face: ExitFace,
    pub jumps: u64,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Sample mean of `exp(-n c sigma + log_weight)`.
    pub mean: f64,
    pub stderr: f64,
    pub n_traj: u64,
    /// `-(1/n) log(mean)`.
    pub v_hat: f64,
    pub exits_boundary_o: u64,
    pub exits_boundary_c: u64,
}

struct Engine<'a> {
    vf: &'a ValueFn,
    lattice: Lattice,
    n_scale: f64,
    j: usize,
}

impl<'a> Engine<'a> {
    fn new(vf: &'a ValueFn, n: u32) -> Result<Self, SimError> {
        Ok(Self {
            vf,
            lattice: Lattice::new(vf.params(), n)?,
            n_scale: f64::from(n),
            j: vf.params().j(),
        })
    }

    fn run(
        &self,
        start: &[usize],
        policy: &Policy,
        tilt: Tilt,
        rng: &mut ChaCha12Rng,
    ) -> PathOutcome {
        let params = self.vf.params();
        let j = self.j;
        let counts = self.lattice.counts();
        let strides = self.lattice.strides();
        let mut ks: [usize; model::MAX_QUEUES] = [0; model::MAX_QUEUES];
        ks[..j].copy_from_slice(start);
        let mut x = [0.0f64; model::MAX_QUEUES];
        // slot 0 is the arrival clock, slot 1 + i the service clock of i
        let mut nominal = [0.0f64; model::MAX_QUEUES + 1];
        let mut tilted = [0.0f64; model::MAX_QUEUES + 1];

        let mut sigma = 0.0f64;
        let mut log_weight = 0.0f64;
        let mut jumps = 0u64;

        loop {
            let mut flat = 0usize;
            for i in 0..j {
                x[i] = ks[i] as f64 / self.n_scale;
                flat += ks[i] * strides[i];
            }
            let control = policy.control(self.vf, &x[..j], flat);

            nominal[0] = self.n_scale * params.lambda();
            for i in 0..j {
                nominal[1 + i] = if control >> i & 1 == 1 && ks[i] > 0 {
                    self.n_scale * params.mu()[i]
                } else {
                    0.0
                };
            }
            match tilt {
                Tilt::Nominal => tilted[..=j].copy_from_slice(&nominal[..=j]),
                Tilt::Bottleneck => {
                    let b = self
                        .vf
                        .bottleneck(&x[..j])
                        .expect("trajectory states stay in G");
                    let beta = self.vf.betas()[b];
                    tilted[0] = nominal[0] * beta.exp();
                    for i in 0..j {
                        tilted[1 + i] = if i == b {
                            nominal[1 + i] * (-beta).exp()
                        } else {
                            nominal[1 + i]
                        };
                    }
                }
            }

            let mut total_nominal = 0.0;
            let mut total_tilted = 0.0;
            for slot in 0..=j {
                total_nominal += nominal[slot];
                total_tilted += tilted[slot];
            }

            let hold = -(1.0 - rng.gen::<f64>()).ln() / total_tilted;
            sigma += hold;
            jumps += 1;

            let mut pick = rng.gen::<f64>() * total_tilted;
            let mut event = usize::MAX;
            for slot in 0..=j {
                if tilted[slot] <= 0.0 {
                    continue;
                }
                event = slot;
                if pick < tilted[slot] {
                    break;
                }
                pick -= tilted[slot];
            }
            // rounding can step past the last positive slot; it absorbs
            debug_assert!(event != usize::MAX);

            log_weight +=
                (nominal[event] / tilted[event]).ln() + (total_tilted - total_nominal) * hold;

            if event == 0 {
                // arrival
                if ks[0] + 1 >= counts[0] {
                    return PathOutcome {
                        sigma,
                        exit_face: ExitFace::BoundaryO,
                        jumps,
                        log_weight,
                    };
                }
                ks[0] += 1;
            } else {
                let i = event - 1;
                if i + 1 < j {
                    if ks[i + 1] + 1 >= counts[i + 1] {
                        return PathOutcome {
                            sigma,
                            exit_face: ExitFace::BoundaryC,
                            jumps,
                            log_weight,
                        };
                    }
                    ks[i] -= 1;
                    ks[i + 1] += 1;
                } else {
                    ks[i] -= 1;
                }
            }
        }
    }
}

/// Simulates one trajectory from an exact lattice point until exit.
pub fn simulate_path(
    vf: &ValueFn,
    n: u32,
    policy: &Policy,
    tilt: Tilt,
    x0: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<PathOutcome, SimError> {
    let engine = Engine::new(vf, n)?;
    let flat = engine.lattice.exact(x0)?;
    let mut ks = vec![0usize; vf.params().j()];
    engine.lattice.ks_into(flat, &mut ks);
    Ok(engine.run(&ks, policy, tilt, rng))
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Monte Carlo estimate under an arbitrary tilt. Trajectory `i` draws from
/// stream `i` of the master seed, so the estimate does not depend on the
/// thread count.
pub fn estimate_with_tilt(
    vf: &ValueFn,
    n: u32,
    policy: &Policy,
    tilt: Tilt,
    x0: &[f64],
    n_traj: u64,
    seed: u64,
) -> Result<Estimate, SimError> {
    if n_traj < 2 {
        return Err(SimError::TooFewTrajectories { got: n_traj });
    }
    let engine = Engine::new(vf, n)?;
    let flat = engine.lattice.exact(x0)?;
    let mut ks = vec![0usize; vf.params().j()];
    engine.lattice.ks_into(flat, &mut ks);
    let nc = f64::from(n) * vf.params().c();

    let outcomes: Vec<(f64, ExitFace)> = (0..n_traj)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(idx);
            let out = engine.run(&ks, policy, tilt, &mut rng);
            ((-nc * out.sigma + out.log_weight).exp(), out.exit_face)
        })
        .collect();

    let values: Vec<f64> = outcomes.iter().map(|(v, _)| *v).collect();
    let mean = pairwise_sum(&values) / n_traj as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n_traj - 1) as f64;
    let stderr = (var / n_traj as f64).sqrt();
    let exits_boundary_o = outcomes
        .iter()
        .filter(|(_, f)| *f == ExitFace::BoundaryO)
        .count() as u64;
    Ok(Estimate {
        mean,
        stderr,
        n_traj,
        v_hat: -mean.ln() / f64::from(n),
        exits_boundary_o,
        exits_boundary_c: n_traj - exits_boundary_o,
    })
}

/// Naive Monte Carlo (no change of measure).
pub fn mc_estimate(
    vf: &ValueFn,
    n: u32,
    policy: &Policy,
    x0: &[f64],
    n_traj: u64,
    seed: u64,
) -> Result<Estimate, SimError> {
    estimate_with_tilt(vf, n, policy, Tilt::Nominal, x0, n_traj, seed)
}

/// Importance-sampled estimate under the bottleneck tilt.
pub fn is_estimate(
    vf: &ValueFn,
    n: u32,
    policy: &Policy,
    x0: &[f64],
    n_traj: u64,
    seed: u64,
) -> Result<Estimate, SimError> {
    estimate_with_tilt(vf, n, policy, Tilt::Bottleneck, x0, n_traj, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub name: String,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyComparison {
    pub rows: Vec<PolicyRow>,
    /// Station idled by the "idle the bottleneck" reference row (the
    /// bottleneck at the start state), 0-based.
    pub bottleneck_station: usize,
    pub gap_serve_all_vs_bottleneck_only: f64,
    pub gap_serve_all_vs_idle_bottleneck: f64,
}

/// Naive-MC comparison of serve-all, bottleneck-only, and every
/// single-station-idling variant, under common random numbers.
pub fn policy_comparison(
    vf: &ValueFn,
    n: u32,
    x0: &[f64],
    n_traj: u64,
    seed: u64,
) -> Result<PolicyComparison, SimError> {
    let j = vf.params().j();
    let mut rows = Vec::with_capacity(j + 2);
    let serve_all = mc_estimate(vf, n, &Policy::ServeAll, x0, n_traj, seed)?;
    rows.push(PolicyRow {
        name: "serve-all".into(),
        estimate: serve_all.clone(),
    });
    let bottleneck_only = mc_estimate(vf, n, &Policy::BottleneckOnly, x0, n_traj, seed)?;
    rows.push(PolicyRow {
        name: "bottleneck-only".into(),
        estimate: bottleneck_only.clone(),
    });
    for i in 0..j {
        let est = mc_estimate(vf, n, &Policy::IdleStation(i), x0, n_traj, seed)?;
        rows.push(PolicyRow {
            name: format!("idle-station-{}", i + 1),
            estimate: est,
        });
    }
    let bottleneck_station = vf.bottleneck(x0)?;
    let idle_bottleneck = &rows[2 + bottleneck_station].estimate;
    Ok(PolicyComparison {
        gap_serve_all_vs_bottleneck_only: (serve_all.v_hat - bottleneck_only.v_hat).abs(),
        gap_serve_all_vs_idle_bottleneck: (serve_all.v_hat - idle_bottleneck.v_hat).abs(),
        bottleneck_station,
        rows,
    })
}
