//! Risk-sensitive buffer-overflow control for tandem queueing networks.
//!
//! A tandem network of `J` single-server queues is controlled to delay
//! buffer overflow, under the risk-sensitive criterion `E exp(-n c sigma)`
//! where `sigma` is the first exit time of the scaled state from the
//! buffer rectangle. As the scaling parameter `n` grows, the normalized
//! value `V^n = -(1/n) log E exp(-n c sigma)` converges to the solution of
//! a Hamilton-Jacobi-Bellman PDE that admits a closed form:
//!
//! ```text
//! V(x) = min_i  beta_i * (y_1 + ... + y_i),      y = z - x,
//! ```
//!
//! where `beta_i` is the unique positive root of
//! `c + lambda (1 - e^b) + mu_i (1 - e^{-b}) = 0`. The minimizing index is
//! the *bottleneck*: the one station whose service matters at that state.
//!
//! Module map:
//! - [`model`] — problem instance, rectangle geometry, boundary classes.
//! - [`roots`] — characteristic exponents `beta_i` and the gradient basis.
//! - [`value`] — the closed-form value function, bottleneck sets, region maps.
//! - [`hamiltonian`] — running cost, drift, the Hamiltonian at all three
//!   optimization levels, perturbed-rate identities.
//! - [`viscosity`] — executable verification that the closed form is the
//!   viscosity solution (extreme-point enumeration plus randomized scans).
//! - [`dp`] — the pre-limit discrete dynamic program on the scaled lattice.
//! - [`sim`] — event-driven simulation with naive and importance-sampled
//!   Monte Carlo estimators.

pub mod dp;
pub mod hamiltonian;
pub mod model;
pub mod roots;
pub mod sim;
pub mod value;
pub mod viscosity;
