//! Simulation and verification toolkit for competitive Lotka-Volterra
//! ecosystems whose coefficients switch with a two-time-scale Markov chain.
//!
//! * [`chain`]: generators on a truncation window, stationary laws, path
//!   sampling and transition matrices.
//! * [`dynamics`]: the positivity-preserving hybrid integrator.
//! * [`averaging`]: coefficients of the averaged system.
//! * [`analysis`]: generator of Lyapunov functions, perturbed Lyapunov
//!   corrections and the sufficient-condition checks.
//! * [`montecarlo`]: ensembles and statistical property probes.
//! * [`scenario`] and [`cli`]: scenario documents and the batch front-end.

pub mod analysis;
pub mod averaging;
pub mod chain;
pub mod cli;
pub mod dynamics;
pub mod montecarlo;
pub mod rng;
pub mod scenario;
pub mod stats;
