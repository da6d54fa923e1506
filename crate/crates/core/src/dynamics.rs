//! Regime-switching competitive Lotka-Volterra dynamics.
//!
//! In Ito form each species follows
//!
//! ```text
//! dx_i = x_i [ (r_i(a) - sum_j a_ij(a) x_j) dt + sigma_i(a) dw_i ],   r_i = b_i + sigma_i^2 / 2
//! ```
//!
//! The integrator works on `log x_i`, where the drift is `b_i - sum_j a_ij x_j`
//! and the noise is additive, so every state it produces is `exp` of a finite
//! number and therefore strictly positive. The regime path is sampled first
//! and then interlaced with the Euler-Maruyama steps: a jump at time `tau`
//! takes effect on the first grid point strictly after `tau`.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::AveragedCoefficients;
use crate::chain::{sample_path, ChainError, GeneratorSpec, RegimePath};
use crate::rng::RngStream;

/// Largest admissible `|log x_i|` before the double-precision `exp` overflows.
pub const MAX_CLAMP: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("coefficient shapes disagree: {0}")]
    Shape(String),
    #[error("competition condition violated in state {state}: a[{i}][{j}] = {value}")]
    Competition {
        state: usize,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("initial density of species {species} must be positive and finite, got {value}")]
    InvalidInitial { species: usize, value: f64 },
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("regime {state} has no coefficients (table covers {available} states)")]
    MissingState { state: usize, available: usize },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Coefficients of one environment state in Stratonovich form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeCoefficients {
    pub b: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

/// Per-state ecosystem coefficients. `r` is always derived from `b` and
/// `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    n_species: usize,
    b: Vec<Vec<f64>>,
    /// Row-major `n x n` community matrix per state.
    a: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

impl CoefficientTable {
    /// Table for a competitive system: `a_ii > 0` and `a_ij >= 0` in every
    /// state.
    pub fn new(states: &[RegimeCoefficients]) -> Result<Self, DynamicsError> {
        let table = Self::without_competition_check(states)?;
        table.check_competition()?;
        Ok(table)
    }

    /// Skips the competition check. Meant for validation runs such as the
    /// `A = 0` geometric Brownian motion case.
    pub fn without_competition_check(
        states: &[RegimeCoefficients],
    ) -> Result<Self, DynamicsError> {
        let first = states
            .first()
            .ok_or_else(|| DynamicsError::Shape("no states".into()))?;
        let n = first.b.len();
        if n == 0 {
            return Err(DynamicsError::Shape("no species".into()));
        }
        let mut table = Self {
            n_species: n,
            b: Vec::with_capacity(states.len()),
            a: Vec::with_capacity(states.len()),
            sigma: Vec::with_capacity(states.len()),
            r: Vec::with_capacity(states.len()),
        };
        for (k, s) in states.iter().enumerate() {
            if s.b.len() != n || s.sigma.len() != n || s.a.len() != n {
                return Err(DynamicsError::Shape(format!(
                    "state {k} does not have {n} species"
                )));
            }
            if s.a.iter().any(|row| row.len() != n) {
                return Err(DynamicsError::Shape(format!(
                    "state {k} community matrix is not {n}x{n}"
                )));
            }
            let values = s.b.iter().chain(&s.sigma).chain(s.a.iter().flatten());
            if values.clone().any(|v| !v.is_finite()) {
                return Err(DynamicsError::Shape(format!(
                    "state {k} has non-finite coefficients"
                )));
            }
            table.r.push(strat_to_ito(&s.b, &s.sigma));
            table.b.push(s.b.clone());
            table.sigma.push(s.sigma.clone());
            table.a.push(s.a.iter().flatten().copied().collect());
        }
        Ok(table)
    }

    pub fn check_competition(&self) -> Result<(), DynamicsError> {
        let n = self.n_species;
        for (state, a) in self.a.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let value = a[i * n + j];
                    let ok = if i == j { value > 0.0 } else { value >= 0.0 };
                    if !ok {
                        return Err(DynamicsError::Competition { state, i, j, value });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_states(&self) -> usize {
        self.b.len()
    }

    pub fn b(&self, state: usize) -> &[f64] {
        &self.b[state]
    }

    pub fn r(&self, state: usize) -> &[f64] {
        &self.r[state]
    }

    pub fn sigma(&self, state: usize) -> &[f64] {
        &self.sigma[state]
    }

    /// Row-major community matrix of `state`.
    pub fn a(&self, state: usize) -> &[f64] {
        &self.a[state]
    }

    pub fn a_entry(&self, state: usize, i: usize, j: usize) -> f64 {
        self.a[state][i * self.n_species + j]
    }

    pub fn regime(&self, state: usize) -> RegimeCoefficients {
        let n = self.n_species;
        RegimeCoefficients {
            b: self.b[state].clone(),
            a: self.a[state].chunks(n).map(<[f64]>::to_vec).collect(),
            sigma: self.sigma[state].clone(),
        }
    }

    /// True when every state carries identical coefficients.
    pub fn is_constant_in_state(&self) -> bool {
        (1..self.n_states()).all(|k| {
            self.b[k] == self.b[0] && self.a[k] == self.a[0] && self.sigma[k] == self.sigma[0]
        })
    }
}

/// `r = b + sigma^2 / 2` entrywise.
pub fn strat_to_ito(b: &[f64], sigma: &[f64]) -> Vec<f64> {
    b.iter()
        .zip(sigma)
        .map(|(b, s)| b + 0.5 * s * s)
        .collect()
}

/// `xi_i(x, a) = x_i (r_i(a) - sum_j a_ij(a) x_j)`.
pub fn drift(x: &[f64], alpha: usize, coeffs: &CoefficientTable) -> Vec<f64> {
    let n = coeffs.n_species();
    let r = coeffs.r(alpha);
    let a = coeffs.a(alpha);
    (0..n)
        .map(|i| {
            let interaction: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            x[i] * (r[i] - interaction)
        })
        .collect()
}

/// Diagonal of `S(x, a) = diag(x_i sigma_i(a))`.
pub fn diffusion(x: &[f64], alpha: usize, coeffs: &CoefficientTable) -> Vec<f64> {
    x.iter()
        .zip(coeffs.sigma(alpha))
        .map(|(x, s)| x * s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeMode {
    #[default]
    LogEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScheme {
    pub dt: f64,
    pub clamp: f64,
    pub mode: SchemeMode,
    /// Store every `record_every`-th grid point (the final point is always
    /// stored). Positivity and the running norm bound are tracked on every
    /// step regardless.
    pub record_every: usize,
}

impl Default for SimScheme {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            clamp: MAX_CLAMP,
            mode: SchemeMode::LogEuler,
            record_every: 1,
        }
    }
}

impl SimScheme {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn recording_every(mut self, stride: usize) -> Self {
        self.record_every = stride;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(DynamicsError::InvalidScheme(format!("dt = {}", self.dt)));
        }
        if !(self.clamp > 0.0 && self.clamp <= MAX_CLAMP) {
            return Err(DynamicsError::InvalidScheme(format!(
                "clamp = {} (must lie in (0, {MAX_CLAMP}])",
                self.clamp
            )));
        }
        if self.record_every == 0 {
            return Err(DynamicsError::InvalidScheme("record_every = 0".into()));
        }
        Ok(())
    }

    pub fn steps(&self, horizon: f64) -> usize {
        ((horizon / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PathStatus {
    Complete,
    /// `|log x_species|` exceeded the clamp at `time`; the path stops at the
    /// last grid point before it.
    ClampHit { time: f64, species: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridTrajectory {
    pub n_species: usize,
    pub dt: f64,
    /// Recorded grid times.
    pub times: Vec<f64>,
    /// Densities at recorded times, row-major (`times.len() x n_species`).
    pub x: Vec<f64>,
    /// `alpha(t-)` at recorded times.
    pub regimes: Vec<usize>,
    pub regime_path: RegimePath,
    pub status: PathStatus,
    /// Smallest density component over every integration step.
    pub min_density: f64,
    /// Largest Euclidean norm over every integration step.
    pub max_norm: f64,
}

impl HybridTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.x[k * self.n_species..(k + 1) * self.n_species]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn is_complete(&self) -> bool {
        self.status == PathStatus::Complete
    }

    /// CSV with header `t,x_1,..,x_n,regime`; regimes numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.n_species {
            let _ = write!(out, ",x_{i}");
        }
        out.push_str(",regime\n");
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.times[k]);
            for v in self.state(k) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.regimes[k] + 1);
        }
        out
    }
}

pub(crate) fn euclidean_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn validate_initial(x0: &[f64], n: usize) -> Result<(), DynamicsError> {
    if x0.len() != n {
        return Err(DynamicsError::Shape(format!(
            "initial condition has {} components, expected {n}",
            x0.len()
        )));
    }
    match x0.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        Some(species) => Err(DynamicsError::InvalidInitial {
            species,
            value: x0[species],
        }),
        None => Ok(()),
    }
}

/// Integrates the hybrid system along a pre-sampled regime path.
pub fn integrate_along(
    coeffs: &CoefficientTable,
    path: RegimePath,
    x0: &[f64],
    scheme: &SimScheme,
    stream: &RngStream,
) -> Result<HybridTrajectory, DynamicsError> {
    scheme.validate()?;
    let n = coeffs.n_species();
    validate_initial(x0, n)?;
    let available = coeffs.n_states();
    if let Some(&state) = std::iter::once(&path.origin)
        .chain(&path.states)
        .find(|&&s| s >= available)
    {
        return Err(DynamicsError::MissingState { state, available });
    }

    let dt = scheme.dt;
    let steps = scheme.steps(path.horizon);
    let noise_scale = dt.sqrt();
    let mut rng = stream.noise_rng();

    let capacity = steps / scheme.record_every + 2;
    let mut times = Vec::with_capacity(capacity);
    let mut xs = Vec::with_capacity(capacity * n);
    let mut regimes = Vec::with_capacity(capacity);

    let mut log_x: Vec<f64> = x0.iter().map(|v| v.ln()).collect();
    let mut x = x0.to_vec();
    let mut min_density = x.iter().copied().fold(f64::INFINITY, f64::min);
    let mut max_norm = euclidean_norm(&x);
    let mut status = PathStatus::Complete;

    let mut regime = path.origin;
    let mut next_jump = 0usize;
    let mut log_drift = vec![0.0; n];

    for k in 0..=steps {
        let t = k as f64 * dt;
        while next_jump < path.jump_times.len() && path.jump_times[next_jump] < t {
            regime = path.states[next_jump];
            next_jump += 1;
        }
        if k % scheme.record_every == 0 || k == steps {
            times.push(t);
            xs.extend_from_slice(&x);
            regimes.push(regime);
        }
        if k == steps {
            break;
        }

        let b = coeffs.b(regime);
        let a = coeffs.a(regime);
        let sigma = coeffs.sigma(regime);
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            let interaction: f64 = row.iter().zip(&x).map(|(a, x)| a * x).sum();
            log_drift[i] = b[i] - interaction;
        }
        let mut hit = None;
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            log_x[i] += log_drift[i] * dt + sigma[i] * noise_scale * z;
            if !(log_x[i].abs() <= scheme.clamp) && hit.is_none() {
                hit = Some(i);
            }
        }
        if let Some(species) = hit {
            status = PathStatus::ClampHit {
                time: (k + 1) as f64 * dt,
                species,
            };
            if k % scheme.record_every != 0 {
                times.push(t);
                xs.extend_from_slice(&x);
                regimes.push(regime);
            }
            break;
        }
        for i in 0..n {
            x[i] = log_x[i].exp();
        }
        min_density = x.iter().copied().fold(min_density, f64::min);
        max_norm = max_norm.max(euclidean_norm(&x));
    }

    Ok(HybridTrajectory {
        n_species: n,
        dt,
        times,
        x: xs,
        regimes,
        regime_path: path,
        status,
        min_density,
        max_norm,
    })
}

/// Samples the regime path from `generator` and integrates the hybrid
/// system on `[0, horizon]`.
pub fn simulate_hybrid(
    coeffs: &CoefficientTable,
    generator: &GeneratorSpec,
    x0: &[f64],
    alpha0: usize,
    horizon: f64,
    scheme: &SimScheme,
    stream: &RngStream,
) -> Result<HybridTrajectory, DynamicsError> {
    scheme.validate()?;
    validate_initial(x0, coeffs.n_species())?;
    if generator.size() > coeffs.n_states() {
        return Err(DynamicsError::MissingState {
            state: coeffs.n_states(),
            available: coeffs.n_states(),
        });
    }
    let path = sample_path(generator, alpha0, horizon, stream)?;
    integrate_along(coeffs, path, x0, scheme, stream)
}

/// Simulates the averaged (switching-free) system.
pub fn simulate_averaged(
    avg: &AveragedCoefficients,
    x0: &[f64],
    horizon: f64,
    scheme: &SimScheme,
    stream: &RngStream,
) -> Result<HybridTrajectory, DynamicsError> {
    let table = avg.as_table()?;
    simulate_hybrid(
        &table,
        &GeneratorSpec::trivial(),
        x0,
        0,
        horizon,
        scheme,
        stream,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_generator;
    use crate::stats::mean_estimate;

    fn logistic(b: f64, a: f64, sigma: f64) -> CoefficientTable {
        CoefficientTable::new(&[RegimeCoefficients {
            b: vec![b],
            a: vec![vec![a]],
            sigma: vec![sigma],
        }])
        .unwrap()
    }

    fn two_species_two_states() -> CoefficientTable {
        CoefficientTable::new(&[
            RegimeCoefficients {
                b: vec![1.0, 0.8],
                a: vec![vec![1.0, 0.2], vec![0.3, 1.2]],
                sigma: vec![0.4, 0.3],
            },
            RegimeCoefficients {
                b: vec![-0.5, 1.5],
                a: vec![vec![2.0, 0.1], vec![0.0, 0.9]],
                sigma: vec![0.8, 0.2],
            },
        ])
        .unwrap()
    }

    #[test]
    fn drift_examples() {
        let c = two_species_two_states();
        assert_eq!(drift(&[0.0, 0.0], 0, &c), vec![0.0, 0.0]);
        // r = b + sigma^2/2 = 2 with b = 1.5, sigma = 1; a = 1.
        let t = logistic(1.5, 1.0, 1.0);
        assert_eq!(drift(&[1.0], 0, &t), vec![1.0]);
        assert_eq!(drift(&[2.0], 0, &t), vec![0.0]);
    }

    #[test]
    fn diffusion_examples() {
        let c = CoefficientTable::new(&[RegimeCoefficients {
            b: vec![0.0, 0.0],
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            sigma: vec![1.0, 0.5],
        }])
        .unwrap();
        assert_eq!(diffusion(&[0.0, 0.0], 0, &c), vec![0.0, 0.0]);
        assert_eq!(diffusion(&[2.0, 3.0], 0, &c), vec![2.0, 1.5]);
        let quiet = logistic(1.0, 1.0, 0.0);
        assert_eq!(diffusion(&[5.0], 0, &quiet), vec![0.0]);
    }

    #[test]
    fn strat_to_ito_examples() {
        assert_eq!(strat_to_ito(&[1.0], &[2.0]), vec![3.0]);
        assert_eq!(strat_to_ito(&[1.0], &[0.0]), vec![1.0]);
        assert_eq!(strat_to_ito(&[-0.5], &[1.0]), vec![0.0]);
    }

    #[test]
    fn competition_gate() {
        let bad = CoefficientTable::new(&[RegimeCoefficients {
            b: vec![1.0],
            a: vec![vec![0.0]],
            sigma: vec![0.0],
        }]);
        assert!(matches!(bad, Err(DynamicsError::Competition { .. })));
        let neg = CoefficientTable::new(&[RegimeCoefficients {
            b: vec![1.0, 1.0],
            a: vec![vec![1.0, -0.1], vec![0.0, 1.0]],
            sigma: vec![0.0, 0.0],
        }]);
        assert!(matches!(neg, Err(DynamicsError::Competition { i: 0, j: 1, .. })));
    }

    #[test]
    fn invalid_initial_rejected() {
        let t = logistic(1.0, 1.0, 0.1);
        let err = simulate_hybrid(
            &t,
            &GeneratorSpec::trivial(),
            &[0.0],
            0,
            1.0,
            &SimScheme::default(),
            &RngStream::new(0),
        );
        assert!(matches!(err, Err(DynamicsError::InvalidInitial { species: 0, .. })));
    }

    #[test]
    fn deterministic_logistic_matches_closed_form() {
        let (b, a, x0, horizon) = (1.0, 1.0, 0.1, 5.0);
        let t = logistic(b, a, 0.0);
        let traj = simulate_hybrid(
            &t,
            &GeneratorSpec::trivial(),
            &[x0],
            0,
            horizon,
            &SimScheme::with_dt(1e-4),
            &RngStream::new(0),
        )
        .unwrap();
        let e = (b * horizon).exp();
        let oracle = x0 * e / (1.0 + x0 * a * (e - 1.0) / b);
        assert!((traj.terminal()[0] - oracle).abs() < 1e-3);
    }

    #[test]
    fn gbm_log_moments() {
        let (b, sigma, x0, horizon) = (0.3, 0.5, 1.0, 2.0);
        let t = CoefficientTable::without_competition_check(&[RegimeCoefficients {
            b: vec![b],
            a: vec![vec![0.0]],
            sigma: vec![sigma],
        }])
        .unwrap();
        let scheme = SimScheme::with_dt(1e-2).recording_every(1000);
        let logs: Vec<f64> = (0..4000)
            .map(|k| {
                simulate_hybrid(&t, &GeneratorSpec::trivial(), &[x0], 0, horizon, &scheme, &RngStream::new(k))
                    .unwrap()
                    .terminal()[0]
                    .ln()
            })
            .collect();
        let est = mean_estimate(&logs);
        let var_oracle = sigma * sigma * horizon;
        assert!((est.mean - (x0.ln() + b * horizon)).abs() < 3.0 * (var_oracle / 4000.0).sqrt());
        // Var of the sample variance for Gaussian data: 2 s^4 / (n - 1).
        let var_se = (2.0 * var_oracle * var_oracle / 3999.0).sqrt();
        assert!((est.sd * est.sd - var_oracle).abs() < 3.0 * var_se);
    }

    #[test]
    fn positivity_and_regime_alignment() {
        let c = two_species_two_states();
        let q = build_generator(&[vec![(1, 3.0)], vec![(0, 2.0)]], 2, 0.0).unwrap();
        let traj = simulate_hybrid(&c, &q, &[0.5, 0.5], 0, 20.0, &SimScheme::default(), &RngStream::new(4)).unwrap();
        assert!(traj.x.iter().all(|&v| v > 0.0));
        assert!(traj.min_density > 0.0);
        for (k, &t) in traj.times.iter().enumerate() {
            assert_eq!(traj.regimes[k], traj.regime_path.state_before(t));
        }
        assert!(traj.regime_path.n_jumps() > 10);
    }

    #[test]
    fn reproducible_bitwise() {
        let c = two_species_two_states();
        let q = build_generator(&[vec![(1, 3.0)], vec![(0, 2.0)]], 2, 0.0).unwrap();
        let run = || {
            simulate_hybrid(&c, &q, &[0.5, 0.5], 1, 3.0, &SimScheme::default(), &RngStream::new(77)).unwrap()
        };
        assert_eq!(run().to_csv(), run().to_csv());
    }

    #[test]
    fn frozen_chain_matches_fixed_regime() {
        let c = two_species_two_states();
        let frozen = GeneratorSpec::frozen(2);
        let fixed = CoefficientTable::new(&[c.regime(1)]).unwrap();
        let s = RngStream::new(5);
        let a = simulate_hybrid(&c, &frozen, &[0.3, 0.7], 1, 4.0, &SimScheme::default(), &s).unwrap();
        let b = simulate_hybrid(&fixed, &GeneratorSpec::trivial(), &[0.3, 0.7], 0, 4.0, &SimScheme::default(), &s)
            .unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn clamp_hit_is_flagged() {
        let t = logistic(-5.0, 1.0, 0.0);
        let scheme = SimScheme {
            clamp: 10.0,
            ..SimScheme::with_dt(0.01)
        };
        let traj = simulate_hybrid(&t, &GeneratorSpec::trivial(), &[1.0], 0, 5.0, &scheme, &RngStream::new(0))
            .unwrap();
        match traj.status {
            PathStatus::ClampHit { time, species } => {
                assert_eq!(species, 0);
                assert!(time > 1.5 && time < 2.5, "{time}");
            }
            PathStatus::Complete => panic!("clamp not flagged"),
        }
        assert!(traj.terminal()[0].ln().abs() <= 10.0);
    }

    #[test]
    fn scheme_validation() {
        assert!(SimScheme::with_dt(0.0).validate().is_err());
        assert!(SimScheme { clamp: 701.0, ..SimScheme::default() }.validate().is_err());
        assert!(SimScheme::default().recording_every(0).validate().is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let t = logistic(1.0, 1.0, 0.0);
        let traj = simulate_hybrid(&t, &GeneratorSpec::trivial(), &[1.0], 0, 0.002, &SimScheme::default(), &RngStream::new(0))
            .unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x_1,regime"));
        assert_eq!(lines.next(), Some("0,1,1"));
        assert_eq!(csv.lines().count(), 4);
    }
}
