//! Lyapunov-function calculus and the sufficient-condition checks.
//!
//! [`generator_apply`] evaluates the diffusion part of the hybrid generator
//! on a Lyapunov function that does not depend on the regime (the switching
//! sum vanishes for such functions). [`perturbation_terms`] evaluates the two
//! correction terms of the perturbed Lyapunov function by quadrature against
//! the transition matrix of the composed chain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::AveragedCoefficients;
use crate::chain::{
    ergodicity_diagnostic, transition_matrix, ChainError, GeneratorSpec, StationaryDistribution,
    TwoTimeScaleChain, MAX_DENSE_WINDOW,
};
use crate::dynamics::{diffusion, drift, CoefficientTable, HybridTrajectory};
use crate::stats::least_squares_slope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("window of {size} states exceeds the dense cap of {cap}")]
    WindowTooLarge { size: usize, cap: usize },
    #[error("fit window is degenerate: {0}")]
    DegenerateWindow(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Regime-independent Lyapunov functions on the open positive orthant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LyapunovFunction {
    /// `sum_i x_i^p`.
    PowerSum { p: f64 },
    /// `sum_i (x_i^gamma - 1 - gamma log x_i)`.
    Barrier { gamma: f64 },
    /// `sum_i (x_i - log(x_i + 1))`.
    Stability,
    /// `log x_species`.
    Log { species: usize },
    /// `e^{kappa t} (1 + U)^theta` with `U = 1 / sum_i x_i`, at a fixed `t`.
    ReciprocalPower { theta: f64, kappa: f64, time: f64 },
}

impl LyapunovFunction {
    pub fn label(&self) -> &'static str {
        match self {
            Self::PowerSum { .. } => "power-sum",
            Self::Barrier { .. } => "barrier",
            Self::Stability => "stability",
            Self::Log { .. } => "log",
            Self::ReciprocalPower { .. } => "reciprocal-power",
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Self::PowerSum { p } => x.iter().map(|v| v.powf(p)).sum(),
            Self::Barrier { gamma } => x
                .iter()
                .map(|v| v.powf(gamma) - 1.0 - gamma * v.ln())
                .sum(),
            Self::Stability => x.iter().map(|v| v - v.ln_1p()).sum(),
            Self::Log { species } => x[species].ln(),
            Self::ReciprocalPower { theta, kappa, time } => {
                let u = 1.0 / x.iter().sum::<f64>();
                (kappa * time).exp() * (1.0 + u).powf(theta)
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Self::PowerSum { p } => x.iter().map(|v| p * v.powf(p - 1.0)).collect(),
            Self::Barrier { gamma } => x
                .iter()
                .map(|v| gamma * v.powf(gamma - 1.0) - gamma / v)
                .collect(),
            Self::Stability => x.iter().map(|v| v / (v + 1.0)).collect(),
            Self::Log { species } => {
                let mut g = vec![0.0; x.len()];
                g[species] = 1.0 / x[species];
                g
            }
            Self::ReciprocalPower { theta, kappa, time } => {
                let u = 1.0 / x.iter().sum::<f64>();
                let g = -(kappa * time).exp() * theta * (1.0 + u).powf(theta - 1.0) * u * u;
                vec![g; x.len()]
            }
        }
    }

    pub fn hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Self::PowerSum { p } => x
                .iter()
                .map(|v| p * (p - 1.0) * v.powf(p - 2.0))
                .collect(),
            Self::Barrier { gamma } => x
                .iter()
                .map(|v| gamma * (gamma - 1.0) * v.powf(gamma - 2.0) + gamma / (v * v))
                .collect(),
            Self::Stability => x.iter().map(|v| 1.0 / ((v + 1.0) * (v + 1.0))).collect(),
            Self::Log { species } => {
                let mut h = vec![0.0; x.len()];
                h[species] = -1.0 / (x[species] * x[species]);
                h
            }
            Self::ReciprocalPower { theta, kappa, time } => {
                let u = 1.0 / x.iter().sum::<f64>();
                let w = 1.0 + u;
                let h = (kappa * time).exp()
                    * theta
                    * ((theta - 1.0) * w.powf(theta - 2.0) * u.powi(4)
                        + 2.0 * w.powf(theta - 1.0) * u.powi(3));
                vec![h; x.len()]
            }
        }
    }
}

/// `sum_i V_i xi_i(x, a) + 1/2 sum_i V_ii s_i(x, a)^2`.
pub fn generator_apply(
    v: &LyapunovFunction,
    x: &[f64],
    alpha: usize,
    coeffs: &CoefficientTable,
) -> f64 {
    let g = v.gradient(x);
    let h = v.hessian_diag(x);
    let xi = drift(x, alpha, coeffs);
    let s = diffusion(x, alpha, coeffs);
    let first: f64 = g.iter().zip(&xi).map(|(g, xi)| g * xi).sum();
    let second: f64 = h.iter().zip(&s).map(|(h, s)| h * s * s).sum();
    first + 0.5 * second
}

/// Correction terms `(V1, V2)` of the perturbed Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationTerms {
    pub v1: f64,
    pub v2: f64,
}

/// Evaluates, with `x` frozen and the chain started in `current`,
///
/// ```text
/// V1 = int_0^H e^{-u} sum_k w1_k [p_{current,k}(u) - nu_k] du,  w1_k = sum_i V_i xi_i(x, k)
/// V2 = int_0^H e^{-u} sum_k w2_k [p_{current,k}(u) - nu_k] du,  w2_k = 1/2 sum_i V_ii s_i(x, k)^2
/// ```
///
/// by composite Simpson quadrature on a uniform grid with step at most
/// `0.01 eps` (and at most `0.01 / M` for the composed exit-rate bound `M`).
/// The weights are centred on the current regime; this leaves the integral
/// unchanged because both `p(u)` and `nu` have unit mass, and it makes the
/// terms exactly zero when the coefficients do not depend on the regime.
pub fn perturbation_terms(
    v: &LyapunovFunction,
    x: &[f64],
    current: usize,
    chain: &TwoTimeScaleChain,
    nu: &StationaryDistribution,
    coeffs: &CoefficientTable,
    quad_horizon: f64,
) -> Result<PerturbationTerms, AnalysisError> {
    let q = chain.composed();
    let n_states = q.size();
    if n_states > MAX_DENSE_WINDOW {
        return Err(AnalysisError::WindowTooLarge {
            size: n_states,
            cap: MAX_DENSE_WINDOW,
        });
    }
    if quad_horizon < 40.0 {
        return Err(AnalysisError::InvalidParameter(format!(
            "quadrature horizon must be at least 40, got {quad_horizon}"
        )));
    }
    if nu.len() != n_states || coeffs.n_states() < n_states || current >= n_states {
        return Err(AnalysisError::InvalidParameter(
            "chain, stationary law and coefficient table disagree on the window".into(),
        ));
    }

    let g = v.gradient(x);
    let h = v.hessian_diag(x);
    let xi_ref = drift(x, current, coeffs);
    let s_ref = diffusion(x, current, coeffs);
    let mut w1 = vec![0.0; n_states];
    let mut w2 = vec![0.0; n_states];
    for k in 0..n_states {
        let xi = drift(x, k, coeffs);
        let s = diffusion(x, k, coeffs);
        for i in 0..x.len() {
            w1[k] += g[i] * (xi[i] - xi_ref[i]);
            w2[k] += 0.5 * h[i] * (s[i] * s[i] - s_ref[i] * s_ref[i]);
        }
    }
    if w1.iter().chain(&w2).all(|&w| w == 0.0) {
        return Ok(PerturbationTerms { v1: 0.0, v2: 0.0 });
    }

    let mut max_step = 0.01 * chain.epsilon();
    if q.max_exit_rate() > 0.0 {
        max_step = max_step.min(0.01 / q.max_exit_rate());
    }
    let mut intervals = (quad_horizon / max_step).ceil() as usize;
    intervals += intervals % 2;
    let step = quad_horizon / intervals as f64;
    let p_step = transition_matrix(q, step)?;

    let mut p = vec![0.0; n_states];
    p[current] = 1.0;
    let mut next = vec![0.0; n_states];
    let (mut acc1, mut acc2) = (0.0, 0.0);
    for j in 0..=intervals {
        let u = j as f64 * step;
        let decay = (-u).exp();
        let mut f1 = 0.0;
        let mut f2 = 0.0;
        for k in 0..n_states {
            let dev = p[k] - nu.nu[k];
            f1 += w1[k] * dev;
            f2 += w2[k] * dev;
        }
        let simpson = if j == 0 || j == intervals {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc1 += simpson * decay * f1;
        acc2 += simpson * decay * f2;
        if j < intervals {
            for (b, out) in next.iter_mut().enumerate() {
                *out = (0..n_states).map(|a| p[a] * p_step[(a, b)]).sum();
            }
            std::mem::swap(&mut p, &mut next);
        }
    }
    Ok(PerturbationTerms {
        v1: acc1 * step / 3.0,
        v2: acc2 * step / 3.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionId {
    #[serde(rename = "A1")]
    Competition,
    #[serde(rename = "A2-window")]
    ErgodicityWindow,
    #[serde(rename = "ment")]
    Moment,
    #[serde(rename = "ine")]
    Stability,
    #[serde(rename = "ine1")]
    Extinction,
    #[serde(rename = "permanence")]
    Permanence,
}

impl ConditionId {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Competition => "A1",
            Self::ErgodicityWindow => "A2-window",
            Self::Moment => "ment",
            Self::Stability => "ine",
            Self::Extinction => "ine1",
            Self::Permanence => "permanence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionVerdict {
    Holds,
    Fails,
    HoldsOnWindow,
}

impl ConditionVerdict {
    pub fn holds(&self) -> bool {
        !matches!(self, Self::Fails)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WitnessKind {
    State,
    Species,
}

/// Extremal index of a condition and its margin. Positive margins mean the
/// condition holds. `index` is numbered from 1, like states in documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub kind: WitnessKind,
    pub index: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: ConditionId,
    pub verdict: ConditionVerdict,
    pub witness: Witness,
    /// The evaluated quantity (supremum, discriminant, rate, ...).
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_hash: Option<String>,
}

impl ConditionReport {
    fn new(
        condition: ConditionId,
        verdict: ConditionVerdict,
        kind: WitnessKind,
        index: usize,
        margin: f64,
        value: f64,
    ) -> Self {
        Self {
            condition,
            verdict,
            witness: Witness {
                kind,
                index: index + 1,
                margin,
            },
            value,
            constants: BTreeMap::new(),
            scenario_hash: None,
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.scenario_hash = Some(hash.to_owned());
        self
    }
}

/// Competition condition: `a_ii > 0`, `a_ij >= 0` in every state. The margin
/// is the most negative off-diagonal entry when one exists, otherwise the
/// smallest diagonal entry.
pub fn check_competition(coeffs: &CoefficientTable) -> ConditionReport {
    let n = coeffs.n_species();
    let mut min_diag = (f64::INFINITY, 0);
    let mut min_off = (f64::INFINITY, 0);
    for state in 0..coeffs.n_states() {
        for i in 0..n {
            for j in 0..n {
                let v = coeffs.a_entry(state, i, j);
                let slot = if i == j { &mut min_diag } else { &mut min_off };
                if v < slot.0 {
                    *slot = (v, state);
                }
            }
        }
    }
    let (margin, state) = if min_off.0 < 0.0 { min_off } else { min_diag };
    let verdict = if margin > 0.0 {
        ConditionVerdict::Holds
    } else {
        ConditionVerdict::Fails
    };
    ConditionReport::new(
        ConditionId::Competition,
        verdict,
        WitnessKind::State,
        state,
        margin,
        margin,
    )
}

/// Exponential-ergodicity certificate on the window. The margin is the fitted
/// decay rate (`f64::MAX` for an already stationary chain); chains that are
/// not irreducible or whose deviation does not decay fail with margin -1.
pub fn check_ergodicity_window(q: &GeneratorSpec, t_grid: &[f64]) -> ConditionReport {
    let failed = |state: usize| {
        ConditionReport::new(
            ConditionId::ErgodicityWindow,
            ConditionVerdict::Fails,
            WitnessKind::State,
            state,
            -1.0,
            f64::NAN,
        )
    };
    match ergodicity_diagnostic(q, t_grid) {
        Ok(fit) => {
            let margin = if fit.lambda0.is_finite() {
                fit.lambda0
            } else {
                f64::MAX
            };
            let mut report = ConditionReport::new(
                ConditionId::ErgodicityWindow,
                ConditionVerdict::HoldsOnWindow,
                WitnessKind::State,
                0,
                margin,
                margin,
            );
            report.constants.insert("lambda0".into(), margin);
            report.constants.insert("K".into(), fit.prefactor);
            report.constants.insert("M".into(), q.max_exit_rate());
            report
        }
        Err(ChainError::NotIrreducible { state }) => failed(state),
        Err(_) => failed(0),
    }
}

/// `sup_a sum_i (1 + p b_i(a) + p^2 sigma_i(a)^2 / 2) / a_ii(a)` over the
/// window, compared against a user bound (`f64::INFINITY` accepts any finite
/// value). The margin is `bound - sup`, or `f64::MAX` for an infinite bound.
pub fn check_moment_condition(coeffs: &CoefficientTable, p: f64, bound: f64) -> ConditionReport {
    let n = coeffs.n_species();
    let mut sup = (f64::NEG_INFINITY, 0);
    for state in 0..coeffs.n_states() {
        let (b, s) = (coeffs.b(state), coeffs.sigma(state));
        let total: f64 = (0..n)
            .map(|i| {
                (1.0 + p * b[i] + 0.5 * p * p * s[i] * s[i]) / coeffs.a_entry(state, i, i)
            })
            .sum();
        if total > sup.0 || total.is_nan() {
            sup = (total, state);
        }
    }
    let (value, state) = sup;
    let holds = value.is_finite() && value <= bound;
    let margin = if !value.is_finite() {
        -1.0
    } else if bound.is_infinite() {
        f64::MAX
    } else {
        bound - value
    };
    let verdict = if holds {
        ConditionVerdict::HoldsOnWindow
    } else {
        ConditionVerdict::Fails
    };
    let mut report = ConditionReport::new(
        ConditionId::Moment,
        verdict,
        WitnessKind::State,
        state,
        margin,
        value,
    );
    report.constants.insert("p".into(), p);
    if bound.is_finite() {
        report.constants.insert("bound".into(), bound);
    }
    report
}

/// `(r_bar - a_bar_ii)^2 + 4 a_bar_ii (b_bar + sigma_bar^2)`; the stability
/// condition asks for this to be negative for every species.
pub fn stability_discriminant(r_bar: f64, a_ii: f64, b_bar: f64, sigma_bar: f64) -> f64 {
    (r_bar - a_ii).powi(2) + 4.0 * a_ii * (b_bar + sigma_bar * sigma_bar)
}

pub fn check_stability_condition(avg: &AveragedCoefficients) -> ConditionReport {
    let (worst, species) = (0..avg.n_species())
        .map(|i| {
            (
                stability_discriminant(avg.r_bar[i], avg.a_bar[i][i], avg.b_bar[i], avg.sigma_bar[i]),
                i,
            )
        })
        .fold((f64::NEG_INFINITY, 0), |acc, v| if v.0 > acc.0 { v } else { acc });
    let verdict = if worst < 0.0 {
        ConditionVerdict::Holds
    } else {
        ConditionVerdict::Fails
    };
    ConditionReport::new(
        ConditionId::Stability,
        verdict,
        WitnessKind::Species,
        species,
        -worst,
        worst,
    )
}

/// Margin `c* = min_i (sigma_bar_i^2 / 2 - r_bar_i)`; the extinction
/// condition holds with `c = c*` when it is positive.
pub fn extinction_margin(r_bar: f64, sigma_bar: f64) -> f64 {
    0.5 * sigma_bar * sigma_bar - r_bar
}

pub fn check_extinction_condition(avg: &AveragedCoefficients) -> ConditionReport {
    let (c, species) = (0..avg.n_species())
        .map(|i| (extinction_margin(avg.r_bar[i], avg.sigma_bar[i]), i))
        .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc });
    let verdict = if c > 0.0 {
        ConditionVerdict::Holds
    } else {
        ConditionVerdict::Fails
    };
    let mut report = ConditionReport::new(
        ConditionId::Extinction,
        verdict,
        WitnessKind::Species,
        species,
        c,
        c,
    );
    if c > 0.0 {
        report.constants.insert("c".into(), c);
    }
    report
}

/// Admissible `(theta, kappa)` for the reciprocal Lyapunov function: the
/// midpoints of `0 < theta sigma^2 < 2 b_min` and
/// `0 < 2 kappa / theta < 2 b_min - theta sigma^2`. With no noise `theta = 1`.
pub fn permanence_constants(b_min: f64, sigma_max: f64) -> (f64, f64) {
    let s2 = sigma_max * sigma_max;
    let theta = if s2 > 0.0 { b_min / s2 } else { 1.0 };
    let kappa = theta * (2.0 * b_min - theta * s2) / 4.0;
    (theta, kappa)
}

pub fn check_permanence_condition(avg: &AveragedCoefficients) -> ConditionReport {
    let (b_min, species) = avg
        .b_bar
        .iter()
        .enumerate()
        .map(|(i, &b)| (b, i))
        .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc });
    let holds = b_min > 0.0;
    let mut report = ConditionReport::new(
        ConditionId::Permanence,
        if holds {
            ConditionVerdict::Holds
        } else {
            ConditionVerdict::Fails
        },
        WitnessKind::Species,
        species,
        b_min,
        b_min,
    );
    if holds {
        let (theta, kappa) = permanence_constants(b_min, avg.sigma_max);
        report.constants.insert("theta".into(), theta);
        report.constants.insert("kappa".into(), kappa);
        report.constants.insert("b_min".into(), b_min);
        report.constants.insert("sigma_max".into(), avg.sigma_max);
    }
    report
}

/// Least-squares slope of `log x_species(t)` against `t` over recorded times
/// at or after `burn_in`.
pub fn sample_lyapunov_exponent(
    traj: &HybridTrajectory,
    species: usize,
    burn_in: f64,
) -> Result<f64, AnalysisError> {
    let horizon = traj.times.last().copied().unwrap_or(0.0);
    if !(horizon > 2.0 * burn_in) {
        return Err(AnalysisError::DegenerateWindow(format!(
            "horizon {horizon} must exceed twice the burn-in {burn_in}"
        )));
    }
    if species >= traj.n_species {
        return Err(AnalysisError::InvalidParameter(format!(
            "species {species} out of range"
        )));
    }
    let (ts, logs): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= burn_in)
        .map(|(k, &t)| (t, traj.state(k)[species].ln()))
        .unzip();
    least_squares_slope(&ts, &logs)
        .ok_or_else(|| AnalysisError::DegenerateWindow("fewer than two grid points".into()))
}
