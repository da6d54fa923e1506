//! Coefficients of the averaged (switching-free) system.
//!
//! Growth rates and the community matrix are averaged linearly against the
//! stationary law. Noise enters through its variance: `sigma_bar_i` is the
//! square root of the averaged `sigma_i^2`, never the average of `sigma_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::StationaryDistribution;
use crate::dynamics::{CoefficientTable, DynamicsError, RegimeCoefficients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error("stationary law covers {window} states but coefficients exist for only {available}")]
    MissingState { window: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedCoefficients {
    pub r_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub a_bar: Vec<Vec<f64>>,
    pub sigma_bar: Vec<f64>,
    /// `max_i r_bar_i`.
    pub r_max: f64,
    /// `min_i r_bar_i`.
    pub r_min: f64,
    /// `min_i b_bar_i`.
    pub b_min: f64,
    /// `max_ij a_bar_ij`.
    pub a_max: f64,
    /// `max_i sigma_bar_i`.
    pub sigma_max: f64,
    /// Largest change any averaged coefficient (or `sigma_bar^2`) could see
    /// from stationary mass outside the truncation window.
    pub tail_bound: f64,
}

impl AveragedCoefficients {
    pub fn n_species(&self) -> usize {
        self.b_bar.len()
    }

    /// Builds the summary constants from the averaged vectors.
    pub fn from_parts(
        r_bar: Vec<f64>,
        b_bar: Vec<f64>,
        a_bar: Vec<Vec<f64>>,
        sigma_bar: Vec<f64>,
        tail_bound: f64,
    ) -> Self {
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            r_max: max(&r_bar),
            r_min: min(&r_bar),
            b_min: min(&b_bar),
            a_max: a_bar.iter().map(|row| max(row)).fold(f64::NEG_INFINITY, f64::max),
            sigma_max: max(&sigma_bar),
            r_bar,
            b_bar,
            a_bar,
            sigma_bar,
            tail_bound,
        }
    }

    /// The averaged system as a one-state coefficient table.
    pub fn as_table(&self) -> Result<CoefficientTable, DynamicsError> {
        CoefficientTable::without_competition_check(&[RegimeCoefficients {
            b: self.b_bar.clone(),
            a: self.a_bar.clone(),
            sigma: self.sigma_bar.clone(),
        }])
    }
}

pub fn average_coefficients(
    coeffs: &CoefficientTable,
    nu: &StationaryDistribution,
) -> Result<AveragedCoefficients, AveragingError> {
    let window = nu.len();
    if coeffs.n_states() < window {
        return Err(AveragingError::MissingState {
            window,
            available: coeffs.n_states(),
        });
    }
    let n = coeffs.n_species();
    let mut r_bar = vec![0.0; n];
    let mut b_bar = vec![0.0; n];
    let mut var_bar = vec![0.0; n];
    let mut a_flat = vec![0.0; n * n];
    let mut sup: f64 = 0.0;
    for (state, &w) in nu.nu.iter().enumerate() {
        let (r, b, s, a) = (
            coeffs.r(state),
            coeffs.b(state),
            coeffs.sigma(state),
            coeffs.a(state),
        );
        for i in 0..n {
            r_bar[i] += r[i] * w;
            b_bar[i] += b[i] * w;
            var_bar[i] += s[i] * s[i] * w;
            sup = sup.max(r[i].abs()).max(b[i].abs()).max(s[i] * s[i]);
        }
        for (acc, v) in a_flat.iter_mut().zip(a) {
            *acc += v * w;
            sup = sup.max(v.abs());
        }
    }
    let sigma_bar = var_bar.iter().map(|v| v.sqrt()).collect();
    let a_bar = a_flat.chunks(n).map(<[f64]>::to_vec).collect();
    // Renormalising the window mass and dropping the outside mass each move
    // an average by at most tail_mass * sup.
    let tail_bound = 2.0 * nu.tail_mass * sup;
    Ok(AveragedCoefficients::from_parts(
        r_bar, b_bar, a_bar, sigma_bar, tail_bound,
    ))
}

/// Drift `x_i (r_bar_i - sum_j a_bar_ij x_j)` and diffusion diagonal
/// `x_i sigma_bar_i` of the averaged system.
pub fn averaged_drift_diffusion(x: &[f64], avg: &AveragedCoefficients) -> (Vec<f64>, Vec<f64>) {
    let drift = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let interaction: f64 = avg.a_bar[i].iter().zip(x).map(|(a, x)| a * x).sum();
            xi * (avg.r_bar[i] - interaction)
        })
        .collect();
    let diffusion = x.iter().zip(&avg.sigma_bar).map(|(x, s)| x * s).collect();
    (drift, diffusion)
}
