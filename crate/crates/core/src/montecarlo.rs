//! Ensembles and falsification-style property probes.
//!
//! Paths are generated in parallel, path `k` on substream `seed ^ k`, and
//! collected in index order. Every statistic is reduced sequentially over
//! that order, so thread count never changes a report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{sample_lyapunov_exponent, AnalysisError};
use crate::averaging::AveragedCoefficients;
use crate::chain::{
    occupation_error_sample, ChainError, GeneratorSpec, StationaryDistribution, TwoTimeScaleChain,
};
use crate::dynamics::{
    euclidean_norm, simulate_hybrid, CoefficientTable, DynamicsError, HybridTrajectory, SimScheme,
};
use crate::rng::{derive_seed, RngStream};
use crate::stats::{
    ks_statistic, least_squares_slope, mean_estimate, proportion_ci95, quantile_with_ci,
    sorted_copy, Z95,
};

/// No verdict other than inconclusive is issued below this many paths.
pub const MIN_VERDICT_PATHS: usize = 100;
/// Default burn-in as a fraction of the horizon.
pub const BURN_IN_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonteCarloError {
    #[error("at least {min} paths are required, got {n}")]
    TooFewPaths { n: usize, min: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn invalid(msg: impl Into<String>) -> MonteCarloError {
    MonteCarloError::InvalidParameter(msg.into())
}

/// Everything needed to simulate one hybrid system. `generator` is the
/// composed chain `Q/eps + Q0`.
#[derive(Debug, Clone)]
pub struct HybridSystem {
    pub coeffs: CoefficientTable,
    pub generator: GeneratorSpec,
    pub x0: Vec<f64>,
    pub alpha0: usize,
    pub scenario_hash: String,
}

impl HybridSystem {
    pub fn new(
        coeffs: CoefficientTable,
        generator: GeneratorSpec,
        x0: Vec<f64>,
        alpha0: usize,
        scenario_hash: impl Into<String>,
    ) -> Self {
        Self {
            coeffs,
            generator,
            x0,
            alpha0,
            scenario_hash: scenario_hash.into(),
        }
    }

    /// The switching-free averaged system.
    pub fn averaged(
        avg: &AveragedCoefficients,
        x0: Vec<f64>,
        scenario_hash: impl Into<String>,
    ) -> Result<Self, MonteCarloError> {
        Ok(Self::new(
            avg.as_table()?,
            GeneratorSpec::trivial(),
            x0,
            0,
            scenario_hash,
        ))
    }

    /// Same system started from `x0`.
    pub fn with_initial(&self, x0: Vec<f64>) -> Self {
        Self {
            x0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub scenario_hash: String,
    pub seed: u64,
    pub horizon: f64,
    pub scheme: SimScheme,
    pub trajectories: Vec<HybridTrajectory>,
}

/// Simulates `n_paths` independent trajectories; path `k` uses substream
/// `seed ^ k`.
pub fn run_ensemble(
    system: &HybridSystem,
    n_paths: usize,
    horizon: f64,
    scheme: &SimScheme,
    seed: u64,
) -> Result<Ensemble, MonteCarloError> {
    if n_paths < 2 {
        return Err(MonteCarloError::TooFewPaths { n: n_paths, min: 2 });
    }
    let trajectories = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            simulate_hybrid(
                &system.coeffs,
                &system.generator,
                &system.x0,
                system.alpha0,
                horizon,
                scheme,
                &RngStream::substream(seed, k as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ensemble {
        scenario_hash: system.scenario_hash.clone(),
        seed,
        horizon,
        scheme: *scheme,
        trajectories,
    })
}

impl Ensemble {
    pub fn n_paths(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_species(&self) -> usize {
        self.trajectories[0].n_species
    }

    /// Per-path clamp flags.
    pub fn clamp_flags(&self) -> Vec<bool> {
        self.trajectories.iter().map(|t| !t.is_complete()).collect()
    }

    pub fn clamp_fraction(&self) -> f64 {
        let hits = self.clamp_flags().iter().filter(|&&f| f).count();
        hits as f64 / self.n_paths() as f64
    }

    /// Recorded grid shared by the complete paths.
    pub fn times(&self) -> &[f64] {
        &self
            .trajectories
            .iter()
            .max_by_key(|t| t.len())
            .expect("ensemble is non-empty")
            .times
    }

    /// State of path `path` at grid index `k`. A path stopped by the clamp
    /// keeps its last recorded state.
    pub fn state_at(&self, path: usize, k: usize) -> &[f64] {
        let traj = &self.trajectories[path];
        traj.state(k.min(traj.len() - 1))
    }

    /// Euclidean norms of all paths at grid index `k`, in path order.
    pub fn norms_at(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths())
            .map(|p| euclidean_norm(self.state_at(p, k)))
            .collect()
    }

    /// Coordinate `i` of all paths at grid index `k`.
    pub fn marginal_at(&self, k: usize, i: usize) -> Vec<f64> {
        (0..self.n_paths()).map(|p| self.state_at(p, k)[i]).collect()
    }

    pub fn terminal_index(&self) -> usize {
        self.times().len() - 1
    }

    /// CSV snapshot of every path at grid index `k`.
    pub fn snapshot_csv(&self, k: usize) -> String {
        let n = self.n_species();
        let mut out = String::from("path");
        for i in 1..=n {
            out.push_str(&format!(",x_{i}"));
        }
        out.push_str(",regime\n");
        for p in 0..self.n_paths() {
            let traj = &self.trajectories[p];
            let idx = k.min(traj.len() - 1);
            out.push_str(&(p + 1).to_string());
            for v in traj.state(idx) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", traj.regimes[idx] + 1));
        }
        out
    }

    fn burn_in_start(&self, burn_in: Option<f64>) -> usize {
        let burn = burn_in.unwrap_or(BURN_IN_FRACTION * self.horizon);
        self.times().partition_point(|&t| t < burn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    MomentBound,
    StochasticBoundedness,
    Stability,
    Extinction,
    Permanence,
    WeakConvergence,
    Holder,
    OEpsilon,
}

impl Property {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MomentBound => "moment-bound",
            Self::StochasticBoundedness => "stochastic-boundedness",
            Self::Stability => "stability",
            Self::Extinction => "extinction",
            Self::Permanence => "permanence",
            Self::WeakConvergence => "weak-convergence",
            Self::Holder => "holder",
            Self::OEpsilon => "o-epsilon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Inconclusive,
}

/// Outcome of one probe. `ci` holds 95% half-widths keyed like `estimate`;
/// `series` holds per-grid or per-parameter values for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: Property,
    #[serde(deserialize_with = "null_as_nan")]
    pub params: BTreeMap<String, f64>,
    #[serde(deserialize_with = "null_as_nan")]
    pub estimate: BTreeMap<String, f64>,
    #[serde(deserialize_with = "null_as_nan")]
    pub ci: BTreeMap<String, f64>,
    pub verdict: Verdict,
    pub n_paths: usize,
    pub seed: u64,
    pub scenario_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
}

/// JSON has no NaN; serde_json writes it as `null`.
fn null_as_nan<'de, D>(d: D) -> Result<BTreeMap<String, f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = BTreeMap::<String, Option<f64>>::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| (k, v.unwrap_or(f64::NAN)))
        .collect())
}

impl PropertyReport {
    fn new(property: Property, n_paths: usize, seed: u64, scenario_hash: &str) -> Self {
        Self {
            property,
            params: BTreeMap::new(),
            estimate: BTreeMap::new(),
            ci: BTreeMap::new(),
            verdict: Verdict::Inconclusive,
            n_paths,
            seed,
            scenario_hash: scenario_hash.to_owned(),
            series: BTreeMap::new(),
        }
    }

    fn for_ensemble(property: Property, ens: &Ensemble) -> Self {
        let mut r = Self::new(property, ens.n_paths(), ens.seed, &ens.scenario_hash);
        r.params.insert("horizon".into(), ens.horizon);
        r.params.insert("dt".into(), ens.scheme.dt);
        r.params.insert("clamp_fraction".into(), ens.clamp_fraction());
        r
    }

    fn put(&mut self, key: &str, value: f64, half_width: f64) {
        self.estimate.insert(key.into(), value);
        self.ci.insert(key.into(), half_width);
    }

    fn decide(&mut self, consistent: Option<bool>) {
        self.verdict = match consistent {
            _ if self.n_paths < MIN_VERDICT_PATHS => Verdict::Inconclusive,
            None => Verdict::Inconclusive,
            Some(true) => Verdict::Consistent,
            Some(false) => Verdict::Inconsistent,
        };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn within_band(values: &[f64], reference: f64, band: f64) -> bool {
    values
        .iter()
        .all(|v| (v - reference).abs() <= band * reference.abs())
}

/// Ensemble mean of `sum_i x_i^p` on the recorded grid. Consistent when the
/// running maximum plateaus: after burn-in, the maximum over the late half
/// of the grid is at most 1.1 times the maximum over the early half.
pub fn estimate_moment(
    ens: &Ensemble,
    p: f64,
    burn_in: Option<f64>,
) -> Result<PropertyReport, MonteCarloError> {
    let times = ens.times().to_vec();
    let mut report = PropertyReport::for_ensemble(Property::MomentBound, ens);
    report.params.insert("p".into(), p);

    let mut means = Vec::with_capacity(times.len());
    let mut halves = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let samples: Vec<f64> = (0..ens.n_paths())
            .map(|path| ens.state_at(path, k).iter().map(|x| x.powf(p)).sum())
            .collect();
        let e = mean_estimate(&samples);
        means.push(e.mean);
        halves.push(e.ci95());
    }
    let (arg, sup) = means
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &m)| if m > acc.1 { (k, m) } else { acc });
    report.put("sup_moment", sup, halves[arg]);
    report.put("terminal_moment", means[times.len() - 1], halves[times.len() - 1]);

    let start = ens.burn_in_start(burn_in);
    let window = &means[start..];
    report.params.insert("burn_in".into(), times.get(start).copied().unwrap_or(f64::NAN));
    let verdict = if window.len() < 2 {
        None
    } else {
        let mid = window.len() / 2;
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (early, late) = (max(&window[..mid]), max(&window[mid..]));
        report.estimate.insert("early_max".into(), early);
        report.estimate.insert("late_max".into(), late);
        report.estimate.insert("plateau_ratio".into(), late / early);
        Some(late <= 1.1 * early)
    };
    report.decide(verdict);
    report.series.insert("t".into(), times);
    report.series.insert("moment".into(), means);
    report.series.insert("ci".into(), halves);
    Ok(report)
}

/// `H` is the `(1 - delta)`-quantile of `|x|` at the last grid time.
/// Consistent when the quantile stays within 20% of `H` over the last half of
/// the post-burn-in grid.
pub fn boundedness_probe(
    ens: &Ensemble,
    delta: f64,
    burn_in: Option<f64>,
) -> Result<PropertyReport, MonteCarloError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid(format!("delta must lie in [0, 1], got {delta}")));
    }
    let mut report = PropertyReport::for_ensemble(Property::StochasticBoundedness, ens);
    report.params.insert("delta".into(), delta);
    let times = ens.times().to_vec();
    let start = ens.burn_in_start(burn_in);
    let quantiles: Vec<f64> = (start..times.len())
        .map(|k| quantile_with_ci(&sorted_copy(&ens.norms_at(k)), 1.0 - delta).0)
        .collect();
    let (h, lo, hi) = quantile_with_ci(&sorted_copy(&ens.norms_at(ens.terminal_index())), 1.0 - delta);
    report.put("H", h, 0.5 * (hi - lo));
    report.estimate.insert("H_lower".into(), lo);
    report.estimate.insert("H_upper".into(), hi);
    let verdict = if quantiles.len() < 2 {
        None
    } else {
        Some(h.is_finite() && within_band(&quantiles[quantiles.len() / 2..], h, 0.2))
    };
    report.decide(verdict);
    report.series.insert("t".into(), times[start..].to_vec());
    report.series.insert("H".into(), quantiles);
    Ok(report)
}

/// Escape probability `P{sup_t |x(t)| > escape_eps}` for initial conditions
/// `radius * x0 / |x0|`, radii strictly decreasing. The supremum runs over
/// the integration grid. All radii share the same seed. Consistent when the
/// escape probability is non-increasing and ends below 0.05.
pub fn stability_probe(
    system: &HybridSystem,
    radii: &[f64],
    escape_eps: f64,
    n_paths: usize,
    horizon: f64,
    scheme: &SimScheme,
    seed: u64,
) -> Result<PropertyReport, MonteCarloError> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("radii must be positive and non-empty"));
    }
    if radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("radii must be strictly decreasing"));
    }
    if !(escape_eps > 0.0) {
        return Err(invalid("escape threshold must be positive"));
    }
    let norm0 = euclidean_norm(&system.x0);
    let light = scheme.recording_every(scheme.steps(horizon).max(1));
    let mut report = PropertyReport::new(Property::Stability, n_paths, seed, &system.scenario_hash);
    report.params.insert("escape_eps".into(), escape_eps);
    report.params.insert("horizon".into(), horizon);
    report.params.insert("dt".into(), scheme.dt);

    let mut probs = Vec::with_capacity(radii.len());
    let mut halves = Vec::with_capacity(radii.len());
    for &radius in radii {
        let x0: Vec<f64> = system.x0.iter().map(|v| v * radius / norm0).collect();
        let ens = run_ensemble(&system.with_initial(x0), n_paths, horizon, &light, seed)?;
        let escaped = ens
            .trajectories
            .iter()
            .filter(|t| t.max_norm > escape_eps)
            .count();
        probs.push(escaped as f64 / n_paths as f64);
        halves.push(proportion_ci95(escaped, n_paths));
    }
    let last = probs.len() - 1;
    report.put("final_escape_probability", probs[last], halves[last]);
    let monotone = probs.windows(2).all(|w| w[1] <= w[0]);
    report.decide(Some(monotone && probs[last] < 0.05));
    report.series.insert("radius".into(), radii.to_vec());
    report.series.insert("escape_probability".into(), probs);
    report.series.insert("ci".into(), halves);
    Ok(report)
}

/// Extinct fraction `P{|x(T)| < threshold}` and per-species sample Lyapunov
/// exponents. Consistent when every exponent interval lies below 0 and, when
/// the averaged coefficients satisfy the extinction condition, below
/// `g_i + 0.05 |g_i|` with `g_i = r_bar_i - sigma_bar_i^2 / 2`.
pub fn extinction_probe(
    ens: &Ensemble,
    threshold: f64,
    avg: Option<&AveragedCoefficients>,
    burn_in: Option<f64>,
) -> Result<PropertyReport, MonteCarloError> {
    let mut report = PropertyReport::for_ensemble(Property::Extinction, ens);
    report.params.insert("threshold".into(), threshold);
    let burn = burn_in.unwrap_or(BURN_IN_FRACTION * ens.horizon);
    report.params.insert("burn_in".into(), burn);

    let terminal = ens.terminal_index();
    let extinct = ens.norms_at(terminal).iter().filter(|&&v| v < threshold).count();
    report.put(
        "extinct_fraction",
        extinct as f64 / ens.n_paths() as f64,
        proportion_ci95(extinct, ens.n_paths()),
    );

    let ine1 = avg.map(|a| {
        (0..a.n_species())
            .map(|i| 0.5 * a.sigma_bar[i] * a.sigma_bar[i] - a.r_bar[i])
            .fold(f64::INFINITY, f64::min)
            > 0.0
    });
    let mut all_ok = true;
    for i in 0..ens.n_species() {
        let exps = ens
            .trajectories
            .iter()
            .map(|t| sample_lyapunov_exponent(t, i, burn))
            .collect::<Result<Vec<_>, _>>()?;
        let e = mean_estimate(&exps);
        let key = format!("lyapunov_{}", i + 1);
        report.put(&key, e.mean, e.ci95());
        report
            .estimate
            .insert(format!("lyapunov_{}_se", i + 1), e.standard_error());
        let upper = e.mean + e.ci95();
        all_ok &= upper < 0.0;
        if let (Some(true), Some(a)) = (ine1, avg) {
            let g = a.r_bar[i] - 0.5 * a.sigma_bar[i] * a.sigma_bar[i];
            report.params.insert(format!("predicted_{}", i + 1), g);
            all_ok &= upper < g + 0.05 * g.abs();
        }
    }
    report.decide(Some(all_ok));
    Ok(report)
}

/// `H` and `K` are the `delta`- and `(1 - delta)`-quantiles of `|x|` at the
/// last grid time (`0 < delta <= 1/2`, so `H <= K`). Consistent when both
/// stay within 20% of their final values over the last half of the
/// post-burn-in grid and `H` exceeds three standard errors, the standard
/// error being read off the order-statistic interval.
pub fn permanence_probe(
    ens: &Ensemble,
    delta: f64,
    burn_in: Option<f64>,
) -> Result<PropertyReport, MonteCarloError> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(invalid(format!("delta must lie in (0, 1/2], got {delta}")));
    }
    let mut report = PropertyReport::for_ensemble(Property::Permanence, ens);
    report.params.insert("delta".into(), delta);
    let times = ens.times().to_vec();
    let start = ens.burn_in_start(burn_in);
    let mut hs = Vec::new();
    let mut ks = Vec::new();
    for k in start..times.len() {
        let sorted = sorted_copy(&ens.norms_at(k));
        hs.push(quantile_with_ci(&sorted, delta).0);
        ks.push(quantile_with_ci(&sorted, 1.0 - delta).0);
    }
    let sorted = sorted_copy(&ens.norms_at(ens.terminal_index()));
    let (h, h_lo, h_hi) = quantile_with_ci(&sorted, delta);
    let (k, k_lo, k_hi) = quantile_with_ci(&sorted, 1.0 - delta);
    let h_se = (h_hi - h_lo) / (2.0 * Z95);
    report.put("H", h, 0.5 * (h_hi - h_lo));
    report.put("K", k, 0.5 * (k_hi - k_lo));
    report.estimate.insert("H_se".into(), h_se);
    let margin = if h_se > 0.0 {
        h / h_se
    } else if h > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    report.estimate.insert("H_margin_se".into(), margin);
    let verdict = if hs.len() < 2 {
        None
    } else {
        let mid = hs.len() / 2;
        let stable = within_band(&hs[mid..], h, 0.2) && within_band(&ks[mid..], k, 0.2);
        Some(stable && h > 0.0 && margin >= 3.0)
    };
    report.decide(verdict);
    report.series.insert("t".into(), times[start..].to_vec());
    report.series.insert("H".into(), hs);
    report.series.insert("K".into(), ks);
    Ok(report)
}

/// Distance between two snapshot samples: the largest coordinatewise
/// two-sample KS statistic, plus the largest relative differences of the
/// first and second moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotDistance {
    pub ks: f64,
    pub mean_rel: f64,
    pub second_moment_rel: f64,
}

pub fn snapshot_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> SnapshotDistance {
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE);
    let mut d = SnapshotDistance {
        ks: 0.0,
        mean_rel: 0.0,
        second_moment_rel: 0.0,
    };
    for (ca, cb) in a.iter().zip(b) {
        d.ks = d.ks.max(ks_statistic(ca, cb));
        let m = |c: &[f64], pow: i32| c.iter().map(|v| v.powi(pow)).sum::<f64>() / c.len() as f64;
        d.mean_rel = d.mean_rel.max(rel(m(ca, 1), m(cb, 1)));
        d.second_moment_rel = d.second_moment_rel.max(rel(m(ca, 2), m(cb, 2)));
    }
    d
}

fn terminal_marginals(ens: &Ensemble) -> Vec<Vec<f64>> {
    let k = ens.terminal_index();
    (0..ens.n_species()).map(|i| ens.marginal_at(k, i)).collect()
}

/// Compares `x^eps(t_snap)` for each system of the family against the
/// averaged system. The averaged ensemble uses seed `derive_seed(seed, 0)`
/// and the family member at position `j` uses `derive_seed(seed, j + 1)`.
/// The noise floor is the distance between the two halves of the averaged
/// ensemble. Consistent when the distance is non-increasing as `eps`
/// decreases and the smallest-`eps` distance is within three noise floors.
pub fn weak_convergence_distance(
    family: &[(f64, HybridSystem)],
    averaged: &HybridSystem,
    t_snap: f64,
    n_paths: usize,
    scheme: &SimScheme,
    seed: u64,
) -> Result<PropertyReport, MonteCarloError> {
    if family.is_empty() {
        return Err(invalid("empty epsilon family"));
    }
    if n_paths < 4 {
        return Err(MonteCarloError::TooFewPaths { n: n_paths, min: 4 });
    }
    let light = scheme.recording_every(scheme.steps(t_snap).max(1));
    let reference = run_ensemble(averaged, n_paths, t_snap, &light, derive_seed(seed, 0))?;
    let ref_marg = terminal_marginals(&reference);
    let half = n_paths / 2;
    let (first, second): (Vec<Vec<f64>>, Vec<Vec<f64>>) = ref_marg
        .iter()
        .map(|c| (c[..half].to_vec(), c[half..].to_vec()))
        .unzip();
    let floor = snapshot_distance(&first, &second);

    let mut order: Vec<usize> = (0..family.len()).collect();
    order.sort_by(|&a, &b| family[b].0.total_cmp(&family[a].0));
    let mut eps = Vec::new();
    let mut ks = Vec::new();
    let mut mean_rel = Vec::new();
    let mut second_rel = Vec::new();
    for &j in &order {
        let (e, system) = &family[j];
        let ens = run_ensemble(system, n_paths, t_snap, &light, derive_seed(seed, j as u64 + 1))?;
        let d = snapshot_distance(&terminal_marginals(&ens), &ref_marg);
        eps.push(*e);
        ks.push(d.ks);
        mean_rel.push(d.mean_rel);
        second_rel.push(d.second_moment_rel);
    }

    let mut report =
        PropertyReport::new(Property::WeakConvergence, n_paths, seed, &averaged.scenario_hash);
    report.params.insert("t_snap".into(), t_snap);
    report.params.insert("dt".into(), scheme.dt);
    let last = ks.len() - 1;
    // Asymptotic 95% critical value of the two-sample KS statistic.
    let ks_crit = 1.358 * (2.0 / n_paths as f64).sqrt();
    report.put("ks_smallest_eps", ks[last], ks_crit);
    report.estimate.insert("noise_floor".into(), floor.ks);
    report.estimate.insert("noise_floor_mean_rel".into(), floor.mean_rel);
    report
        .estimate
        .insert("noise_floor_second_moment_rel".into(), floor.second_moment_rel);
    let monotone = ks.windows(2).all(|w| w[1] <= w[0]);
    report.decide(Some(monotone && ks[last] <= 3.0 * floor.ks));
    report.series.insert("epsilon".into(), eps);
    report.series.insert("ks".into(), ks);
    report.series.insert("mean_rel".into(), mean_rel);
    report.series.insert("second_moment_rel".into(), second_rel);
    Ok(report)
}

/// Kolmogorov-type increment statistic `E|x(t) - x(s)|^4 / |t - s|^2` at each
/// pair scale, averaged over all grid pairs of that separation. Scales must
/// be multiples of the recorded grid step. The divergence ratio is the
/// statistic at the smallest scale over that at the largest; consistent
/// when it is at most 5. A single scale, or `gamma >= 1/4`, is inconclusive.
pub fn holder_diagnostic(
    ens: &Ensemble,
    gamma: f64,
    pair_scales: &[f64],
) -> Result<PropertyReport, MonteCarloError> {
    if pair_scales.is_empty() {
        return Err(invalid("no pair scales"));
    }
    let times = ens.times();
    if times.len() < 2 {
        return Err(invalid("ensemble records a single grid point"));
    }
    let step = times[1] - times[0];
    let mut report = PropertyReport::for_ensemble(Property::Holder, ens);
    report.params.insert("gamma".into(), gamma);

    let mut scales: Vec<f64> = pair_scales.to_vec();
    scales.sort_by(|a, b| b.total_cmp(a));
    let mut stats = Vec::with_capacity(scales.len());
    let mut halves = Vec::with_capacity(scales.len());
    for &h in &scales {
        let m = (h / step).round() as usize;
        if m == 0 || ((m as f64) * step - h).abs() > 1e-9 * h.max(1.0) || m >= times.len() {
            return Err(invalid(format!(
                "pair scale {h} is not a multiple of the grid step {step} within the horizon"
            )));
        }
        let lag = m as f64 * step;
        let per_path: Vec<f64> = ens
            .trajectories
            .iter()
            .map(|traj| {
                let count = traj.len().saturating_sub(m);
                if count == 0 {
                    return 0.0;
                }
                let total: f64 = (0..count)
                    .map(|s| {
                        let (a, b) = (traj.state(s), traj.state(s + m));
                        let d2: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
                        d2 * d2
                    })
                    .sum();
                total / count as f64 / (lag * lag)
            })
            .collect();
        let e = mean_estimate(&per_path);
        stats.push(e.mean);
        halves.push(e.ci95());
    }
    let (first, last) = (0, stats.len() - 1);
    report.put("largest_scale", stats[first], halves[first]);
    report.put("smallest_scale", stats[last], halves[last]);
    let ratio = stats[last] / stats[first];
    report.estimate.insert("divergence_ratio".into(), ratio);
    let verdict = if scales.len() < 2 || gamma >= 0.25 {
        None
    } else {
        Some(ratio <= 5.0 || stats[last] == 0.0)
    };
    report.decide(verdict);
    report.series.insert("scale".into(), scales);
    report.series.insert("statistic".into(), stats);
    report.series.insert("ci".into(), halves);
    Ok(report)
}

/// Mean square of the discounted occupation error of `target` for each chain
/// of the family, with the least-squares slope of log mean square against
/// log eps. Chain `j` draws replication `k` from substream
/// `derive_seed(seed, j) ^ k`. Consistent when the slope lies in
/// `[0.7, 1.3]`; a vanishing mean square is inconclusive.
pub fn o_epsilon_experiment(
    family: &[TwoTimeScaleChain],
    alpha0: usize,
    target: usize,
    nu: &StationaryDistribution,
    n_reps: usize,
    horizon: f64,
    seed: u64,
) -> Result<PropertyReport, MonteCarloError> {
    if family.is_empty() {
        return Err(invalid("empty epsilon family"));
    }
    if n_reps < 2 {
        return Err(MonteCarloError::TooFewPaths { n: n_reps, min: 2 });
    }
    let mut report = PropertyReport::new(Property::OEpsilon, n_reps, seed, "");
    report.params.insert("alpha0".into(), (alpha0 + 1) as f64);
    report.params.insert("target".into(), (target + 1) as f64);
    report.params.insert("horizon".into(), horizon);

    let mut eps = Vec::new();
    let mut ms = Vec::new();
    let mut halves = Vec::new();
    for (j, chain) in family.iter().enumerate() {
        let base = derive_seed(seed, j as u64);
        let squares = (0..n_reps)
            .into_par_iter()
            .map(|k| {
                occupation_error_sample(
                    chain,
                    alpha0,
                    target,
                    nu,
                    horizon,
                    &RngStream::substream(base, k as u64),
                )
                .map(|e| e * e)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let e = mean_estimate(&squares);
        eps.push(chain.epsilon());
        ms.push(e.mean);
        halves.push(e.ci95());
    }
    let degenerate = ms.iter().any(|&m| !(m > 0.0)) || eps.len() < 2;
    let slope = if degenerate {
        None
    } else {
        let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = ms.iter().map(|m| m.ln()).collect();
        least_squares_slope(&lx, &ly)
    };
    report.estimate.insert("slope".into(), slope.unwrap_or(f64::NAN));
    report.decide(slope.map(|s| (0.7..=1.3).contains(&s)));
    report.series.insert("epsilon".into(), eps);
    report.series.insert("mean_square".into(), ms);
    report.series.insert("ci".into(), halves);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_generator;
    use crate::dynamics::RegimeCoefficients;

    fn logistic_system(sigma: f64, x0: f64) -> HybridSystem {
        let coeffs = CoefficientTable::new(&[RegimeCoefficients {
            b: vec![1.0],
            a: vec![vec![2.0]],
            sigma: vec![sigma],
        }])
        .unwrap();
        HybridSystem::new(coeffs, GeneratorSpec::trivial(), vec![x0], 0, "test")
    }

    fn scheme() -> SimScheme {
        SimScheme::with_dt(1e-2).recording_every(10)
    }

    #[test]
    fn ensembles_are_reproducible_and_start_at_x0() {
        let sys = logistic_system(0.3, 0.25);
        let a = run_ensemble(&sys, 2, 1.0, &scheme(), 5).unwrap();
        let b = run_ensemble(&sys, 2, 1.0, &scheme(), 5).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.marginal_at(0, 0), vec![0.25, 0.25]);
        assert_eq!(a.clamp_fraction(), 0.0);
        assert!(run_ensemble(&sys, 1, 1.0, &scheme(), 5).is_err());
    }

    #[test]
    fn clamp_flags_are_reported() {
        let coeffs = CoefficientTable::new(&[RegimeCoefficients {
            b: vec![-5.0],
            a: vec![vec![1.0]],
            sigma: vec![0.0],
        }])
        .unwrap();
        let sys = HybridSystem::new(coeffs, GeneratorSpec::trivial(), vec![1.0], 0, "clamp");
        let mut s = SimScheme::with_dt(1e-2);
        s.clamp = 10.0;
        let ens = run_ensemble(&sys, 3, 4.0, &s, 1).unwrap();
        assert_eq!(ens.clamp_flags(), vec![true; 3]);
        assert_eq!(ens.clamp_fraction(), 1.0);
    }

    #[test]
    fn zeroth_moment_is_species_count() {
        let ens = run_ensemble(&logistic_system(0.5, 0.2), 100, 2.0, &scheme(), 3).unwrap();
        let r = estimate_moment(&ens, 0.0, None).unwrap();
        assert_eq!(r.estimate["sup_moment"], 1.0);
        assert_eq!(r.ci["sup_moment"], 0.0);
        assert_eq!(r.verdict, Verdict::Consistent);
    }

    #[test]
    fn few_paths_are_inconclusive() {
        let ens = run_ensemble(&logistic_system(0.0, 0.2), 10, 5.0, &scheme(), 3).unwrap();
        let r = estimate_moment(&ens, 1.0, None).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn boundedness_quantile_boundaries() {
        let ens = run_ensemble(&logistic_system(0.5, 0.5), 120, 2.0, &scheme(), 9).unwrap();
        let r = boundedness_probe(&ens, 1.0, None).unwrap();
        let min = ens
            .norms_at(ens.terminal_index())
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.estimate["H"], min);
        assert!(boundedness_probe(&ens, 1.5, None).is_err());
    }

    #[test]
    fn permanence_quantiles_are_ordered() {
        let ens = run_ensemble(&logistic_system(0.5, 0.5), 150, 3.0, &scheme(), 2).unwrap();
        for delta in [0.01, 0.1, 0.3, 0.5] {
            let r = permanence_probe(&ens, delta, None).unwrap();
            assert!(r.estimate["H"] <= r.estimate["K"]);
        }
        let med = permanence_probe(&ens, 0.5, None).unwrap();
        assert_eq!(med.estimate["H"], med.estimate["K"]);
    }

    #[test]
    fn infinite_threshold_counts_every_path() {
        let ens = run_ensemble(&logistic_system(0.5, 0.5), 20, 3.0, &scheme(), 2).unwrap();
        let r = extinction_probe(&ens, f64::INFINITY, None, None).unwrap();
        assert_eq!(r.estimate["extinct_fraction"], 1.0);
    }

    #[test]
    fn immediate_escape() {
        let sys = logistic_system(0.1, 0.5);
        let r = stability_probe(&sys, &[0.5, 0.4], 0.1, 100, 1.0, &scheme(), 4).unwrap();
        assert_eq!(r.series["escape_probability"], vec![1.0, 1.0]);
        assert_eq!(r.verdict, Verdict::Inconsistent);
        assert!(stability_probe(&sys, &[0.1, 0.2], 0.1, 100, 1.0, &scheme(), 4).is_err());
    }

    #[test]
    fn split_halves_of_one_sample() {
        let xs: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let d = snapshot_distance(&[xs.clone()], &[xs]);
        assert_eq!(d.ks, 0.0);
        assert_eq!(d.mean_rel, 0.0);
    }

    #[test]
    fn holder_single_scale_and_smooth_path() {
        let ens = run_ensemble(&logistic_system(0.0, 0.05), 100, 4.0, &scheme(), 1).unwrap();
        let one = holder_diagnostic(&ens, 0.2, &[0.5]).unwrap();
        assert_eq!(one.verdict, Verdict::Inconclusive);
        let many = holder_diagnostic(&ens, 0.2, &[1.0, 0.5, 0.1]).unwrap();
        let stats = &many.series["statistic"];
        assert!(stats[2] < stats[1] && stats[1] < stats[0]);
        assert_eq!(many.verdict, Verdict::Consistent);
        let wide = holder_diagnostic(&ens, 0.3, &[1.0, 0.1]).unwrap();
        assert_eq!(wide.verdict, Verdict::Inconclusive);
        assert!(holder_diagnostic(&ens, 0.2, &[0.15]).is_err());
    }

    #[test]
    fn one_state_chain_is_degenerate() {
        let q = GeneratorSpec::trivial();
        let family: Vec<TwoTimeScaleChain> = [0.2, 0.1]
            .iter()
            .map(|&e| TwoTimeScaleChain::fast_only(q.clone(), e).unwrap())
            .collect();
        let nu = StationaryDistribution::point_mass();
        let r = o_epsilon_experiment(&family, 0, 0, &nu, 200, 40.0, 1).unwrap();
        assert_eq!(r.series["mean_square"], vec![0.0, 0.0]);
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(r.estimate["slope"].is_nan());
    }

    #[test]
    fn report_json_round_trip() {
        let q = build_generator(&[vec![(1, 1.0)], vec![(0, 1.0)]], 2, 0.0).unwrap();
        let family = vec![TwoTimeScaleChain::fast_only(q, 0.1).unwrap()];
        let nu = StationaryDistribution {
            nu: vec![0.5, 0.5],
            residual: 0.0,
            tail_mass: 0.0,
        };
        let r = o_epsilon_experiment(&family, 0, 0, &nu, 10, 40.0, 1).unwrap();
        let back: PropertyReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.property, Property::OEpsilon);
        assert_eq!(back.series["mean_square"], r.series["mean_square"]);
    }
}
