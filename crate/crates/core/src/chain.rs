//! Countable-state continuous-time Markov chains on a finite truncation
//! window.
//!
//! States are `0..size` in the Rust API. External documents (generator JSON,
//! regime CSV) number states from 1.
//!
//! Rates that point outside the window are dropped and the diagonal is
//! recomputed from the retained rates, so the window behaves as a reflecting
//! boundary. The largest per-row loss is kept as `tail_mass_bound` and must
//! not exceed the caller's tolerance.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

/// Largest window accepted by [`transition_matrix`].
pub const MAX_DENSE_WINDOW: usize = 500;

/// Windows up to this size use the dense GTH elimination; larger windows use
/// sparse Gauss-Seidel sweeps.
const GTH_MAX_WINDOW: usize = 1500;

const GAUSS_SEIDEL_MAX_SWEEPS: usize = 200_000;

/// Deviations below this level are treated as exact convergence by the
/// ergodicity fit.
const DEVIATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("rate from state {from} to state {to} is negative ({rate})")]
    NegativeRate { from: usize, to: usize, rate: f64 },
    #[error("state {state} loses rate {lost} to truncated states, above tolerance {tol}")]
    TailMassExceeded { state: usize, lost: f64, tol: f64 },
    #[error("truncation window must hold at least {min} states, got {size}")]
    WindowTooSmall { size: usize, min: usize },
    #[error("state {state} is outside the window of {size} states")]
    StateOutOfWindow { state: usize, size: usize },
    #[error("generator is not irreducible on the window (state {state} is not mutually reachable from state 0)")]
    NotIrreducible { state: usize },
    #[error("stationary solver residual {residual:e} above tolerance {tol:e}")]
    SolverFailure { residual: f64, tol: f64 },
    #[error("generator sizes differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("window of {size} states exceeds the dense cap of {cap}")]
    WindowTooLarge { size: usize, cap: usize },
    #[error("deviation from stationarity does not decay over the grid")]
    FitFailure,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Generator `Q = (q_ab)` of a chain on `{0, .., size-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    /// Retained off-diagonal rates per row, sorted by target.
    rows: Vec<Vec<(usize, f64)>>,
    /// `q_a = sum_b q_ab` over retained targets.
    exit_rates: Vec<f64>,
    /// Rate per row dropped because its target fell outside the window.
    lost_rates: Vec<f64>,
    tail_mass_bound: f64,
    max_exit_rate: f64,
}

impl GeneratorSpec {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, state: usize) -> &[(usize, f64)] {
        &self.rows[state]
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return self.diagonal(from);
        }
        self.rows[from]
            .binary_search_by_key(&to, |&(t, _)| t)
            .map(|k| self.rows[from][k].1)
            .unwrap_or(0.0)
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit_rates[state]
    }

    pub fn diagonal(&self, state: usize) -> f64 {
        -self.exit_rates[state]
    }

    pub fn lost_rate(&self, state: usize) -> f64 {
        self.lost_rates[state]
    }

    pub fn tail_mass_bound(&self) -> f64 {
        self.tail_mass_bound
    }

    /// `M = sup_a q_a` over the window.
    pub fn max_exit_rate(&self) -> f64 {
        self.max_exit_rate
    }

    /// One-state chain with no transitions.
    pub fn trivial() -> Self {
        Self::from_rows(vec![Vec::new()], vec![0.0])
    }

    /// Generator with every rate zero on `size` states (a frozen chain).
    pub fn frozen(size: usize) -> Self {
        Self::from_rows(vec![Vec::new(); size], vec![0.0; size])
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut m = DMatrix::zeros(n, n);
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, q) in row {
                m[(a, b)] = q;
            }
            m[(a, a)] = self.diagonal(a);
        }
        m
    }

    /// Off-diagonal entries as a flat list, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(a, row)| row.iter().map(move |&(b, q)| (a, b, q)))
    }

    fn from_rows(rows: Vec<Vec<(usize, f64)>>, lost_rates: Vec<f64>) -> Self {
        let exit_rates: Vec<f64> = rows
            .iter()
            .map(|row| row.iter().map(|&(_, q)| q).sum())
            .collect();
        let tail_mass_bound = lost_rates.iter().copied().fold(0.0, f64::max);
        let max_exit_rate = exit_rates.iter().copied().fold(0.0, f64::max);
        Self {
            rows,
            exit_rates,
            lost_rates,
            tail_mass_bound,
            max_exit_rate,
        }
    }

    pub fn to_doc(&self, tail_tol: f64) -> GeneratorDoc {
        GeneratorDoc {
            trunc_size: self.size(),
            rows: self
                .entries()
                .map(|(a, b, rate)| RateDoc {
                    from: a + 1,
                    to: b + 1,
                    rate,
                })
                .collect(),
            tail_tol,
        }
    }
}

/// Builds a generator on `{0, .., trunc_size-1}` from per-state off-diagonal
/// rate lists.
///
/// Targets `>= trunc_size` are dropped and counted as lost rate. Rows beyond
/// the window are ignored, missing rows have no outgoing rates, self-rates
/// are ignored and duplicate targets are summed.
pub fn build_generator(
    rate_rows: &[Vec<(usize, f64)>],
    trunc_size: usize,
    tail_tol: f64,
) -> Result<GeneratorSpec, ChainError> {
    build_window(rate_rows, trunc_size, tail_tol, 2)
}

fn build_window(
    rate_rows: &[Vec<(usize, f64)>],
    trunc_size: usize,
    tail_tol: f64,
    min_size: usize,
) -> Result<GeneratorSpec, ChainError> {
    if trunc_size < min_size {
        return Err(ChainError::WindowTooSmall {
            size: trunc_size,
            min: min_size,
        });
    }
    for (from, row) in rate_rows.iter().enumerate() {
        for &(to, rate) in row {
            if !(rate >= 0.0) || !rate.is_finite() {
                return Err(ChainError::NegativeRate { from, to, rate });
            }
        }
    }
    let mut rows = vec![Vec::new(); trunc_size];
    let mut lost = vec![0.0; trunc_size];
    for (from, row) in rate_rows.iter().enumerate().take(trunc_size) {
        let kept: &mut Vec<(usize, f64)> = &mut rows[from];
        for &(to, rate) in row {
            if to == from || rate == 0.0 {
                continue;
            }
            if to >= trunc_size {
                lost[from] += rate;
                continue;
            }
            match kept.iter_mut().find(|(t, _)| *t == to) {
                Some(entry) => entry.1 += rate,
                None => kept.push((to, rate)),
            }
        }
        kept.sort_by_key(|&(t, _)| t);
    }
    if let Some((state, &l)) = lost
        .iter()
        .enumerate()
        .find(|(_, &l)| l > tail_tol)
    {
        return Err(ChainError::TailMassExceeded {
            state,
            lost: l,
            tol: tail_tol,
        });
    }
    Ok(GeneratorSpec::from_rows(rows, lost))
}

/// One off-diagonal rate in a generator document (states numbered from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateDoc {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

/// JSON form of a generator: `{"trunc_size": N, "rows": [...], "tail_tol": x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDoc {
    pub trunc_size: usize,
    pub rows: Vec<RateDoc>,
    #[serde(default)]
    pub tail_tol: f64,
}

impl GeneratorDoc {
    /// Builds the generator. A one-state window is accepted here so that
    /// scenario files can describe switching-free systems.
    pub fn build(&self) -> Result<GeneratorSpec, ChainError> {
        let mut rows = vec![Vec::new(); self.trunc_size];
        for r in &self.rows {
            if r.from == 0 || r.from > self.trunc_size {
                return Err(ChainError::StateOutOfWindow {
                    state: r.from,
                    size: self.trunc_size,
                });
            }
            if r.to == 0 {
                return Err(ChainError::InvalidParameter(
                    "rate targets are numbered from 1".into(),
                ));
            }
            rows[r.from - 1].push((r.to - 1, r.rate));
        }
        build_window(&rows, self.trunc_size, self.tail_tol, 1)
    }
}

/// Generator `Q/eps + Q0` together with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimeScaleChain {
    fast: GeneratorSpec,
    slow: GeneratorSpec,
    epsilon: f64,
    composed: GeneratorSpec,
}

impl TwoTimeScaleChain {
    pub fn new(
        fast: GeneratorSpec,
        slow: GeneratorSpec,
        epsilon: f64,
    ) -> Result<Self, ChainError> {
        let composed = compose_two_time_scale(&fast, &slow, epsilon)?;
        Ok(Self {
            fast,
            slow,
            epsilon,
            composed,
        })
    }

    /// Chain with no slow part.
    pub fn fast_only(fast: GeneratorSpec, epsilon: f64) -> Result<Self, ChainError> {
        let slow = GeneratorSpec::frozen(fast.size());
        Self::new(fast, slow, epsilon)
    }

    pub fn fast(&self) -> &GeneratorSpec {
        &self.fast
    }

    pub fn slow(&self) -> &GeneratorSpec {
        &self.slow
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn composed(&self) -> &GeneratorSpec {
        &self.composed
    }
}

/// Entrywise `Q/eps + Q0` with the diagonal recomputed.
pub fn compose_two_time_scale(
    fast: &GeneratorSpec,
    slow: &GeneratorSpec,
    epsilon: f64,
) -> Result<GeneratorSpec, ChainError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ChainError::InvalidParameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if fast.size() != slow.size() {
        return Err(ChainError::DimensionMismatch {
            left: fast.size(),
            right: slow.size(),
        });
    }
    let n = fast.size();
    let mut rows = Vec::with_capacity(n);
    for a in 0..n {
        let mut row: Vec<(usize, f64)> =
            fast.row(a).iter().map(|&(b, q)| (b, q / epsilon)).collect();
        for &(b, q) in slow.row(a) {
            match row.iter_mut().find(|(t, _)| *t == b) {
                Some(entry) => entry.1 += q,
                None => row.push((b, q)),
            }
        }
        row.sort_by_key(|&(t, _)| t);
        rows.push(row);
    }
    let lost = (0..n)
        .map(|a| fast.lost_rate(a) / epsilon + slow.lost_rate(a))
        .collect();
    Ok(GeneratorSpec::from_rows(rows, lost))
}

/// Stationary law `nu` with `nu Q = 0`, `sum nu = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub nu: Vec<f64>,
    /// `max_b |(nu Q)_b|`.
    pub residual: f64,
    /// Estimated stationary mass outside the window: the stationary flux of
    /// truncated transitions divided by the slowest exit rate on the window.
    pub tail_mass: f64,
}

impl StationaryDistribution {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn point_mass() -> Self {
        Self {
            nu: vec![1.0],
            residual: 0.0,
            tail_mass: 0.0,
        }
    }
}

/// Checks strong connectivity of the jump graph by forward and backward
/// reachability from state 0.
pub fn check_irreducible(q: &GeneratorSpec) -> Result<(), ChainError> {
    let n = q.size();
    let mut incoming = vec![Vec::new(); n];
    for (a, b, _) in q.entries() {
        incoming[b].push(a);
    }
    let outgoing: Vec<Vec<usize>> = (0..n)
        .map(|a| q.row(a).iter().map(|&(b, _)| b).collect())
        .collect();
    for adj in [&outgoing, &incoming] {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for &b in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        if let Some(state) = seen.iter().position(|s| !s) {
            return Err(ChainError::NotIrreducible { state });
        }
    }
    Ok(())
}

fn stationary_residual(q: &GeneratorSpec, nu: &[f64]) -> f64 {
    let n = q.size();
    let mut flow = vec![0.0; n];
    for (a, b, rate) in q.entries() {
        flow[b] += nu[a] * rate;
    }
    (0..n)
        .map(|b| (flow[b] - nu[b] * q.exit_rate(b)).abs())
        .fold(0.0, f64::max)
}

pub fn stationary_distribution(
    q: &GeneratorSpec,
    tol: f64,
) -> Result<StationaryDistribution, ChainError> {
    check_irreducible(q)?;
    let n = q.size();
    let nu = if n == 1 {
        vec![1.0]
    } else if n <= GTH_MAX_WINDOW {
        gth_solve(q)
    } else {
        gauss_seidel_solve(q, tol)?
    };
    let residual = stationary_residual(q, &nu);
    if !(residual <= tol) {
        return Err(ChainError::SolverFailure { residual, tol });
    }
    let leak: f64 = (0..n).map(|a| nu[a] * q.lost_rate(a)).sum();
    let slowest = (0..n)
        .map(|a| q.exit_rate(a) + q.lost_rate(a))
        .fold(f64::INFINITY, f64::min);
    let tail_mass = if leak == 0.0 {
        0.0
    } else {
        (leak / slowest).min(1.0)
    };
    Ok(StationaryDistribution {
        nu,
        residual,
        tail_mass,
    })
}

/// Grassmann-Taksar-Heyman elimination. Subtraction-free, so every entry of
/// the result is positive for an irreducible generator.
fn gth_solve(q: &GeneratorSpec) -> Vec<f64> {
    let n = q.size();
    let mut a = vec![0.0; n * n];
    for (i, j, rate) in q.entries() {
        a[i * n + j] = rate;
    }
    for k in (1..n).rev() {
        let s: f64 = a[k * n..k * n + k].iter().sum();
        for i in 0..k {
            a[i * n + k] /= s;
        }
        for i in 0..k {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..k {
                a[i * n + j] += aik * a[k * n + j];
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for j in 1..n {
        pi[j] = (0..j).map(|i| pi[i] * a[i * n + j]).sum();
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    pi
}

fn gauss_seidel_solve(q: &GeneratorSpec, tol: f64) -> Result<Vec<f64>, ChainError> {
    let n = q.size();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (a, b, rate) in q.entries() {
        incoming[b].push((a, rate));
    }
    let mut nu = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for sweep in 0..GAUSS_SEIDEL_MAX_SWEEPS {
        for b in 0..n {
            let inflow: f64 = incoming[b].iter().map(|&(a, r)| nu[a] * r).sum();
            nu[b] = inflow / q.exit_rate(b);
        }
        let total: f64 = nu.iter().sum();
        nu.iter_mut().for_each(|p| *p /= total);
        if sweep % 16 == 0 {
            residual = stationary_residual(q, &nu);
            if residual <= tol {
                return Ok(nu);
            }
        }
    }
    Err(ChainError::SolverFailure { residual, tol })
}

/// Piecewise-constant regime path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePath {
    pub origin: usize,
    pub jump_times: Vec<f64>,
    /// State entered at each jump.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl RegimePath {
    pub fn constant(origin: usize, horizon: f64) -> Self {
        Self {
            origin,
            jump_times: Vec::new(),
            states: Vec::new(),
            horizon,
        }
    }

    /// `alpha(t-)`: the state after every jump strictly before `t`.
    pub fn state_before(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s < t);
        if k == 0 {
            self.origin
        } else {
            self.states[k - 1]
        }
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Sojourns as `(start, end, state)` covering `[0, horizon]`.
    pub fn sojourns(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        let starts = std::iter::once(0.0).chain(self.jump_times.iter().copied());
        let ends = self
            .jump_times
            .iter()
            .copied()
            .chain(std::iter::once(self.horizon));
        let states = std::iter::once(self.origin).chain(self.states.iter().copied());
        starts.zip(ends).zip(states).map(|((s, e), a)| (s, e, a))
    }

    /// CSV with header `jump_time,state`; the first row is the origin at
    /// time 0 and states are numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("jump_time,state\n");
        let _ = writeln!(out, "0,{}", self.origin + 1);
        for (t, s) in self.jump_times.iter().zip(&self.states) {
            let _ = writeln!(out, "{},{}", t, s + 1);
        }
        out
    }
}

/// Draws the next state from row `alpha` given a uniform draw scaled by the
/// exit rate.
fn pick_target(row: &[(usize, f64)], mut u: f64) -> usize {
    for &(b, q) in row {
        if u < q {
            return b;
        }
        u -= q;
    }
    row.last().map(|&(b, _)| b).expect("non-empty row")
}

/// Exact holding-time/jump-chain sampler on `[0, horizon]`.
pub fn sample_path(
    q: &GeneratorSpec,
    alpha0: usize,
    horizon: f64,
    stream: &RngStream,
) -> Result<RegimePath, ChainError> {
    if alpha0 >= q.size() {
        return Err(ChainError::StateOutOfWindow {
            state: alpha0,
            size: q.size(),
        });
    }
    if !(horizon > 0.0) {
        return Err(ChainError::InvalidParameter(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let mut rng = stream.regime_rng();
    let mut path = RegimePath::constant(alpha0, horizon);
    let mut t = 0.0;
    let mut state = alpha0;
    loop {
        let rate = q.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(&mut rng);
        t += hold / rate;
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        state = pick_target(q.row(state), u);
        path.jump_times.push(t);
        path.states.push(state);
    }
    Ok(path)
}

/// `P(t) = exp(tQ)` by scaling and squaring.
pub fn transition_matrix(q: &GeneratorSpec, t: f64) -> Result<DMatrix<f64>, ChainError> {
    let n = q.size();
    if n > MAX_DENSE_WINDOW {
        return Err(ChainError::WindowTooLarge {
            size: n,
            cap: MAX_DENSE_WINDOW,
        });
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(ChainError::InvalidParameter(format!(
            "time must be non-negative and finite, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    Ok((q.dense() * t).exp())
}

/// Fitted `sum_b |p_ab(t) - nu_b| <= K exp(-lambda0 t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicityFit {
    /// Decay rate; `f64::INFINITY` when the chain is already stationary.
    pub lambda0: f64,
    pub prefactor: f64,
    /// Worst-row total-variation-type deviation at each grid time.
    pub deviations: Vec<(f64, f64)>,
}

/// Least-squares fit of the log worst-row deviation against time. The
/// prefactor is the smallest `K` for which the fitted bound holds on the grid.
pub fn ergodicity_diagnostic(
    q: &GeneratorSpec,
    t_grid: &[f64],
) -> Result<ErgodicityFit, ChainError> {
    let nu = stationary_distribution(q, 1e-10)?;
    let mut deviations = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let p = transition_matrix(q, t)?;
        let worst = (0..q.size())
            .map(|a| {
                (0..q.size())
                    .map(|b| (p[(a, b)] - nu.nu[b]).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        deviations.push((t, worst));
    }
    let usable: Vec<(f64, f64)> = deviations
        .iter()
        .filter(|&&(_, d)| d > DEVIATION_FLOOR)
        .map(|&(t, d)| (t, d.ln()))
        .collect();
    if usable.is_empty() {
        return Ok(ErgodicityFit {
            lambda0: f64::INFINITY,
            prefactor: 0.0,
            deviations,
        });
    }
    if usable.len() < 2 {
        return Err(ChainError::FitFailure);
    }
    let slope = crate::stats::least_squares_slope(
        &usable.iter().map(|p| p.0).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.1).collect::<Vec<_>>(),
    )
    .ok_or(ChainError::FitFailure)?;
    if !(slope < 0.0) {
        return Err(ChainError::FitFailure);
    }
    let lambda0 = -slope;
    let prefactor = deviations
        .iter()
        .map(|&(t, d)| d * (lambda0 * t).exp())
        .fold(0.0, f64::max);
    Ok(ErgodicityFit {
        lambda0,
        prefactor,
        deviations,
    })
}

/// One sample of `int_0^horizon e^{-t} (1{alpha(t) = target} - nu_target) dt`
/// for the composed chain started at `alpha0`, integrated exactly between
/// jumps.
pub fn occupation_error_sample(
    chain: &TwoTimeScaleChain,
    alpha0: usize,
    target: usize,
    nu: &StationaryDistribution,
    horizon: f64,
    stream: &RngStream,
) -> Result<f64, ChainError> {
    if horizon < 40.0 {
        return Err(ChainError::InvalidParameter(format!(
            "horizon must be at least 40, got {horizon}"
        )));
    }
    if target >= nu.len() {
        return Err(ChainError::StateOutOfWindow {
            state: target,
            size: nu.len(),
        });
    }
    let path = sample_path(chain.composed(), alpha0, horizon, stream)?;
    let nu_target = nu.nu[target];
    let mut occupied = 0.0;
    for (start, end, state) in path.sojourns() {
        if state == target {
            occupied += (-start).exp() - (-end).exp();
        }
    }
    Ok(occupied - nu_target * (1.0 - (-horizon).exp()))
}
