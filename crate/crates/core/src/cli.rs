//! Batch front-end.
//!
//! Exit codes: 0 success, 2 unreadable or invalid scenario (or bad usage),
//! 3 competition condition violated, 4 simulation failure. Verdicts never
//! change the exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    check_competition, check_ergodicity_window, check_extinction_condition,
    check_moment_condition, check_permanence_condition, check_stability_condition,
    ConditionReport, ConditionVerdict,
};
use crate::chain::ChainError;
use crate::dynamics::{simulate_hybrid, DynamicsError, PathStatus};
use crate::montecarlo::{
    boundedness_probe, estimate_moment, extinction_probe, holder_diagnostic, o_epsilon_experiment,
    permanence_probe, run_ensemble, stability_probe, weak_convergence_distance, Ensemble,
    MonteCarloError, PropertyReport, Verdict,
};
use crate::rng::{derive_seed, RngStream};
use crate::scenario::{Scenario, ScenarioError};

pub const THREADS_ENV: &str = "HYBRIDLV_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hybridlv", version, about = "Switching Lotka-Volterra simulation and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate trajectories and write CSV files plus a manifest.
    Simulate(RunArgs),
    /// Run a verification suite and write one JSON report per probe.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// conditions, boundedness, stability, extinction, permanence,
        /// convergence or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Scenario(ScenarioError::Competition(_)) => 3,
            Self::Scenario(ScenarioError::Io { .. } | ScenarioError::Schema(_)) => 2,
            Self::Scenario(_) | Self::Simulation(_) | Self::Output { .. } => 4,
        }
    }
}

impl From<MonteCarloError> for CliError {
    fn from(e: MonteCarloError) -> Self {
        Self::Simulation(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        Self::Simulation(e.to_string())
    }
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        Self::Simulation(e.to_string())
    }
}

/// Overrides shared by both commands.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Conditions,
    Boundedness,
    Stability,
    Extinction,
    Permanence,
    Convergence,
    All,
}

impl std::str::FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "conditions" => Self::Conditions,
            "boundedness" => Self::Boundedness,
            "stability" => Self::Stability,
            "extinction" => Self::Extinction,
            "permanence" => Self::Permanence,
            "convergence" => Self::Convergence,
            "all" => Self::All,
            other => return Err(CliError::Usage(format!("unknown suite '{other}'"))),
        })
    }
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = with_thread_pool(|| match cli.command {
        Command::Simulate(a) => cmd_simulate(&a.scenario, &a.out, a.seed, overrides(&a)),
        Command::Verify { run, suite } => suite
            .parse()
            .and_then(|suite| cmd_verify(&run.scenario, suite, &run.out, run.seed, overrides(&run))),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn overrides(a: &RunArgs) -> Overrides {
    Overrides {
        paths: a.paths,
        horizon: a.horizon,
        dt: a.dt,
    }
}

fn with_thread_pool(job: impl FnOnce() -> Result<(), CliError> + Send) -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return job();
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Simulation(e.to_string()))?;
    pool.install(job)
}

fn load(path: &Path, ov: Overrides) -> Result<Scenario, CliError> {
    Ok(Scenario::load(path)?.with_overrides(ov.paths, ov.horizon, ov.dt)?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Output { path, source })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct PathEntry {
    trajectory: String,
    regimes: String,
    status: PathStatus,
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    command: &'static str,
    scenario: &'a str,
    scenario_hash: &'a str,
    seed: u64,
    epsilon: f64,
    horizon: f64,
    dt: f64,
    record_every: usize,
    n_paths: usize,
    paths: Vec<PathEntry>,
}

/// Simulates `paths` trajectories (default 1) at the scenario's `epsilon`.
/// Path `k` uses substream `seed ^ k` and is written as
/// `trajectory_<k>.csv` and `regimes_<k>.csv`, numbered from 1.
pub fn cmd_simulate(
    scenario_path: &Path,
    out_dir: &Path,
    seed: u64,
    ov: Overrides,
) -> Result<(), CliError> {
    let n_paths = ov.paths.unwrap_or(1);
    let scenario = load(scenario_path, Overrides { paths: None, ..ov })?;
    if n_paths == 0 {
        return Err(CliError::Usage("--paths must be positive".into()));
    }
    let system = scenario.system(scenario.doc.epsilon)?;
    let scheme = scenario.scheme();
    create_dir(out_dir)?;
    let width = n_paths.to_string().len().max(4);
    let mut entries = Vec::with_capacity(n_paths);
    for k in 0..n_paths {
        let traj = simulate_hybrid(
            &system.coeffs,
            &system.generator,
            &system.x0,
            system.alpha0,
            scenario.doc.horizon,
            &scheme,
            &RngStream::substream(seed, k as u64),
        )?;
        let trajectory = format!("trajectory_{:0width$}.csv", k + 1);
        let regimes = format!("regimes_{:0width$}.csv", k + 1);
        write(out_dir, &trajectory, &traj.to_csv())?;
        write(out_dir, &regimes, &traj.regime_path.to_csv())?;
        entries.push(PathEntry {
            trajectory,
            regimes,
            status: traj.status,
        });
    }
    let manifest = SimulateManifest {
        command: "simulate",
        scenario: &scenario.doc.name,
        scenario_hash: &scenario.hash,
        seed,
        epsilon: scenario.doc.epsilon,
        horizon: scenario.doc.horizon,
        dt: scheme.dt,
        record_every: scheme.record_every,
        n_paths,
        paths: entries,
    };
    write(out_dir, "manifest.json", &to_json(&manifest))
}

/// One row of `summary.csv`.
struct SummaryRow {
    file: String,
    name: String,
    verdict: String,
    metric: String,
    value: f64,
}

fn condition_verdict(v: ConditionVerdict) -> &'static str {
    match v {
        ConditionVerdict::Holds => "holds",
        ConditionVerdict::Fails => "fails",
        ConditionVerdict::HoldsOnWindow => "holds-on-window",
    }
}

fn probe_verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Consistent => "consistent",
        Verdict::Inconsistent => "inconsistent",
        Verdict::Inconclusive => "inconclusive",
    }
}

struct Writer<'a> {
    dir: &'a Path,
    rows: Vec<SummaryRow>,
}

impl Writer<'_> {
    fn condition(&mut self, report: ConditionReport) -> Result<(), CliError> {
        let file = format!("condition_{}.json", report.condition.as_str());
        write(self.dir, &file, &to_json(&report))?;
        self.rows.push(SummaryRow {
            file,
            name: report.condition.as_str().into(),
            verdict: condition_verdict(report.verdict).into(),
            metric: "margin".into(),
            value: report.witness.margin,
        });
        Ok(())
    }

    fn probe(&mut self, stem: &str, report: PropertyReport, metric: &str) -> Result<(), CliError> {
        let file = format!("{stem}.json");
        write(self.dir, &file, &to_json(&report))?;
        self.rows.push(SummaryRow {
            file,
            name: report.property.as_str().into(),
            verdict: probe_verdict(report.verdict).into(),
            metric: metric.into(),
            value: report.estimate.get(metric).copied().unwrap_or(f64::NAN),
        });
        Ok(())
    }

    fn summary(&self) -> String {
        let mut out = String::from("file,name,verdict,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.file, r.name, r.verdict, r.metric, r.value);
        }
        out
    }
}

#[derive(Serialize)]
struct VerifyManifest<'a> {
    command: &'static str,
    scenario: &'a str,
    scenario_hash: &'a str,
    seed: u64,
    suite: &'a str,
    epsilon: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    files: Vec<&'a str>,
}

/// Runs `suite` and writes one JSON document per condition or probe,
/// `summary.csv` and `manifest.json` into `out_dir`.
///
/// Seeds: the shared ensemble uses `derive_seed(seed, 1)`, the stability
/// probe `derive_seed(seed, 2)`, the convergence probe `derive_seed(seed, 3)`
/// and the occupation experiment `derive_seed(seed, 4)`.
pub fn cmd_verify(
    scenario_path: &Path,
    suite: Suite,
    out_dir: &Path,
    seed: u64,
    ov: Overrides,
) -> Result<(), CliError> {
    let scenario = load(scenario_path, ov)?;
    let doc = &scenario.doc;
    let probes = &doc.probes;
    let eps = doc.epsilon;
    let scheme = scenario.scheme();
    let chain = scenario.chain(eps)?;
    let avg = scenario.averaged()?;
    create_dir(out_dir)?;
    let mut w = Writer {
        dir: out_dir,
        rows: Vec::new(),
    };

    if suite.includes(Suite::Conditions) {
        w.condition(check_competition(&scenario.coeffs).with_hash(&scenario.hash))?;
        w.condition(
            check_ergodicity_window(chain.composed(), &probes.ergodicity_grid)
                .with_hash(&scenario.hash),
        )?;
        for &p in &probes.moment_p {
            let bound = probes.moment_bound.unwrap_or(f64::INFINITY);
            let report = check_moment_condition(&scenario.coeffs, p, bound).with_hash(&scenario.hash);
            let file = format!("condition_ment_p{p}.json");
            write(out_dir, &file, &to_json(&report))?;
            w.rows.push(SummaryRow {
                file,
                name: "ment".into(),
                verdict: condition_verdict(report.verdict).into(),
                metric: "margin".into(),
                value: report.witness.margin,
            });
        }
        w.condition(check_stability_condition(&avg).with_hash(&scenario.hash))?;
        w.condition(check_extinction_condition(&avg).with_hash(&scenario.hash))?;
        w.condition(check_permanence_condition(&avg).with_hash(&scenario.hash))?;
    }

    let needs_ensemble = [
        Suite::Boundedness,
        Suite::Extinction,
        Suite::Permanence,
        Suite::Convergence,
    ]
    .iter()
    .any(|&s| suite.includes(s));
    let ensemble: Option<Ensemble> = if needs_ensemble {
        Some(run_ensemble(
            &scenario.system(eps)?,
            probes.paths,
            doc.horizon,
            &scheme,
            derive_seed(seed, 1),
        )?)
    } else {
        None
    };

    if let (true, Some(ens)) = (suite.includes(Suite::Boundedness), &ensemble) {
        for &p in &probes.moment_p {
            w.probe(&format!("moment_p{p}"), estimate_moment(ens, p, probes.burn_in)?, "sup_moment")?;
        }
        w.probe("boundedness", boundedness_probe(ens, probes.delta, probes.burn_in)?, "H")?;
    }
    if suite.includes(Suite::Stability) {
        let report = stability_probe(
            &scenario.system(eps)?,
            &probes.radii,
            probes.escape_eps,
            probes.paths,
            doc.horizon,
            &scheme,
            derive_seed(seed, 2),
        )?;
        w.probe("stability", report, "final_escape_probability")?;
    }
    if let (true, Some(ens)) = (suite.includes(Suite::Extinction), &ensemble) {
        let report = extinction_probe(ens, probes.extinction_threshold, Some(&avg), probes.burn_in)?;
        w.probe("extinction", report, "extinct_fraction")?;
    }
    if let (true, Some(ens)) = (suite.includes(Suite::Permanence), &ensemble) {
        w.probe("permanence", permanence_probe(ens, probes.delta, probes.burn_in)?, "H")?;
    }
    if let (true, Some(ens)) = (suite.includes(Suite::Convergence), &ensemble) {
        let eps_list = if doc.epsilons.is_empty() {
            vec![eps]
        } else {
            doc.epsilons.clone()
        };
        let family = eps_list
            .iter()
            .map(|&e| Ok((e, scenario.system(e)?)))
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let t_snap = probes.t_snap.unwrap_or(doc.horizon.min(5.0));
        let report = weak_convergence_distance(
            &family,
            &scenario.averaged_system()?,
            t_snap,
            probes.paths,
            &scheme,
            derive_seed(seed, 3),
        )?;
        w.probe("convergence", report, "ks_smallest_eps")?;

        let step = scheme.dt * scheme.record_every as f64;
        let scales: Vec<f64> = probes
            .pair_scales
            .iter()
            .copied()
            .filter(|&h| {
                let m = (h / step).round();
                m >= 1.0 && (m * step - h).abs() <= 1e-9 * h.max(1.0) && h < doc.horizon
            })
            .collect();
        if scales.is_empty() {
            return Err(CliError::Usage(format!(
                "no pair scale is a multiple of the recorded grid step {step}"
            )));
        }
        let holder = holder_diagnostic(ens, probes.holder_gamma, &scales)?;
        w.probe("holder", holder, "divergence_ratio")?;

        let chains = eps_list
            .iter()
            .map(|&e| scenario.chain(e))
            .collect::<Result<Vec<_>, _>>()?;
        let mut report = o_epsilon_experiment(
            &chains,
            scenario.alpha0(),
            scenario.alpha0(),
            &scenario.stationary()?,
            probes.occupation_reps,
            40.0_f64.max(doc.horizon),
            derive_seed(seed, 4),
        )?;
        report.scenario_hash = scenario.hash.clone();
        w.probe("o_epsilon", report, "slope")?;
    }

    write(out_dir, "summary.csv", &w.summary())?;
    let suite_name = format!("{suite:?}").to_lowercase();
    let manifest = VerifyManifest {
        command: "verify",
        scenario: &doc.name,
        scenario_hash: &scenario.hash,
        seed,
        suite: &suite_name,
        epsilon: eps,
        horizon: doc.horizon,
        dt: scheme.dt,
        n_paths: probes.paths,
        files: w.rows.iter().map(|r| r.file.as_str()).collect(),
    };
    write(out_dir, "manifest.json", &to_json(&manifest))
}
