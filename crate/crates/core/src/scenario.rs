//! Scenario documents: coefficients, generators, initial data and probe
//! settings in one JSON file.
//!
//! States are numbered from 1 in documents. A generator may be inline or a
//! path to a separate generator document, resolved relative to the scenario
//! file. The scenario hash is the SHA-256 of the canonical serialization with
//! every generator inlined, so moving a generator file does not change it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::averaging::{average_coefficients, AveragedCoefficients, AveragingError};
use crate::chain::{
    stationary_distribution, ChainError, GeneratorDoc, GeneratorSpec, StationaryDistribution,
    TwoTimeScaleChain,
};
use crate::dynamics::{CoefficientTable, DynamicsError, RegimeCoefficients, SchemeMode, SimScheme};
use crate::montecarlo::HybridSystem;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("competition condition violated: {0}")]
    Competition(DynamicsError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
}

fn schema(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorRef {
    Inline(GeneratorDoc),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeDoc {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    #[serde(default = "default_one")]
    pub record_every: usize,
}

impl Default for SchemeDoc {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            clamp: default_clamp(),
            record_every: 1,
        }
    }
}

/// Parameters of the verification probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDoc {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_moments")]
    pub moment_p: Vec<f64>,
    /// Optional bound for the moment condition.
    #[serde(default)]
    pub moment_bound: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_threshold")]
    pub extinction_threshold: f64,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_escape")]
    pub escape_eps: f64,
    /// Defaults to 20% of the horizon.
    #[serde(default)]
    pub burn_in: Option<f64>,
    /// Snapshot time of the convergence probe; defaults to `min(horizon, 5)`.
    #[serde(default)]
    pub t_snap: Option<f64>,
    #[serde(default = "default_gamma")]
    pub holder_gamma: f64,
    #[serde(default = "default_scales")]
    pub pair_scales: Vec<f64>,
    #[serde(default = "default_reps")]
    pub occupation_reps: usize,
    #[serde(default = "default_grid")]
    pub ergodicity_grid: Vec<f64>,
}

impl Default for ProbeDoc {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn default_dt() -> f64 {
    1e-3
}
fn default_clamp() -> f64 {
    crate::dynamics::MAX_CLAMP
}
fn default_one() -> usize {
    1
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_paths() -> usize {
    500
}
fn default_moments() -> Vec<f64> {
    vec![1.0]
}
fn default_delta() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    1e-6
}
fn default_radii() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6]
}
fn default_escape() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.2
}
fn default_scales() -> Vec<f64> {
    vec![0.5, 0.1, 0.01]
}
fn default_reps() -> usize {
    1000
}
fn default_grid() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    pub states: Vec<RegimeCoefficients>,
    pub generator: GeneratorRef,
    #[serde(default)]
    pub slow_generator: Option<GeneratorRef>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Family of time-scale parameters for the convergence experiments.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(default = "default_one")]
    pub alpha0: usize,
    pub horizon: f64,
    #[serde(default)]
    pub scheme: SchemeDoc,
    #[serde(default)]
    pub probes: ProbeDoc,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub coeffs: CoefficientTable,
    pub fast: GeneratorSpec,
    pub slow: Option<GeneratorSpec>,
    pub hash: String,
}

fn resolve(reference: &GeneratorRef, base: &Path) -> Result<GeneratorDoc, ScenarioError> {
    match reference {
        GeneratorRef::Inline(doc) => Ok(doc.clone()),
        GeneratorRef::File(rel) => {
            let path = base.join(rel);
            let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| schema(format!("generator {}: {e}", path.display())))
        }
    }
}

fn build(doc: &GeneratorDoc) -> Result<GeneratorSpec, ScenarioError> {
    doc.build().map_err(|e| match e {
        ChainError::NegativeRate { .. }
        | ChainError::StateOutOfWindow { .. }
        | ChainError::WindowTooSmall { .. }
        | ChainError::TailMassExceeded { .. }
        | ChainError::InvalidParameter(_) => schema(e.to_string()),
        other => ScenarioError::Chain(other),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        Self::from_doc(doc, base)
    }

    pub fn from_doc(mut doc: ScenarioDoc, base: &Path) -> Result<Self, ScenarioError> {
        let fast_doc = resolve(&doc.generator, base)?;
        let slow_doc = doc
            .slow_generator
            .as_ref()
            .map(|g| resolve(g, base))
            .transpose()?;
        doc.generator = GeneratorRef::Inline(fast_doc.clone());
        doc.slow_generator = slow_doc.clone().map(GeneratorRef::Inline);

        let coeffs = CoefficientTable::new(&doc.states).map_err(|e| match e {
            DynamicsError::Competition { .. } => ScenarioError::Competition(e),
            other => schema(other.to_string()),
        })?;
        let fast = build(&fast_doc)?;
        let slow = slow_doc.as_ref().map(build).transpose()?;
        if fast.size() > coeffs.n_states() {
            return Err(schema(format!(
                "generator window has {} states but only {} coefficient states are given",
                fast.size(),
                coeffs.n_states()
            )));
        }
        if let Some(s) = &slow {
            if s.size() != fast.size() {
                return Err(schema("slow and fast generators have different windows"));
            }
        }
        if doc.x0.len() != coeffs.n_species() {
            return Err(schema(format!(
                "x0 has {} entries for {} species",
                doc.x0.len(),
                coeffs.n_species()
            )));
        }
        if doc.x0.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(schema("x0 must be positive and finite"));
        }
        if doc.alpha0 == 0 || doc.alpha0 > fast.size() {
            return Err(schema(format!(
                "alpha0 = {} outside the window 1..={}",
                doc.alpha0,
                fast.size()
            )));
        }
        if !(doc.epsilon > 0.0) || doc.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(schema("epsilon values must be positive"));
        }
        if !(doc.horizon > 0.0 && doc.horizon.is_finite()) {
            return Err(schema("horizon must be positive and finite"));
        }
        let scenario = Self {
            hash: String::new(),
            doc,
            coeffs,
            fast,
            slow,
        };
        scenario
            .scheme()
            .validate()
            .map_err(|e| schema(e.to_string()))?;
        Ok(scenario.rehash())
    }

    fn rehash(mut self) -> Self {
        let canonical = serde_json::to_string(&self.doc).expect("document serializes");
        self.hash = Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        self
    }

    /// Applies command-line overrides; the hash covers the result.
    pub fn with_overrides(
        mut self,
        paths: Option<usize>,
        horizon: Option<f64>,
        dt: Option<f64>,
    ) -> Result<Self, ScenarioError> {
        if let Some(p) = paths {
            self.doc.probes.paths = p;
        }
        if let Some(h) = horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(schema("horizon must be positive and finite"));
            }
            self.doc.horizon = h;
        }
        if let Some(dt) = dt {
            self.doc.scheme.dt = dt;
        }
        self.scheme().validate().map_err(|e| schema(e.to_string()))?;
        Ok(self.rehash())
    }

    pub fn scheme(&self) -> SimScheme {
        SimScheme {
            dt: self.doc.scheme.dt,
            clamp: self.doc.scheme.clamp,
            mode: SchemeMode::LogEuler,
            record_every: self.doc.scheme.record_every,
        }
    }

    /// Initial regime, numbered from 0.
    pub fn alpha0(&self) -> usize {
        self.doc.alpha0 - 1
    }

    pub fn chain(&self, epsilon: f64) -> Result<TwoTimeScaleChain, ScenarioError> {
        Ok(match &self.slow {
            Some(slow) => TwoTimeScaleChain::new(self.fast.clone(), slow.clone(), epsilon)?,
            None => TwoTimeScaleChain::fast_only(self.fast.clone(), epsilon)?,
        })
    }

    pub fn system(&self, epsilon: f64) -> Result<HybridSystem, ScenarioError> {
        let chain = self.chain(epsilon)?;
        Ok(HybridSystem::new(
            self.coeffs.clone(),
            chain.composed().clone(),
            self.doc.x0.clone(),
            self.alpha0(),
            self.hash.clone(),
        ))
    }

    /// Stationary law of the fast generator.
    pub fn stationary(&self) -> Result<StationaryDistribution, ScenarioError> {
        Ok(stationary_distribution(&self.fast, 1e-12)?)
    }

    pub fn averaged(&self) -> Result<AveragedCoefficients, ScenarioError> {
        Ok(average_coefficients(&self.coeffs, &self.stationary()?)?)
    }

    pub fn averaged_system(&self) -> Result<HybridSystem, ScenarioError> {
        HybridSystem::averaged(&self.averaged()?, self.doc.x0.clone(), self.hash.clone())
            .map_err(|e| schema(e.to_string()))
    }
}
