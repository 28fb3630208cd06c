//! Experiment configuration, read from TOML.
//!
//! Matrices are row-major number lists and node indices are 0-based.
//! A minimal file only needs to pick the L values to compare:
//!
//! ```toml
//! lengths = [0, 1, 2, 4]
//!
//! [network]
//! nodes = 10
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{Partition, Scheme};
use crate::statespace::{SensorModel, StateSpaceModel};

/// Environment variable that overrides `seed` when set.
pub const SEED_ENV: &str = "PDKF_SEED";

pub const PRESET_SEC4: &str = "paper-sec4";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    /// Last iteration index `T`; each run filters `x_0..x_T`.
    pub horizon: usize,
    /// Number of final iterations averaged into the steady-state value.
    pub window: usize,
    pub schemes: Vec<Scheme>,
    /// Entries shared per iteration, one experiment arm per value.
    pub lengths: Vec<usize>,
    /// Also run the diffusion KF that exchanges raw measurements.
    pub dkf_baseline: bool,
    pub model: ModelConfig,
    pub network: NetworkConfig,
    pub sensors: SensorConfig,
    pub selection: SelectionConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            runs: 200,
            horizon: 5000,
            window: 1000,
            schemes: vec![Scheme::Sequential, Scheme::Stochastic],
            lengths: vec![0, 1, 2, 4],
            dkf_baseline: true,
            model: ModelConfig::default(),
            network: NetworkConfig::default(),
            sensors: SensorConfig::default(),
            selection: SelectionConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `"paper-sec4"` or `"explicit"`.
    pub preset: String,
    /// Multiplies `F`; values below one make the reference model stable.
    pub dynamics_scale: f64,
    pub dim: Option<usize>,
    pub f: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub q: Option<Vec<f64>>,
    pub pi0: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: PRESET_SEC4.into(),
            dynamics_scale: 1.0,
            dim: None,
            f: None,
            g: None,
            q: None,
            pi0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub nodes: usize,
    pub avg_degree: f64,
    pub require_connected: bool,
    /// Explicit undirected edges; replaces the random generator.
    pub edges: Option<Vec<[usize; 2]>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            avg_degree: 2.0,
            require_connected: true,
            edges: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// `"paper-sec4"` (random H type and noise level per node) or
    /// `"explicit"`.
    pub preset: String,
    /// Range of the per-node noise variance `σ²`, with `R_k = σ²·I`.
    pub noise_variance: [f64; 2],
    pub nodes: Vec<ExplicitSensor>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            preset: PRESET_SEC4.into(),
            noise_variance: [0.0, 0.5],
            nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSensor {
    pub rows: usize,
    pub h: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// All nodes follow one subset sequence.
    pub shared_across_nodes: bool,
    /// Explicit subsets; when present `lengths` must be omitted or list
    /// the largest subset size only.
    pub partition: Option<Vec<Vec<usize>>>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            shared_across_nodes: true,
            partition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            riccati_tol: 1e-10,
            riccati_max_iter: 200_000,
        }
    }
}

fn matrix(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Config(format!(
            "`{name}` has {} entries, expected {rows}x{cols} = {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse `path` and apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn build_model(&self) -> Result<StateSpaceModel> {
        let m = &self.model;
        if !(m.dynamics_scale.is_finite() && m.dynamics_scale > 0.0) {
            return Err(Error::Config(format!(
                "model.dynamics_scale must be positive, got {}",
                m.dynamics_scale
            )));
        }
        let base = match m.preset.as_str() {
            PRESET_SEC4 => StateSpaceModel::paper_sec4(),
            "explicit" => {
                let dim = m
                    .dim
                    .ok_or_else(|| Error::Config("explicit model needs `dim`".into()))?;
                let get = |name: &str, v: &Option<Vec<f64>>| {
                    v.as_deref()
                        .ok_or_else(|| Error::Config(format!("explicit model needs `{name}`")))
                        .and_then(|d| matrix(name, d, dim, dim))
                };
                StateSpaceModel::new(get("f", &m.f)?, get("g", &m.g)?, get("q", &m.q)?, get("pi0", &m.pi0)?)?
            }
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        Ok(if m.dynamics_scale == 1.0 {
            base
        } else {
            base.with_scaled_dynamics(m.dynamics_scale)
        })
    }

    pub fn explicit_sensors(&self, state_dim: usize) -> Result<Vec<SensorModel>> {
        self.sensors
            .nodes
            .iter()
            .map(|s| {
                SensorModel::new(
                    matrix("sensors.h", &s.h, s.rows, state_dim)?,
                    matrix("sensors.r", &s.r, s.rows, s.rows)?,
                )
            })
            .collect()
    }

    /// One partition per experiment arm, in `lengths` order.
    pub fn partitions(&self, state_dim: usize) -> Result<Vec<Partition>> {
        match &self.selection.partition {
            Some(subsets) => {
                let l = subsets.iter().map(Vec::len).max().unwrap_or(0);
                if !(self.lengths.is_empty() || self.lengths == [l]) {
                    return Err(Error::Config(format!(
                        "explicit partition shares up to {l} entries but lengths = {:?}",
                        self.lengths
                    )));
                }
                Ok(vec![Partition::explicit(state_dim, l, subsets.clone())?])
            }
            None => self
                .lengths
                .iter()
                .map(|&l| Partition::contiguous(state_dim, l))
                .collect(),
        }
    }

    /// Check everything that can be checked without running the filters.
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.window == 0 || self.horizon < self.window {
            return Err(Error::Config(format!(
                "the window must cover between 1 and {} iterations, got {}",
                self.horizon, self.window
            )));
        }
        if self.schemes.is_empty() && !self.lengths.is_empty() {
            return Err(Error::Config("lengths given but no scheme selected".into()));
        }
        if self
            .schemes
            .iter()
            .enumerate()
            .any(|(i, s)| self.schemes[..i].contains(s))
        {
            return Err(Error::Config("schemes must not repeat".into()));
        }
        let mut lengths = self.lengths.clone();
        lengths.sort_unstable();
        lengths.dedup();
        if lengths.len() != self.lengths.len() {
            return Err(Error::Config("lengths must not repeat".into()));
        }
        if self.network.nodes == 0 {
            return Err(Error::Config("network.nodes must be at least 1".into()));
        }
        let [lo, hi] = self.sensors.noise_variance;
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "sensors.noise_variance must satisfy 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.theory.riccati_tol > 0.0) || self.theory.riccati_max_iter == 0 {
            return Err(Error::Config("theory tolerances must be positive".into()));
        }
        let model = self.build_model()?;
        self.partitions(model.dim())?;
        match self.sensors.preset.as_str() {
            PRESET_SEC4 => {
                if model.dim() != 4 {
                    return Err(Error::Config(format!(
                        "sensor preset {PRESET_SEC4:?} needs a 4-dimensional state, model has {}",
                        model.dim()
                    )));
                }
            }
            "explicit" => {
                let sensors = self.explicit_sensors(model.dim())?;
                if sensors.len() != self.network.nodes {
                    return Err(Error::dimension("explicit sensors", self.network.nodes, sensors.len()));
                }
            }
            other => return Err(Error::Config(format!("unknown sensor preset {other:?}"))),
        }
        if let Some(edges) = &self.network.edges {
            let n = self.network.nodes;
            if let Some(e) = edges.iter().find(|e| e[0] >= n || e[1] >= n) {
                return Err(Error::Config(format!(
                    "edge ({}, {}) references a node outside 0..{n}",
                    e[0], e[1]
                )));
            }
        }
        Ok(())
    }
}
