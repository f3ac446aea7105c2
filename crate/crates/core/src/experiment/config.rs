use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::DemandConfig;
use crate::network::{EdgeSpec, SpaceTimeNetwork, VarOrder};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Constant capacity or one value per decision epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapacityConfig {
    Constant(u32),
    Profile(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub from: String,
    pub to: String,
    /// Signed so that a negative value is reported instead of failing to parse.
    pub tau: i64,
    pub capacity: CapacityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeConfig>,
    /// Epochs at which a node is active; absent nodes are always active.
    #[serde(default)]
    pub node_active: BTreeMap<String, Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkConfig,
    pub horizon: u32,
    #[serde(default = "unit_beta")]
    pub beta: f64,
    pub demand: DemandConfig,
    /// Multiply every capacity by ceil(n_agents / 50).
    #[serde(default)]
    pub capacity_scaling: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ten")]
    pub trials: usize,
    #[serde(default)]
    pub var_order: VarOrder,
}

fn unit_beta() -> f64 {
    1.0
}

fn ten() -> usize {
    10
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ConfigError::Invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        let net = self.network()?;
        self.demand.validate(&net).map_err(ConfigError::Invalid)
    }

    /// Multiplier applied to every capacity.
    pub fn capacity_factor(&self) -> u32 {
        if self.capacity_scaling {
            self.demand.n_agents.div_ceil(50).max(1) as u32
        } else {
            1
        }
    }

    /// The network with capacity scaling applied.
    pub fn network(&self) -> Result<SpaceTimeNetwork, ConfigError> {
        let nc = &self.network;
        let index = |name: &str, what: &str| {
            nc.nodes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ConfigError::Invalid(format!("{what}: unknown node {name:?}")))
        };
        let mut edges = Vec::with_capacity(nc.edges.len());
        for e in &nc.edges {
            let label = format!("network.edges {}->{}", e.from, e.to);
            if e.tau < 1 || e.tau > u32::MAX as i64 {
                return Err(ConfigError::Invalid(format!("{label}: tau must be a positive integer, got {}", e.tau)));
            }
            let capacity = match &e.capacity {
                CapacityConfig::Constant(c) => vec![*c; self.horizon as usize],
                CapacityConfig::Profile(p) if p.len() == self.horizon as usize => p.clone(),
                CapacityConfig::Profile(p) => {
                    return Err(ConfigError::Invalid(format!(
                        "{label}: capacity profile has {} entries for horizon {}",
                        p.len(),
                        self.horizon
                    )))
                }
            };
            edges.push(EdgeSpec {
                from: index(&e.from, &label)?,
                to: index(&e.to, &label)?,
                tau: e.tau as u32,
                capacity,
            });
        }
        let mut active = Vec::new();
        for (name, times) in &nc.node_active {
            active.push((index(name, "network.node_active")?, times.clone()));
        }
        let mut net = SpaceTimeNetwork::new(nc.nodes.clone(), edges, self.horizon, &active)
            .map_err(|e| ConfigError::Invalid(format!("network: {e}")))?;
        net.scale_capacities(self.capacity_factor());
        Ok(net)
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_json(&text)
}
