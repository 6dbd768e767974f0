//! Experiment configuration file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fedshard::engine::RunConfig;
use fedshard::scenarios::{PayoffParams, Unlearner, DEFAULT_TAU};

use crate::exit::{CliError, Code};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run: RunConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Clients on the first label group; the rest of `run.num_clients` form the second.
    pub majority: Option<usize>,
    /// Second-group clients that leave first in the cascade scenario.
    pub initial_leavers: usize,
    pub unlearner: Unlearner,
    pub payoff: PayoffParams,
    pub tau: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            majority: None,
            initial_leavers: 3,
            unlearner: Unlearner::Exact,
            payoff: PayoffParams::default(),
            tau: DEFAULT_TAU,
        }
    }
}

impl ScenarioConfig {
    /// Group sizes, defaulting to a 3:1 split.
    pub fn groups(&self, num_clients: usize) -> Result<(usize, usize), CliError> {
        let majority = self.majority.unwrap_or(num_clients * 3 / 4);
        if majority == 0 || majority >= num_clients {
            return Err(CliError::new(
                Code::Config,
                format!("scenario.majority must lie in 1..{num_clients}, got {majority}"),
            ));
        }
        Ok((majority, num_clients - majority))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::new(Code::Config, format!("cannot read {}: {e}", path.display()))
        })?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::new(Code::Config, format!("{}: {e}", path.display())))?;
        match raw
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::new(
                    Code::Config,
                    format!(
                        "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
                        path.display()
                    ),
                ))
            }
            None => {
                return Err(CliError::new(
                    Code::Config,
                    format!("{}: missing schema_version", path.display()),
                ))
            }
        }
        let config: ExperimentConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::new(Code::Config, format!("{}: {e}", path.display())))?;
        config
            .run
            .validate()
            .map_err(|e| CliError::new(Code::Config, e.to_string()))?;
        Ok(config)
    }
}
