//! Run configuration file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use ugsim_core::analysis::ExpectationVariant;
use ugsim_core::backend::BackendConfig;
use ugsim_core::game::Stake;
use ugsim_core::orchestrator::{all_belief_pairs, ExperimentGrid, DEFAULT_MAX_RETRIES};
use ugsim_core::profile::{Belief, ReasoningMethod, TemplateSet};

use crate::CliError;

fn default_seed() -> u64 {
    42
}
fn default_stake() -> u64 {
    10
}
fn default_rounds() -> u32 {
    5
}
fn default_games() -> u32 {
    10
}
fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}
fn default_parallelism() -> usize {
    4
}

/// Everything one run needs, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_stake")]
    pub stake: u64,
    #[serde(default = "default_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_games")]
    pub games_per_cell: u32,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// `greedy-fair` style pairs; all nine when omitted.
    #[serde(default)]
    pub belief_pairs: Option<Vec<String>>,
    /// Reasoning method keys; all five when omitted.
    #[serde(default)]
    pub reasonings: Option<Vec<String>>,
    /// Set to cross proposer and responder methods.
    #[serde(default)]
    pub responder_reasonings: Option<Vec<String>>,
    #[serde(default)]
    pub variants: Vec<ExpectationVariant>,
    #[serde(default)]
    pub reference_model: Option<String>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub models: Vec<BackendConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        config.grid()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = &config.templates_dir {
            if dir.is_relative() {
                config.templates_dir = Some(path.parent().unwrap_or(Path::new(".")).join(dir));
            }
        }
        Ok(config)
    }

    /// Offline configuration: one belief-driven oracle over the full grid.
    pub fn oracle_demo() -> Self {
        RunConfig {
            run_id: "oracle-demo".into(),
            output_dir: None,
            seed: default_seed(),
            stake: default_stake(),
            max_rounds: default_rounds(),
            games_per_cell: default_games(),
            max_retries: default_retries(),
            parallelism: default_parallelism(),
            belief_pairs: None,
            reasonings: None,
            responder_reasonings: None,
            variants: vec![ExpectationVariant::PointwiseFair, ExpectationVariant::RangeFair],
            reference_model: None,
            templates_dir: None,
            models: vec![BackendConfig::oracle("oracle-belief-driven", "belief-driven", 7)],
        }
    }

    /// sha256 of the parsed configuration in canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.run_id))
    }

    pub fn templates(&self) -> Result<TemplateSet, CliError> {
        match &self.templates_dir {
            None => Ok(TemplateSet::builtin().clone()),
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| CliError::ConfigInvalid(e.to_string())),
        }
    }

    pub fn grid(&self) -> Result<ExperimentGrid, CliError> {
        let invalid = |m: String| CliError::ConfigInvalid(m);
        if self.run_id.trim().is_empty() {
            return Err(invalid("run_id is empty".into()));
        }
        if self.parallelism < 1 {
            return Err(invalid("parallelism must be at least 1".into()));
        }
        let belief_pairs = match &self.belief_pairs {
            None => all_belief_pairs(),
            Some(pairs) => pairs
                .iter()
                .map(|p| parse_pair(p).map_err(invalid))
                .collect::<Result<_, _>>()?,
        };
        let methods = |list: &Option<Vec<String>>| -> Result<Option<Vec<ReasoningMethod>>, CliError> {
            list.as_ref()
                .map(|l| {
                    l.iter()
                        .map(|m| m.parse::<ReasoningMethod>().map_err(|e| invalid(e.to_string())))
                        .collect()
                })
                .transpose()
        };
        let grid = ExperimentGrid {
            models: self.models.clone(),
            belief_pairs,
            reasonings: methods(&self.reasonings)?.unwrap_or_else(|| ReasoningMethod::ALL.to_vec()),
            responder_reasonings: methods(&self.responder_reasonings)?,
            games_per_cell: self.games_per_cell,
            stake: Stake::new(self.stake).map_err(|e| invalid(e.to_string()))?,
            max_rounds: self.max_rounds,
            seed: self.seed,
            max_retries: self.max_retries,
        };
        grid.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(grid)
    }
}

fn parse_pair(text: &str) -> Result<(Belief, Belief), String> {
    let (p, r) = text
        .split_once('-')
        .ok_or_else(|| format!("belief pair `{text}` is not of the form proposer-responder"))?;
    let p: Belief = p.parse().map_err(|e: ugsim_core::profile::UnknownName| e.to_string())?;
    let r: Belief = r.parse().map_err(|e: ugsim_core::profile::UnknownName| e.to_string())?;
    Ok((p, r))
}
