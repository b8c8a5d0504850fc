//! The merged run configuration: file values, then command-line overrides.

use std::path::{Path, PathBuf};

use reward_forge::eval::{ScenarioSet, PROTOCOL_FRAMES, PROTOCOL_SCENARIOS};
use reward_forge::evolve::{EvolveConfig, EvolveError};
use reward_forge::llm::ProviderConfig;
use reward_forge::rl::{TrainError, TrainerConfig};
use reward_forge::sim::{EnvConfig, PRESET_NAMES};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Presets to score on; empty means the training preset only.
    pub presets: Vec<String>,
    /// Scenario seeds are `0..scenarios`.
    pub scenarios: u64,
    pub episode_frames: u32,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            presets: Vec::new(),
            scenarios: PROTOCOL_SCENARIOS,
            episode_frames: PROTOCOL_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training environment.
    pub preset: String,
    /// Parent of run directories.
    pub output_dir: PathBuf,
    /// Scripted responses instead of a live provider.
    pub mock_script: Option<PathBuf>,
    pub evolve: EvolveConfig,
    pub trainer: TrainerConfig,
    pub evaluation: EvaluationConfig,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: PRESET_NAMES[0].to_string(),
            output_dir: PathBuf::from("runs"),
            mock_script: None,
            evolve: EvolveConfig::default(),
            trainer: TrainerConfig::default(),
            evaluation: EvaluationConfig::default(),
            provider: ProviderConfig::default(),
        }
    }
}

fn invalid(field: impl Into<String>, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {reason}", field.into()))
}

fn check_preset(field: &str, name: &str) -> Result<(), CliError> {
    if PRESET_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(invalid(
            field,
            format!("unknown preset '{name}' (expected one of {})", PRESET_NAMES.join(", ")),
        ))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Checks every section; errors name the offending field path.
    pub fn validate(&self) -> Result<(), CliError> {
        check_preset("preset", &self.preset)?;
        for (i, preset) in self.evaluation.presets.iter().enumerate() {
            check_preset(&format!("evaluation.presets[{i}]"), preset)?;
        }
        if self.evaluation.scenarios == 0 {
            return Err(invalid("evaluation.scenarios", "must be positive"));
        }
        if self.evaluation.episode_frames == 0 {
            return Err(invalid("evaluation.episode_frames", "must be positive"));
        }
        self.evolve.validate().map_err(|e| match e {
            EvolveError::InvalidConfig { field, reason } => invalid(format!("evolve.{field}"), reason),
            other => CliError::Config(other.to_string()),
        })?;
        self.trainer.validate().map_err(|e| match e {
            TrainError::InvalidConfig { field, reason } => invalid(format!("trainer.{field}"), reason),
            other => CliError::Config(other.to_string()),
        })?;
        self.provider
            .validate()
            .map_err(|(field, reason)| invalid(format!("provider.{field}"), reason))?;
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig::preset(&self.preset).expect("validated preset")
    }

    pub fn evaluation_presets(&self) -> Vec<String> {
        if self.evaluation.presets.is_empty() {
            vec![self.preset.clone()]
        } else {
            self.evaluation.presets.clone()
        }
    }

    pub fn scenario_sets(&self) -> Result<Vec<ScenarioSet>, CliError> {
        self.evaluation_presets()
            .iter()
            .map(|preset| {
                let env = EnvConfig::preset(preset).map_err(|e| invalid("evaluation.presets", e))?;
                ScenarioSet::new(
                    preset,
                    env,
                    (0..self.evaluation.scenarios).collect(),
                    self.evaluation.episode_frames,
                )
                .map_err(|e| invalid("evaluation", e))
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&config.to_toml()).unwrap(), config);
    }

    #[test]
    fn errors_name_field_paths() {
        let mut config = RunConfig::default();
        config.evolve.candidates = 0;
        assert!(config.validate().unwrap_err().to_string().contains("evolve.candidates"));
        let mut config = RunConfig::default();
        config.trainer.gamma = 1.5;
        assert!(config.validate().unwrap_err().to_string().contains("trainer.gamma"));
        let mut config = RunConfig::default();
        config.evaluation.presets = vec!["lane-9".into()];
        assert!(config
            .validate()
            .unwrap_err()
            .to_string()
            .contains("evaluation.presets[0]"));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let config: RunConfig = toml::from_str("preset = \"lane-4-density-2\"\n[trainer]\ntotal_steps = 10\n").unwrap();
        assert_eq!(config.trainer.total_steps, 10);
        assert_eq!(config.trainer.gamma, 0.8);
        assert_eq!(config.evolve.iterations, 5);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
