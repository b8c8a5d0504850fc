use serde::{Deserialize, Serialize};

use super::SimError;

/// Names of the built-in traffic presets.
pub const PRESET_NAMES: [&str; 3] = ["lane-3-density-1", "lane-3-density-1.5", "lane-4-density-2"];

/// Traffic and timing parameters of one highway scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub lanes_count: usize,
    /// Multiplier on `vehicles_count`; also shrinks the spawn spacing.
    pub vehicles_density: f64,
    /// Base traffic count before density scaling.
    pub vehicles_count: usize,
    /// Episode length in decision frames.
    pub duration_frames: u32,
    /// Decision frames per second.
    pub policy_frequency: u32,
    /// Integration ticks per second.
    pub simulation_frequency: u32,
    pub lane_width: f64,
    /// Ego speed range `[min, max]` in m/s; FASTER/SLOWER move within it.
    pub speed_limits: [f64; 2],
    /// Rows of the observation matrix (ego included).
    pub observation_vehicles: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            lanes_count: 3,
            vehicles_density: 1.0,
            vehicles_count: 50,
            duration_frames: 40,
            policy_frequency: 1,
            simulation_frequency: 15,
            lane_width: 4.0,
            speed_limits: [20.0, 30.0],
            observation_vehicles: 5,
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// Loads one of [`PRESET_NAMES`].
    pub fn preset(name: &str) -> Result<Self, SimError> {
        let (lanes_count, vehicles_density) = match name {
            "lane-3-density-1" => (3, 1.0),
            "lane-3-density-1.5" => (3, 1.5),
            "lane-4-density-2" => (4, 2.0),
            _ => return Err(SimError::UnknownPreset(name.to_string())),
        };
        Ok(Self {
            lanes_count,
            vehicles_density,
            ..Self::default()
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn ticks_per_frame(&self) -> u32 {
        self.simulation_frequency / self.policy_frequency.max(1)
    }

    pub fn dt(&self) -> f64 {
        1.0 / f64::from(self.simulation_frequency)
    }

    /// Number of traffic vehicles spawned by `reset`.
    pub fn traffic_count(&self) -> usize {
        (self.vehicles_count as f64 * self.vehicles_density).ceil() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |field: &str, reason: &str| {
            Err(SimError::InvalidConfig {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.lanes_count < 2 {
            return invalid("lanes_count", "must be at least 2");
        }
        if !(self.vehicles_density.is_finite() && self.vehicles_density > 0.0) {
            return invalid("vehicles_density", "must be positive");
        }
        if self.duration_frames < 1 {
            return invalid("duration_frames", "must be at least 1");
        }
        if self.policy_frequency == 0 || self.simulation_frequency == 0 {
            return invalid("policy_frequency", "frequencies must be positive");
        }
        if !self.simulation_frequency.is_multiple_of(self.policy_frequency) {
            return invalid(
                "simulation_frequency",
                "must be an integer multiple of policy_frequency",
            );
        }
        if !(self.lane_width.is_finite() && self.lane_width > 0.0) {
            return invalid("lane_width", "must be positive");
        }
        let [lo, hi] = self.speed_limits;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
            return invalid("speed_limits", "must satisfy 0 <= min < max");
        }
        if self.observation_vehicles < 1 {
            return invalid("observation_vehicles", "must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load_by_name() {
        for name in PRESET_NAMES {
            let config = EnvConfig::preset(name).unwrap();
            config.validate().unwrap();
            assert_eq!(config.duration_frames, 40);
        }
        let dense = EnvConfig::preset("lane-4-density-2").unwrap();
        assert_eq!(dense.lanes_count, 4);
        assert_eq!(dense.traffic_count(), 100);
        assert_eq!(EnvConfig::preset("lane-3-density-1.5").unwrap().traffic_count(), 75);
        assert!(matches!(EnvConfig::preset("lane-9"), Err(SimError::UnknownPreset(_))));
    }

    #[test]
    fn rejects_bad_frequencies() {
        let config = EnvConfig {
            simulation_frequency: 16,
            policy_frequency: 3,
            ..EnvConfig::default()
        };
        assert!(config.validate().is_err());
        let config = EnvConfig {
            lanes_count: 1,
            ..EnvConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
