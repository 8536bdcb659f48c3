use std::path::Path;

use rearrange::agent::AgentConfig;
use rearrange::graphnet::GnnConfig;
use rearrange::keypoint::DetectorConfig;
use rearrange::simenv::{SimConfig, TaskFamily};
use serde::{Deserialize, Serialize};

/// Everything a command needs. Missing sections and fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub family: String,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sim: SimConfig,
    pub detector: DetectorConfig,
    pub gnn: GnnConfig,
    pub agent: AgentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: usize,
    /// Episodes averaged at the end of each training curve.
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            family: TaskFamily::Straighten.name().to_string(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sim: SimConfig::default(),
            detector: DetectorConfig::default(),
            gnn: GnnConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 4000,
            test_samples: 500,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tasks: 100 }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: 3, window: 200 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn family(&self) -> Result<TaskFamily, String> {
        self.family.parse().map_err(|e: rearrange::Error| e.to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.family()?;
        self.sim.validate().map_err(|e| e.to_string())?;
        self.detector.validate().map_err(|e| e.to_string())?;
        self.gnn.validate().map_err(|e| e.to_string())?;
        self.agent.validate().map_err(|e| e.to_string())?;
        if self.sim.keypoints != self.gnn.keypoints {
            return Err(format!(
                "sim.keypoints = {} but gnn.keypoints = {}",
                self.sim.keypoints, self.gnn.keypoints
            ));
        }
        if self.eval.tasks == 0 {
            return Err("eval.tasks must be positive".into());
        }
        if self.ablation.seeds == 0 || self.ablation.window == 0 {
            return Err("ablation.seeds and ablation.window must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&c.to_toml()).unwrap(), c);
        let partial: RunConfig = toml::from_str("seed = 4\n[agent]\nepisodes = 7\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.agent.episodes, 7);
        assert_eq!(partial.sim, SimConfig::default());
        assert!(toml::from_str::<RunConfig>("sede = 4\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.gnn.keypoints = 6;
        assert!(c.validate().is_err());
        c = RunConfig {
            family: "knot".into(),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
