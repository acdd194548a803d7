//! Run configuration: a TOML file with a schema version, resolved into the
//! concrete environment, trainer, and discovery settings. Mode switches are
//! applied as auditable overrides so a run directory records exactly which
//! fields the mode forced.

use crate::discovery::DiscoveryConfig;
use crate::env::{EnvConfig, RewardWeights};
use crate::trainer::{Mode, TrainerHyper};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("unsupported schema_version {got} (expected {SCHEMA_VERSION})")]
    Schema { got: u32 },
    #[error("invalid field {field}: {reason}")]
    Field { field: &'static str, reason: String },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

/// Environment section of the run config.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// Task sub-setting: 1, 2, or 3 (fixes agent count and capabilities).
    pub sub_setting: u8,
    /// Cells per room along x; the full grid is `2 * room_width + 1` wide.
    pub room_width: usize,
    /// Cells per room along y (equals the full grid height).
    pub room_height: usize,
    /// Episode cap in environment steps.
    pub max_steps: usize,
    /// Reward weights: step cost, switch, box move, target.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            sub_setting: 1,
            room_width: 5,
            room_height: 11,
            max_steps: 400,
            c0: 0.01,
            c1: 0.5,
            c2: 0.1,
            c3: 10.0,
        }
    }
}

impl EnvSection {
    pub fn build(&self) -> Result<EnvConfig, ConfigError> {
        let mut cfg =
            EnvConfig::sub_setting_with_rooms(self.sub_setting, self.room_width, self.room_height)?;
        cfg.max_steps = self.max_steps;
        cfg.weights = RewardWeights {
            c0: self.c0,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Full run configuration as read from disk.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Training episodes per seed.
    pub episodes: u64,
    /// Attention snapshot cadence in episodes.
    pub log_interval: u64,
    /// Checkpoint cadence in episodes (0 = final checkpoint only).
    pub checkpoint_interval: u64,
    /// Trailing window, in episodes, for smoothed plots and final-window
    /// summaries.
    pub smoothing_window: usize,
    pub env: EnvSection,
    pub trainer: TrainerHyper,
    pub discovery: DiscoveryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: Mode::MultiAgentOptions,
            seeds: vec![0],
            episodes: 1000,
            log_interval: 100,
            checkpoint_interval: 0,
            smoothing_window: 50,
            env: EnvSection::default(),
            trainer: TrainerHyper::default(),
            discovery: DiscoveryConfig::default(),
        }
    }
}

/// One mode-forced field override, recorded in the run audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForcedChange {
    pub field: String,
    pub from: String,
    pub to: String,
    pub reason: String,
}

/// Config after mode resolution, plus the audit trail of what the mode and
/// command line changed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub forced: Vec<ForcedChange>,
}

impl RunConfig {
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                got: self.schema_version,
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Field {
                field: "seeds",
                reason: "at least one seed required".into(),
            });
        }
        if self.episodes == 0 {
            return Err(ConfigError::Field {
                field: "episodes",
                reason: "must be positive".into(),
            });
        }
        if self.smoothing_window == 0 {
            return Err(ConfigError::Field {
                field: "smoothing_window",
                reason: "must be positive".into(),
            });
        }
        if !(0.0..=100.0).contains(&self.discovery.percentile_k) {
            return Err(ConfigError::Field {
                field: "discovery.percentile_k",
                reason: "must lie in [0, 100]".into(),
            });
        }
        if let Some(z) = self.discovery.threshold_z {
            if !(z > 0.0 && z < 1.0) {
                return Err(ConfigError::Field {
                    field: "discovery.threshold_z",
                    reason: "must lie in (0, 1)".into(),
                });
            }
        }
        self.env.build()?;
        Ok(())
    }

    /// Applies mode-implied constraints and optional CLI overrides,
    /// recording every change.
    pub fn resolve(
        mut self,
        mode_override: Option<Mode>,
        seed_override: Option<u64>,
    ) -> ResolvedConfig {
        let mut forced = Vec::new();
        if let Some(mode) = mode_override {
            if mode != self.mode {
                forced.push(ForcedChange {
                    field: "mode".into(),
                    from: self.mode.to_string(),
                    to: mode.to_string(),
                    reason: "--mode override".into(),
                });
                self.mode = mode;
            }
        }
        if let Some(seed) = seed_override {
            forced.push(ForcedChange {
                field: "seeds".into(),
                from: format!("{:?}", self.seeds),
                to: format!("[{seed}]"),
                reason: "--seed override".into(),
            });
            self.seeds = vec![seed];
        }
        if self.mode == Mode::NoOptions && self.discovery.max_generations != 0 {
            forced.push(ForcedChange {
                field: "discovery.max_generations".into(),
                from: self.discovery.max_generations.to_string(),
                to: "0".into(),
                reason: "mode = no_options disables discovery".into(),
            });
            self.discovery.max_generations = 0;
        }
        if self.mode == Mode::SingleAgentOptions && self.discovery.threshold_z.is_some() {
            forced.push(ForcedChange {
                field: "discovery.threshold_z".into(),
                from: format!("{:?}", self.discovery.threshold_z),
                to: "ignored".into(),
                reason: "mode = single_agent_options forces singleton groups".into(),
            });
        }
        ResolvedConfig {
            config: self,
            forced,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// A fully commented reference of every field at its default value,
/// written into each run directory.
pub fn reference_toml() -> String {
    let defaults = RunConfig::default();
    let body = defaults.to_toml();
    let header = "\
# Run configuration reference. Every field below is shown at its default
# value. Units: episodes count whole environment episodes; max_steps counts
# environment steps; reward weights are dimensionless; learning rates are
# per Adam step; intervals are in episodes.
#
# mode: one of \"no_options\" (flat attentive soft actor-critic),
#   \"single_agent_options\" (one covering option per agent), or
#   \"multi_agent_options\" (attention-grouped covering options).
# trainer.updates_per_episode_div: gradient updates per episode =
#   episode length / this divisor.
# discovery.threshold_z: omit to use the default 1/(N-1).
# discovery.generation_interval: episodes between option generations.
#
";
    format!("{header}{body}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        back.validate().unwrap();
    }

    #[test]
    fn reference_parses() {
        let text = reference_toml();
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn schema_version_enforced() {
        let mut cfg = RunConfig::default();
        cfg.schema_version = 99;
        assert!(matches!(cfg.validate(), Err(ConfigError::Schema { got: 99 })));
    }

    #[test]
    fn no_options_mode_forces_discovery_off() {
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::NoOptions;
        cfg.discovery.max_generations = 3;
        let resolved = cfg.resolve(None, None);
        assert_eq!(resolved.config.discovery.max_generations, 0);
        assert_eq!(resolved.forced.len(), 1);
        assert_eq!(resolved.forced[0].field, "discovery.max_generations");
    }

    #[test]
    fn overrides_are_recorded() {
        let cfg = RunConfig::default();
        let resolved = cfg.resolve(Some(Mode::NoOptions), Some(7));
        assert_eq!(resolved.config.seeds, vec![7]);
        assert!(resolved.forced.iter().any(|f| f.field == "mode"));
        assert!(resolved.forced.iter().any(|f| f.field == "seeds"));
    }

    #[test]
    fn bad_fields_rejected() {
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.discovery.percentile_k = 140.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.env.sub_setting = 9;
        assert!(cfg.validate().is_err());
    }
}
