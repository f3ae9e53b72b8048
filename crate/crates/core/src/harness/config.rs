//! Episode configuration (`edgewbc-config/1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::plan::WalkParams;
use super::plant::ContactModel;
use crate::controller::{ReplayLevel, SchedulerConfig, Scheme};
use crate::netsim::{BlockageParams, ChannelModel, NetError, Preset, Trace};
use crate::tsid::TaskTuning;

pub const CONFIG_SCHEMA: &str = "edgewbc-config/1";
pub const SEED_ENV: &str = "EDGEWBC_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("unsupported schema {0:?}, expected {CONFIG_SCHEMA:?}")]
    Schema(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskChoice {
    Balancing,
    Walking,
}

impl TaskChoice {
    pub fn name(self) -> &'static str {
        match self {
            TaskChoice::Balancing => "balancing",
            TaskChoice::Walking => "walking",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum ChannelSpec {
    Constant { delay: f64 },
    Preset { preset: Preset, seed: u64 },
    Trace { path: PathBuf },
    Blockage(BlockageParams),
}

impl ChannelSpec {
    pub fn ideal() -> Self {
        ChannelSpec::Constant { delay: 0.0 }
    }

    /// Parses `ideal`, `constant:SECONDS`, `preset:NAME[:SEED]` or `trace:PATH`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::Invalid(format!("channel {text:?}; use ideal, constant:S, preset:NAME[:SEED] or trace:PATH"));
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        match kind {
            "ideal" if rest.is_empty() => Ok(Self::ideal()),
            "constant" => {
                let delay: f64 = rest.parse().map_err(|_| bad())?;
                Ok(ChannelSpec::Constant { delay })
            }
            "preset" => {
                let (name, seed) = rest.split_once(':').unwrap_or((rest, "0"));
                Ok(ChannelSpec::Preset {
                    preset: name.parse()?,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
            "trace" if !rest.is_empty() => Ok(ChannelSpec::Trace { path: rest.into() }),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ChannelSpec::Constant { delay } => format!("constant:{delay}"),
            ChannelSpec::Preset { preset, seed } => format!("preset:{}:{seed}", preset.name()),
            ChannelSpec::Trace { path } => format!("trace:{}", path.display()),
            ChannelSpec::Blockage(p) => format!("blockage:{}", p.seed),
        }
    }

    /// Constant delay in seconds, if this is a constant channel.
    pub fn constant_delay(&self) -> Option<f64> {
        match self {
            ChannelSpec::Constant { delay } => Some(*delay),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<ChannelModel, ConfigError> {
        Ok(match self {
            ChannelSpec::Constant { delay } => ChannelModel::Constant { delay: *delay },
            ChannelSpec::Preset { preset, seed } => ChannelModel::Blockage(preset.params(*seed)),
            ChannelSpec::Trace { path } => ChannelModel::Trace(Trace::load(path)?),
            ChannelSpec::Blockage(p) => ChannelModel::Blockage(*p),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushForce {
    /// Fraction of the robot's weight.
    WeightFraction(f64),
    Newtons(f64),
}

/// Horizontal push on the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushSpec {
    pub force: PushForce,
    pub start: f64,
    pub duration: f64,
}

impl Default for PushSpec {
    fn default() -> Self {
        Self {
            force: PushForce::WeightFraction(0.25),
            start: 1.0,
            duration: 0.2,
        }
    }
}

impl PushSpec {
    pub fn newtons(&self, weight: f64) -> f64 {
        match self.force {
            PushForce::WeightFraction(f) => f * weight,
            PushForce::Newtons(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub schema: String,
    pub task: TaskChoice,
    pub controller: Scheme,
    #[serde(default = "ChannelSpec::ideal")]
    pub channel: ChannelSpec,
    /// Seconds; walking defaults to the plan horizon.
    #[serde(default)]
    pub duration: Option<f64>,
    /// Measurement noise on joint positions and velocities.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub push: Option<PushSpec>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub pr_replay: ReplayLevel,
    #[serde(default)]
    pub tuning: TaskTuning,
    #[serde(default)]
    pub walk: WalkParams,
    /// Pelvis height of the balancing stance.
    #[serde(default = "default_pelvis_height")]
    pub pelvis_height: f64,
    #[serde(default)]
    pub plant_contacts: ContactModel,
    /// Optional robot model file; the built-in biped otherwise.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Keep the per-cycle log in memory.
    #[serde(default = "default_true")]
    pub record_log: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_pelvis_height() -> f64 {
    0.84
}

fn default_true() -> bool {
    true
}

impl EpisodeConfig {
    /// Defaults for `task`: balancing gets the standard push, walking none.
    pub fn new(task: TaskChoice, controller: Scheme) -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            task,
            controller,
            channel: ChannelSpec::ideal(),
            duration: None,
            noise_sigma: None,
            push: match task {
                TaskChoice::Balancing => Some(PushSpec::default()),
                TaskChoice::Walking => None,
            },
            scheduler: SchedulerConfig::default(),
            pr_replay: ReplayLevel::default(),
            tuning: TaskTuning::default(),
            walk: WalkParams::default(),
            pelvis_height: default_pelvis_height(),
            plant_contacts: ContactModel::default(),
            model: None,
            record_log: true,
            seed: 0,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise_sigma.unwrap_or(match self.task {
            TaskChoice::Balancing => 1e-2,
            TaskChoice::Walking => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != CONFIG_SCHEMA {
            return Err(ConfigError::Schema(self.schema.clone()));
        }
        let field = |path: &str, message: String| Err(ConfigError::Field { path: path.into(), message });
        if let Some(d) = self.duration {
            if !(d > 0.0 && d.is_finite()) {
                return field("duration", format!("must be positive, got {d}"));
            }
        }
        if !(self.noise() >= 0.0 && self.noise().is_finite()) {
            return field("noise_sigma", "must be non-negative".into());
        }
        if let Some(p) = &self.push {
            if !(p.start >= 0.0 && p.duration >= 0.0) {
                return field("push", "start and duration must be non-negative".into());
            }
        }
        if let ChannelSpec::Constant { delay } = self.channel {
            if !(delay >= 0.0 && delay.is_finite()) {
                return field("channel.delay", format!("must be non-negative, got {delay}"));
            }
        }
        if let Err(e) = self.scheduler.validate() {
            return field("scheduler", e);
        }
        Ok(())
    }

    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: EpisodeConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = EpisodeConfig::from_json(r#"{"schema":"edgewbc-config/1","task":"balancing","controller":"la"}"#).unwrap();
        assert_eq!(cfg.noise(), 1e-2);
        assert_eq!(cfg.channel, ChannelSpec::ideal());
        assert!(cfg.push.is_none());
    }

    #[test]
    fn field_errors_carry_paths() {
        let err = EpisodeConfig::from_json(
            r#"{"schema":"edgewbc-config/1","task":"walking","controller":"pr","scheduler":{"freshness":"x"}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("scheduler.freshness"), "{err}");
        let err = EpisodeConfig::from_json(r#"{"schema":"edgewbc-config/1","task":"walking","controller":"pr","bogus":1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn threshold_must_stay_below_period() {
        let err = EpisodeConfig::from_json(
            r#"{"schema":"edgewbc-config/1","task":"walking","controller":"pr","scheduler":{"freshness":0.002}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("scheduler"), "{err}");
    }

    #[test]
    fn channel_strings() {
        assert_eq!(ChannelSpec::parse("constant:0.01").unwrap(), ChannelSpec::Constant { delay: 0.01 });
        assert_eq!(
            ChannelSpec::parse("preset:burning_building:4").unwrap(),
            ChannelSpec::Preset { preset: Preset::BurningBuilding, seed: 4 }
        );
        assert!(ChannelSpec::parse("warp:9").is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = EpisodeConfig::new(TaskChoice::Walking, Scheme::La);
        assert_eq!(EpisodeConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
