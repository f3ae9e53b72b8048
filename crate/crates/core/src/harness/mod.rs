//! Experiment driver: plans, episodes, metrics and sweeps.

pub mod config;
pub mod episode;
pub mod metrics;
pub mod plan;
pub mod plant;
pub mod sweep;

pub use config::{ChannelSpec, ConfigError, EpisodeConfig, PushForce, PushSpec, TaskChoice};
pub use episode::{run_episode, EpisodeError};
pub use metrics::{EpisodeMetrics, ResultRow};
pub use plan::{Plan, WalkParams, WalkPlan};
pub use sweep::{run_sweep, summarize, Grid};
