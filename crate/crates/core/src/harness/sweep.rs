//! Grids of episodes, run in parallel, with success-rate aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ChannelSpec, ConfigError, EpisodeConfig};
use super::episode::run_episode;
use super::metrics::ResultRow;
use crate::controller::Scheme;
use crate::netsim::Preset;

pub const GRID_SCHEMA: &str = "edgewbc-grid/1";

/// Cartesian grid over controllers, channels and seeds around a base config.
/// Channels come from `delays` (constant) and `presets` x `trace_seeds`;
/// with neither, the base channel is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub schema: String,
    pub base: EpisodeConfig,
    #[serde(default)]
    pub controllers: Vec<Scheme>,
    #[serde(default)]
    pub delays: Vec<f64>,
    #[serde(default)]
    pub presets: Vec<Preset>,
    #[serde(default)]
    pub trace_seeds: Vec<u64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub name: String,
    /// Aggregation key: controller plus channel family.
    pub group: String,
    pub config: EpisodeConfig,
}

impl Grid {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let grid: Grid = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if grid.schema != GRID_SCHEMA {
            return Err(ConfigError::Schema(grid.schema));
        }
        grid.base.validate().map_err(|e| match e {
            ConfigError::Field { path, message } => ConfigError::Field {
                path: format!("base.{path}"),
                message,
            },
            other => other,
        })?;
        if grid.presets.is_empty() != grid.trace_seeds.is_empty() {
            return Err(ConfigError::Field {
                path: "trace_seeds".into(),
                message: "presets and trace_seeds must be given together".into(),
            });
        }
        if let Some(d) = grid.delays.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(ConfigError::Field {
                path: "delays".into(),
                message: format!("delays must be non-negative, got {d}"),
            });
        }
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn expand(&self) -> Vec<GridPoint> {
        let controllers = if self.controllers.is_empty() { vec![self.base.controller] } else { self.controllers.clone() };
        let seeds = if self.seeds.is_empty() { vec![self.base.seed] } else { self.seeds.clone() };
        let mut channels: Vec<(String, ChannelSpec)> = Vec::new();
        for &delay in &self.delays {
            channels.push((format!("constant:{delay}"), ChannelSpec::Constant { delay }));
        }
        for &preset in &self.presets {
            for &seed in &self.trace_seeds {
                channels.push((format!("preset:{}", preset.name()), ChannelSpec::Preset { preset, seed }));
            }
        }
        if channels.is_empty() {
            channels.push((self.base.channel.label(), self.base.channel.clone()));
        }
        let mut out = Vec::new();
        for &controller in &controllers {
            for (family, channel) in &channels {
                for &seed in &seeds {
                    let mut config = self.base.clone();
                    config.controller = controller;
                    config.channel = channel.clone();
                    config.seed = seed;
                    config.record_log = false;
                    out.push(GridPoint {
                        name: format!("{}/{}/{}/{seed}", config.task.name(), controller.name(), channel.label()),
                        group: format!("{}/{family}", controller.name()),
                        config,
                    });
                }
            }
        }
        out
    }
}

pub fn run_point(point: &GridPoint) -> ResultRow {
    let cfg = &point.config;
    let label = cfg.channel.label();
    let delay = cfg.channel.constant_delay();
    match run_episode(cfg) {
        Ok(m) => ResultRow::from_metrics(&point.name, cfg.task.name(), cfg.controller.name(), &label, delay, cfg.seed, &m),
        Err(e) => {
            let mut row = ResultRow::from_metrics(&point.name, cfg.task.name(), cfg.controller.name(), &label, delay, cfg.seed, &Default::default());
            row.error = Some(e.to_string());
            row
        }
    }
}

/// Runs every point on `jobs` threads; rows keep the grid order.
pub fn run_sweep(points: &[GridPoint], jobs: usize) -> Vec<ResultRow> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| points.par_iter().map(run_point).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Means over successful trials only; empty when none succeeded.
    pub com_error: Option<f64>,
    pub violation: Option<f64>,
}

pub fn summarize(points: &[GridPoint], rows: &[ResultRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for (p, r) in points.iter().zip(rows) {
        groups.entry(p.group.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            let ok: Vec<_> = rs.iter().filter(|r| r.success()).collect();
            let mean = |f: fn(&ResultRow) -> f64| (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64);
            GroupSummary {
                group: group.to_string(),
                trials: rs.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / rs.len() as f64,
                com_error: mean(|r| r.com_error),
                violation: mean(|r| r.violation),
            }
        })
        .collect()
}

pub fn write_summary_csv(out: impl std::io::Write, summary: &[GroupSummary]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TaskChoice;

    fn grid() -> Grid {
        Grid {
            schema: GRID_SCHEMA.into(),
            base: EpisodeConfig::new(TaskChoice::Walking, Scheme::Pr),
            controllers: vec![Scheme::Pr, Scheme::La],
            delays: vec![0.0, 0.005],
            presets: vec![Preset::SmartFactory],
            trace_seeds: vec![1, 2, 3],
            seeds: vec![],
        }
    }

    #[test]
    fn expansion_is_cartesian() {
        let pts = grid().expand();
        assert_eq!(pts.len(), 2 * (2 + 3));
        assert_eq!(pts.iter().filter(|p| p.group == "la/preset:smart_factory").count(), 3);
    }

    #[test]
    fn summary_excludes_failures_from_means() {
        let pts = grid().expand();
        let rows: Vec<ResultRow> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut r = ResultRow::from_metrics(&p.name, "walking", "pr", "x", None, 0, &Default::default());
                r.fell = i % 2 == 1;
                r.com_error = if r.fell { 100.0 } else { 1.0 };
                r
            })
            .collect();
        let s = summarize(&pts, &rows);
        for g in &s {
            if let Some(c) = g.com_error {
                assert_eq!(c, 1.0);
            }
        }
    }

    #[test]
    fn grid_requires_schema() {
        let mut g = grid();
        g.schema = "x".into();
        let text = serde_json::to_string(&g).unwrap();
        assert!(matches!(Grid::from_json(&text), Err(ConfigError::Schema(_))));
    }
}
