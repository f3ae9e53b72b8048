//! Episode metrics, per-cycle log and their CSV forms.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::controller::CommandSource;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub t: f64,
    /// Round trip of this cycle's slot; infinite when the reply is dropped.
    pub delay: f64,
    pub source: CommandSource,
    pub command_age: f64,
    pub com_error: f64,
    pub violation: f64,
    /// Symmetric difference between the commanded and the current optimal
    /// active set; `None` when the reference solve failed or the torque was held.
    pub as_discrepancy: Option<usize>,
    /// Applied joint torques; kept in memory only.
    #[serde(skip)]
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean: f64,
    pub worst: f64,
}

impl TimingStats {
    pub fn record(&mut self, seconds: f64) {
        self.count += 1;
        self.mean += (seconds - self.mean) / self.count as f64;
        self.worst = self.worst.max(seconds);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ChannelStats {
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub in_flight: usize,
    /// Deliveries already older than the freshness threshold on arrival.
    pub late: usize,
    pub delay_p50: f64,
    pub delay_p95: f64,
    pub delay_max: f64,
    pub wrapped_lookups: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FallEvent {
    pub time: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SourceCounts {
    pub remote: usize,
    pub cached: usize,
    pub precomputed: usize,
    pub onboard: usize,
    pub held: usize,
}

impl SourceCounts {
    pub fn add(&mut self, s: CommandSource) {
        match s {
            CommandSource::Remote => self.remote += 1,
            CommandSource::Cached => self.cached += 1,
            CommandSource::Precomputed => self.precomputed += 1,
            CommandSource::Onboard => self.onboard += 1,
            CommandSource::Held => self.held += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub cycles: usize,
    pub com_error_avg: f64,
    pub violation_avg: f64,
    pub fell: bool,
    pub fall: Option<FallEvent>,
    pub faults: usize,
    pub remote_failures: usize,
    pub saturated_cycles: usize,
    pub sources: SourceCounts,
    pub channel: ChannelStats,
    /// Discrepancy size to number of cycles.
    pub discrepancy_histogram: BTreeMap<usize, usize>,
    pub solve_time: TimingStats,
    pub apply_time: TimingStats,
    pub log: Vec<CycleRecord>,
}

/// Running sums for the two headline averages; divided once at the end so
/// recomputation from the log matches bit for bit.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    pub n: usize,
    pub com_error: f64,
    pub violation: f64,
}

impl Accumulator {
    pub fn add(&mut self, com_error: f64, violation: f64) {
        self.n += 1;
        self.com_error += com_error;
        self.violation += violation;
    }

    pub fn averages(&self) -> (f64, f64) {
        if self.n == 0 {
            return (f64::NAN, f64::NAN);
        }
        (self.com_error / self.n as f64, self.violation / self.n as f64)
    }
}

impl EpisodeMetrics {
    /// Averages recomputed from the per-cycle log.
    pub fn averages_from_log(&self) -> (f64, f64) {
        let mut acc = Accumulator::default();
        for r in &self.log {
            acc.add(r.com_error, r.violation);
        }
        acc.averages()
    }

    pub fn write_log_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "delay", "source", "command_age", "com_error", "violation", "as_discrepancy"])?;
        for r in &self.log {
            w.write_record([
                r.t.to_string(),
                r.delay.to_string(),
                r.source.name().to_string(),
                r.command_age.to_string(),
                r.com_error.to_string(),
                r.violation.to_string(),
                r.as_discrepancy.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Histogram joined with the mean per-cycle metrics of each bin.
    pub fn write_discrepancy_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut bins: BTreeMap<Option<usize>, (usize, f64, f64)> = BTreeMap::new();
        for r in &self.log {
            let e = bins.entry(r.as_discrepancy).or_default();
            e.0 += 1;
            e.1 += r.com_error;
            e.2 += r.violation;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["discrepancy", "cycles", "com_error_avg", "violation_avg"])?;
        for (d, (n, c, v)) in bins {
            w.write_record([
                d.map(|d| d.to_string()).unwrap_or_else(|| "none".into()),
                n.to_string(),
                (c / n as f64).to_string(),
                (v / n as f64).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One results-table row: the scalar metrics of an episode plus its labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub name: String,
    pub task: String,
    pub controller: String,
    pub channel: String,
    /// Constant delay in seconds; empty for other channels.
    pub delay: Option<f64>,
    pub seed: u64,
    pub fell: bool,
    pub fall_time: Option<f64>,
    pub fall_reason: Option<String>,
    pub cycles: usize,
    pub com_error: f64,
    pub violation: f64,
    pub faults: usize,
    pub remote_failures: usize,
    pub saturated_cycles: usize,
    pub used_remote: usize,
    pub used_cached: usize,
    pub used_precomputed: usize,
    pub used_onboard: usize,
    pub used_held: usize,
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub late: usize,
    pub delay_p50: f64,
    pub delay_p95: f64,
    pub delay_max: f64,
    pub solve_avg: f64,
    pub solve_worst: f64,
    pub apply_avg: f64,
    pub apply_worst: f64,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn from_metrics(name: &str, task: &str, controller: &str, channel: &str, delay: Option<f64>, seed: u64, m: &EpisodeMetrics) -> Self {
        Self {
            name: name.into(),
            task: task.into(),
            controller: controller.into(),
            channel: channel.into(),
            delay,
            seed,
            fell: m.fell,
            fall_time: m.fall.as_ref().map(|f| f.time),
            fall_reason: m.fall.as_ref().map(|f| f.reason.clone()),
            cycles: m.cycles,
            com_error: m.com_error_avg,
            violation: m.violation_avg,
            faults: m.faults,
            remote_failures: m.remote_failures,
            saturated_cycles: m.saturated_cycles,
            used_remote: m.sources.remote,
            used_cached: m.sources.cached,
            used_precomputed: m.sources.precomputed,
            used_onboard: m.sources.onboard,
            used_held: m.sources.held,
            sent: m.channel.sent,
            delivered: m.channel.delivered,
            dropped: m.channel.dropped,
            late: m.channel.late,
            delay_p50: m.channel.delay_p50,
            delay_p95: m.channel.delay_p95,
            delay_max: m.channel.delay_max,
            solve_avg: m.solve_time.mean,
            solve_worst: m.solve_time.worst,
            apply_avg: m.apply_time.mean,
            apply_worst: m.apply_time.worst,
            error: None,
        }
    }

    pub fn success(&self) -> bool {
        !self.fell && self.error.is_none()
    }
}

pub fn write_results_csv<'a>(out: impl Write, rows: impl IntoIterator<Item = &'a ResultRow>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
