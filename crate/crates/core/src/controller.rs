//! Robot-side split controllers.
//!
//! * Purely remote (PR): executes the freshest remote optimum if it is young
//!   enough, otherwise replays the last one received.
//! * Locally assisted (LA): keeps the latest decomposition of the remote
//!   optimum and reapplies it every cycle to a right-hand side built from the
//!   current measured state.
//!
//! Around planned contact switches LA also uses decompositions computed on
//! board: one for the next contact mode shortly before the switch, and
//! periodic full solves inside a window centred on the switch.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::qpsolver::{self, ActiveSet, Decomposition};
use crate::rbd::{ContactSet, RobotModel, RobotState};
use crate::tsid::{self, Limits, TaskSpec, TsidError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Purely remote baseline.
    Pr,
    /// Locally assisted.
    La,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Pr => "pr",
            Scheme::La => "la",
        }
    }
}

/// What PR re-executes when no fresh packet is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayLevel {
    /// Stale `y`, torque re-extracted with the current dynamics.
    #[default]
    Y,
    /// Stale torque as computed at the remote state.
    Tau,
}

/// Time charged for an on-board full solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnboardLatency {
    /// Fixed budget in seconds; keeps episodes deterministic.
    Fixed(f64),
    /// Measured wall time multiplied by the slowdown factor.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub period: f64,
    /// Freshness threshold on packet age; `0 < freshness < period`.
    pub freshness: f64,
    pub switch_window: f64,
    pub onboard_qp_period: f64,
    pub precompute_lead: f64,
    pub onboard_slowdown: f64,
    pub onboard_latency: OnboardLatency,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            period: 1e-3,
            freshness: 0.8e-3,
            switch_window: 0.1,
            onboard_qp_period: 5e-3,
            precompute_lead: 1e-2,
            onboard_slowdown: 3.1,
            onboard_latency: OnboardLatency::Fixed(3e-3),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.period > 0.0) {
            return Err("period must be positive".into());
        }
        if !(self.freshness > 0.0 && self.freshness < self.period) {
            return Err("freshness threshold must satisfy 0 < d* < T".into());
        }
        if !(self.precompute_lead > 0.0 && self.precompute_lead < self.switch_window / 2.0) {
            return Err("precompute lead must be positive and below half the switch window".into());
        }
        if !(self.onboard_qp_period > 0.0) {
            return Err("on-board QP period must be positive".into());
        }
        if !(self.onboard_slowdown >= 1.0) {
            return Err("on-board slowdown must be at least 1".into());
        }
        if let OnboardLatency::Fixed(x) = self.onboard_latency {
            if !(x >= 0.0 && x.is_finite()) {
                return Err("on-board latency must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Seconds charged for an on-board solve that took `wall` seconds here.
    pub fn charged_latency(&self, wall: f64) -> f64 {
        match self.onboard_latency {
            OnboardLatency::Fixed(x) => x,
            OnboardLatency::Measured => wall * self.onboard_slowdown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Remote,
    Onboard,
    Precomputed,
}

#[derive(Debug, Clone)]
pub struct SolutionPacket {
    pub y: DVector<f64>,
    pub tau: DVector<f64>,
    pub active_set: ActiveSet,
    pub decomposition: Arc<Decomposition>,
    pub contacts: ContactSet,
    pub state_timestamp: f64,
    pub arrival_timestamp: f64,
    pub origin: Origin,
}

impl SolutionPacket {
    pub fn mode_id(&self) -> u32 {
        self.active_set.contact_mode_id
    }

    /// Downlink payload size: decomposition plus the optimum.
    pub fn wire_bytes(&self) -> usize {
        self.decomposition.encoded_len() + 8 * (self.y.len() + self.tau.len())
    }
}

/// Full solve of the TSID problem; the basis of every packet.
pub struct Planner<'a> {
    pub model: &'a RobotModel,
    pub limits: &'a Limits,
}

impl Planner<'_> {
    pub fn solve(
        &self,
        state: &RobotState,
        tasks: &[TaskSpec],
        contacts: &ContactSet,
        warm: Option<&ActiveSet>,
        origin: Origin,
    ) -> Result<SolutionPacket, TsidError> {
        let problem = tsid::build_problem(self.model, state, tasks, contacts, self.limits)?;
        let sol = qpsolver::solve(&problem.qp, warm)?;
        let cmd = tsid::extract_torque(self.model, state, contacts, &sol.y, self.limits)?;
        let mut dec = sol.decomposition;
        dec.timestamp = state.t;
        Ok(SolutionPacket {
            y: sol.y,
            tau: cmd.tau,
            active_set: sol.active_set,
            decomposition: Arc::new(dec),
            contacts: contacts.clone(),
            state_timestamp: state.t,
            arrival_timestamp: state.t,
            origin,
        })
    }
}

/// Edge-side solver warm-started from its own previous active set.
#[derive(Debug, Default)]
pub struct RemoteSolver {
    warm: Option<ActiveSet>,
    pub failures: usize,
}

impl RemoteSolver {
    /// Solves for a received state snapshot; failures withhold the packet.
    pub fn solve(&mut self, planner: &Planner<'_>, state: &RobotState, tasks: &[TaskSpec], contacts: &ContactSet) -> Option<SolutionPacket> {
        match planner.solve(state, tasks, contacts, self.warm.as_ref(), Origin::Remote) {
            Ok(p) => {
                self.warm = Some(p.active_set.clone());
                Some(p)
            }
            Err(_) => {
                self.failures += 1;
                None
            }
        }
    }
}

/// Robot-side cache.
#[derive(Debug, Clone, Default)]
pub struct ControllerCache {
    /// Latest usable packet of the current contact mode (LA).
    pub decomposition: Option<SolutionPacket>,
    /// Most recently received remote packet of any mode (PR).
    pub last_remote: Option<SolutionPacket>,
    /// Decomposition for the upcoming contact mode, usable from `.1` on.
    pub precomputed_next_mode: Option<(SolutionPacket, f64)>,
    pub last_tau: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSource {
    Remote,
    Cached,
    Precomputed,
    Onboard,
    Held,
}

impl CommandSource {
    pub fn name(self) -> &'static str {
        match self {
            CommandSource::Remote => "remote",
            CommandSource::Cached => "cached",
            CommandSource::Precomputed => "precomputed",
            CommandSource::Onboard => "onboard",
            CommandSource::Held => "held",
        }
    }
}

/// Inputs the robot has at a control instant.
pub struct StepContext<'a> {
    pub model: &'a RobotModel,
    pub limits: &'a Limits,
    /// Measured state; `t` is the current time.
    pub state: &'a RobotState,
    pub tasks: &'a [TaskSpec],
    pub contacts: &'a ContactSet,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub tau: DVector<f64>,
    /// Commanded `(q̈, f)`; `None` when the last torque was held.
    pub y: Option<DVector<f64>>,
    pub contacts: ContactSet,
    pub source: CommandSource,
    /// Age of the state the command was derived from.
    pub command_age: f64,
    pub saturated: bool,
    pub fault: Option<String>,
    pub active_set: Option<ActiveSet>,
}

pub struct Controller {
    pub scheme: Scheme,
    pub config: SchedulerConfig,
    pub replay: ReplayLevel,
    pub cache: ControllerCache,
    pending_local: Vec<(SolutionPacket, f64)>,
    pub faults: usize,
}

impl Controller {
    pub fn new(scheme: Scheme, config: SchedulerConfig, replay: ReplayLevel) -> Self {
        Self {
            scheme,
            config,
            replay,
            cache: ControllerCache::default(),
            pending_local: Vec::new(),
            faults: 0,
        }
    }

    /// Seeds the cache with an ideal solve at the initial state.
    pub fn bootstrap(&mut self, packet: SolutionPacket) {
        self.cache.last_remote = Some(packet.clone());
        self.cache.decomposition = Some(packet);
    }

    /// Registers an on-board result that becomes usable at `available_at`.
    pub fn submit_local(&mut self, packet: SolutionPacket, available_at: f64) {
        self.pending_local.push((packet, available_at));
    }

    /// Stores the next-mode decomposition; one entry per upcoming switch.
    pub fn set_precomputed(&mut self, packet: SolutionPacket, available_at: f64) {
        self.cache.precomputed_next_mode = Some((packet, available_at));
    }

    fn absorb(&mut self, packet: SolutionPacket, mode: u32) {
        if packet.origin == Origin::Remote
            && self
                .cache
                .last_remote
                .as_ref()
                .is_none_or(|p| packet.state_timestamp >= p.state_timestamp)
        {
            self.cache.last_remote = Some(packet.clone());
        }
        if packet.mode_id() != mode {
            // A remote answer for the upcoming mode refines the precompute.
            if let Some((pre, _)) = &self.cache.precomputed_next_mode {
                if pre.mode_id() == packet.mode_id() && packet.state_timestamp >= pre.state_timestamp {
                    let at = packet.arrival_timestamp;
                    self.cache.precomputed_next_mode = Some((packet, at));
                }
            }
            return;
        }
        let newer = self
            .cache
            .decomposition
            .as_ref()
            .is_none_or(|c| c.mode_id() != mode || packet.state_timestamp >= c.state_timestamp);
        if newer {
            self.cache.decomposition = Some(packet);
        }
    }

    /// One control cycle. `arrivals` are the remote packets delivered since
    /// the previous cycle, with their arrival timestamps set.
    pub fn step(&mut self, ctx: &StepContext<'_>, arrivals: Vec<SolutionPacket>) -> StepOutput {
        let now = ctx.state.t;
        let mode = ctx.contacts.mode_id();
        let fresh_age = self.config.freshness;
        let mut fresh: Option<SolutionPacket> = None;
        let mut incoming = arrivals;
        let (ready, waiting): (Vec<_>, Vec<_>) = self.pending_local.drain(..).partition(|(_, at)| *at <= now + 1e-12);
        self.pending_local = waiting;
        incoming.extend(ready.into_iter().map(|(mut p, at)| {
            p.arrival_timestamp = at;
            p
        }));
        incoming.sort_by(|a, b| a.state_timestamp.total_cmp(&b.state_timestamp));
        for p in &incoming {
            if p.origin == Origin::Remote
                && now - p.state_timestamp < fresh_age
                && fresh.as_ref().is_none_or(|f| p.state_timestamp > f.state_timestamp)
            {
                fresh = Some(p.clone());
            }
        }
        let switched = self
            .cache
            .decomposition
            .as_ref()
            .is_some_and(|c| c.mode_id() != mode);
        for p in incoming {
            self.absorb(p, mode);
        }
        let out = match self.scheme {
            Scheme::Pr => self.pr_step(ctx, fresh),
            Scheme::La => self.la_step(ctx, switched),
        };
        if out.fault.is_some() {
            self.faults += 1;
        }
        self.cache.last_tau = Some(out.tau.clone());
        out
    }

    fn hold(&self, ctx: &StepContext<'_>, fault: String) -> StepOutput {
        let tau = self
            .cache
            .last_tau
            .clone()
            .unwrap_or_else(|| DVector::zeros(ctx.model.nj()));
        StepOutput {
            tau,
            y: None,
            contacts: ctx.contacts.clone(),
            source: CommandSource::Held,
            command_age: f64::INFINITY,
            saturated: false,
            fault: Some(fault),
            active_set: None,
        }
    }

    fn pr_step(&mut self, ctx: &StepContext<'_>, fresh: Option<SolutionPacket>) -> StepOutput {
        let now = ctx.state.t;
        let (packet, source) = match fresh {
            Some(p) => (p, CommandSource::Remote),
            None => match self.cache.last_remote.clone() {
                Some(p) => (p, CommandSource::Cached),
                None => return self.hold(ctx, "no remote packet received yet".into()),
            },
        };
        let (tau, saturated) = match (source, self.replay) {
            (CommandSource::Cached, ReplayLevel::Tau) => (packet.tau.clone(), false),
            _ => match tsid::extract_torque(ctx.model, ctx.state, &packet.contacts, &packet.y, ctx.limits) {
                Ok(cmd) => (cmd.tau, cmd.saturated),
                Err(e) => return self.hold(ctx, format!("torque extraction failed: {e}")),
            },
        };
        StepOutput {
            tau,
            y: Some(packet.y.clone()),
            contacts: packet.contacts.clone(),
            source,
            command_age: now - packet.state_timestamp,
            saturated,
            fault: None,
            active_set: Some(packet.active_set.clone()),
        }
    }

    fn la_step(&mut self, ctx: &StepContext<'_>, switched: bool) -> StepOutput {
        let now = ctx.state.t;
        let mode = ctx.contacts.mode_id();
        let cached_ok = self.cache.decomposition.as_ref().is_some_and(|c| c.mode_id() == mode);
        let mut promoted = false;
        if !cached_ok {
            match self.cache.precomputed_next_mode.take() {
                Some((p, at)) if p.mode_id() == mode && at <= now + 1e-12 => {
                    self.cache.decomposition = Some(p);
                    promoted = true;
                }
                other => {
                    self.cache.precomputed_next_mode = other;
                    let what = if switched { "contact switch without a usable decomposition" } else { "cache holds another contact mode" };
                    return self.hold(ctx, what.into());
                }
            }
        } else if self
            .cache
            .precomputed_next_mode
            .as_ref()
            .is_some_and(|(p, _)| p.mode_id() == mode)
        {
            // The precompute target became current through a fresher packet.
            self.cache.precomputed_next_mode = None;
        }
        let packet = self.cache.decomposition.as_ref().expect("mode-matching cache");
        let age = now - packet.state_timestamp;
        let y = if packet.origin == Origin::Remote && age.abs() < 1e-12 {
            // Solved at this very state, so the rebuilt feedback vector would
            // be the solver's own and the optimizer is already the answer.
            packet.y.clone()
        } else {
            let b = match tsid::build_b(ctx.model, ctx.state, ctx.tasks, ctx.contacts, ctx.limits, &packet.active_set) {
                Ok(b) => b,
                Err(e) => return self.hold(ctx, format!("feedback vector: {e}")),
            };
            match packet.decomposition.apply(&b) {
                Ok(y) => y,
                Err(e) => return self.hold(ctx, format!("decomposition: {e}")),
            }
        };
        let cmd = match tsid::extract_torque(ctx.model, ctx.state, ctx.contacts, &y, ctx.limits) {
            Ok(c) => c,
            Err(e) => return self.hold(ctx, format!("torque extraction failed: {e}")),
        };
        let source = if promoted {
            CommandSource::Precomputed
        } else if age < self.config.freshness {
            match packet.origin {
                Origin::Remote => CommandSource::Remote,
                Origin::Onboard => CommandSource::Onboard,
                Origin::Precomputed => CommandSource::Precomputed,
            }
        } else {
            match packet.origin {
                Origin::Remote => CommandSource::Cached,
                Origin::Onboard => CommandSource::Onboard,
                Origin::Precomputed => CommandSource::Precomputed,
            }
        };
        StepOutput {
            tau: cmd.tau,
            y: Some(y),
            contacts: ctx.contacts.clone(),
            source,
            command_age: age,
            saturated: cmd.saturated,
            fault: None,
            active_set: Some(packet.active_set.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionSite {
    RemoteOnly,
    LocalAndRemote,
}

/// Full solves run on board only inside windows centred on planned switches.
pub fn switch_window_scheduler(t: f64, switch_times: &[f64], config: &SchedulerConfig) -> ExecutionSite {
    let half = config.switch_window / 2.0;
    if switch_times.iter().any(|s| (t - s).abs() <= half + 1e-12) {
        ExecutionSite::LocalAndRemote
    } else {
        ExecutionSite::RemoteOnly
    }
}

/// Times the on-board budget for `f`.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_centred_on_switch() {
        let cfg = SchedulerConfig::default();
        let s = [1.0];
        assert_eq!(switch_window_scheduler(0.95, &s, &cfg), ExecutionSite::LocalAndRemote);
        assert_eq!(switch_window_scheduler(1.05, &s, &cfg), ExecutionSite::LocalAndRemote);
        assert_eq!(switch_window_scheduler(0.94, &s, &cfg), ExecutionSite::RemoteOnly);
        assert_eq!(switch_window_scheduler(0.5, &[], &cfg), ExecutionSite::RemoteOnly);
    }

    #[test]
    fn scheduler_config_checks_threshold() {
        let mut cfg = SchedulerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.freshness = 1.5e-3;
        assert!(cfg.validate().is_err());
    }
}
