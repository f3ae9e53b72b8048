//! Closed-loop episode: plant, channel, edge solver and robot controller on
//! one virtual clock.

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::config::{ConfigError, EpisodeConfig, TaskChoice};
use super::metrics::{percentile, Accumulator, CycleRecord, EpisodeMetrics, FallEvent};
use super::plan::{BalancePlan, Plan, PlanError, WalkPlan};
use super::plant::Plant;
use crate::controller::{CommandSource, Controller, Origin, Planner, RemoteSolver, Scheme, SolutionPacket, StepContext};
use crate::netsim::{Channel, Direction, Link};
use crate::qpsolver::active_set_discrepancy;
use crate::rbd::{self, RbdError, RobotModel, RobotState, BASE_DOF};
use crate::tsid::{Limits, TsidError};

/// Consecutive faulted cycles that count as a fall.
pub const FAULT_STREAK: usize = 50;
/// Fraction of the nominal CoM height below which the robot has fallen.
pub const FALL_HEIGHT_RATIO: f64 = 0.6;
pub const FALL_PITCH: f64 = 1.0;
/// Default balancing duration in seconds.
pub const BALANCE_DURATION: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Rbd(#[from] RbdError),
    #[error("bootstrap solve failed: {0}")]
    Bootstrap(TsidError),
}

/// Generalized force of a horizontal push on the base.
fn push_force(model: &RobotModel, cfg: &EpisodeConfig, t: f64) -> Option<DVector<f64>> {
    let p = cfg.push.as_ref()?;
    if t + 1e-12 < p.start || t + 1e-12 >= p.start + p.duration {
        return None;
    }
    let mut f = DVector::zeros(model.nv());
    f[0] = p.newtons(model.weight());
    Some(f)
}

pub fn build_plan(model: &RobotModel, cfg: &EpisodeConfig) -> Result<Plan, PlanError> {
    Ok(match cfg.task {
        TaskChoice::Balancing => Plan::Balance(BalancePlan::new(model, cfg.pelvis_height)?),
        TaskChoice::Walking => Plan::Walk(WalkPlan::new(model, cfg.walk)?),
    })
}

/// Runs one episode. Falls end the episode early and are reported in the
/// metrics; only setup problems are errors.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeMetrics, EpisodeError> {
    cfg.validate()?;
    let model = match &cfg.model {
        Some(path) => RobotModel::load(path)?,
        None => RobotModel::biped(),
    };
    let plan = build_plan(&model, cfg)?;
    let channel_model = cfg.channel.build()?;
    let mut channel = Channel::new(channel_model).map_err(ConfigError::from)?;
    let limits = Limits::from_model(&model);
    let planner = Planner { model: &model, limits: &limits };
    let sched = cfg.scheduler;
    let dt = sched.period;
    let duration = cfg.duration.or(plan.horizon()).unwrap_or(BALANCE_DURATION);
    let cycles = (duration / dt).round() as usize;

    let noise = Normal::new(0.0, cfg.noise()).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nj = model.nj();

    let mut plant = Plant::new(RobotState::at_rest(plan.initial_q().clone()), plan.contacts_at(0.0).clone(), cfg.plant_contacts);
    let nominal_height = rbd::com_position(&model, &plant.state.q)?.y;
    let mut contacts = plan.contacts_at(0.0).clone();

    let mut controller = Controller::new(cfg.controller, sched, cfg.pr_replay);
    let mut remote = RemoteSolver::default();
    let mut downlink: Link<Option<SolutionPacket>> = Link::new(Direction::Downlink);
    let boot = planner
        .solve(&plant.state, &plan.tasks_at(&cfg.tuning, 0.0), &contacts, None, Origin::Remote)
        .map_err(EpisodeError::Bootstrap)?;
    controller.bootstrap(boot);

    let switches = plan.switch_times();
    let mut next_precompute = 0usize;
    let mut next_onboard = f64::NEG_INFINITY;

    let mut metrics = EpisodeMetrics::default();
    let mut acc = Accumulator::default();
    let mut delays = Vec::new();
    let mut fault_streak = 0usize;
    let mut last_qdd: Option<DVector<f64>> = None;

    for k in 0..cycles {
        let t = k as f64 * dt;
        plant.state.t = t;
        contacts = plan.contacts_at(t).clone();
        plant.set_candidates(&model, &contacts)?;

        let mut measured = plant.state.clone();
        if cfg.noise() > 0.0 {
            for i in BASE_DOF..BASE_DOF + nj {
                measured.q[i] += noise.sample(&mut rng);
                measured.v[i] += noise.sample(&mut rng);
            }
        }
        let tasks = plan.tasks_at(&cfg.tuning, t);

        // Edge side: answer the state sent this cycle.
        let slot = channel.slot(t);
        let started = Instant::now();
        let reply = remote.solve(&planner, &measured, &tasks, &contacts);
        metrics.solve_time.record(started.elapsed().as_secs_f64());
        let reference_set = reply.as_ref().map(|p| p.active_set.clone());
        let bytes = reply.as_ref().map_or(0, |p| p.wire_bytes());
        downlink.send(&mut channel, t, t, bytes, reply);

        // Robot side: deliveries, then local work scheduled around switches.
        let arrivals: Vec<SolutionPacket> = downlink
            .poll(t)
            .into_iter()
            .filter_map(|m| m.payload)
            .map(|mut p| {
                p.arrival_timestamp = t;
                let age = t - p.state_timestamp;
                delays.push(age);
                if age >= sched.freshness {
                    metrics.channel.late += 1;
                }
                p
            })
            .collect();

        if cfg.controller == Scheme::La {
            while next_precompute < switches.len() && switches[next_precompute] - sched.precompute_lead <= t + 1e-9 {
                let at = switches[next_precompute];
                next_precompute += 1;
                if at <= t {
                    continue;
                }
                let next_contacts = plan.contacts_at(at + 1e-9).clone();
                let next_tasks = plan.tasks_at(&cfg.tuning, at);
                let started = Instant::now();
                if let Ok(p) = planner.solve(&measured, &next_tasks, &next_contacts, None, Origin::Precomputed) {
                    let latency = sched.charged_latency(started.elapsed().as_secs_f64());
                    let rt = slot.round_trip().unwrap_or(f64::INFINITY);
                    controller.set_precomputed(p, t + latency.min(rt));
                }
            }
            let half = sched.switch_window / 2.0;
            let near_switch = switches.iter().any(|s| (t - s).abs() <= half + 1e-9);
            if near_switch && t + 1e-9 >= next_onboard {
                next_onboard = t + sched.onboard_qp_period;
                let started = Instant::now();
                if let Ok(p) = planner.solve(&measured, &tasks, &contacts, None, Origin::Onboard) {
                    let latency = sched.charged_latency(started.elapsed().as_secs_f64());
                    controller.submit_local(p, t + latency);
                }
            }
        }

        let ctx = StepContext {
            model: &model,
            limits: &limits,
            state: &measured,
            tasks: &tasks,
            contacts: &contacts,
        };
        let started = Instant::now();
        let out = controller.step(&ctx, arrivals);
        if cfg.controller == Scheme::La && out.source != CommandSource::Held {
            metrics.apply_time.record(started.elapsed().as_secs_f64());
        }

        // Metrics on the commanded accelerations at the measured state.
        let nv = model.nv();
        let qdd_cmd = match &out.y {
            Some(y) => Some(y.rows(0, nv).into_owned()),
            None => last_qdd.clone(),
        };
        let monitored = plan.monitored_contacts(&model, t);
        let violation = match &qdd_cmd {
            Some(qdd) => {
                let jc = rbd::contact_jacobian(&model, &measured.q, &monitored)?;
                let drift = rbd::contact_drift(&model, &measured, &monitored)?;
                (jc * qdd + drift).norm()
            }
            None => 0.0,
        };
        if qdd_cmd.is_some() {
            last_qdd = qdd_cmd;
        }
        let com = rbd::com_position(&model, &plant.state.q)?;
        let reference = plan.com_reference(t);
        let com_error = ((com.x - reference.position[0]).powi(2) + (com.y - reference.position[1]).powi(2)).sqrt();
        let discrepancy = match (&out.active_set, &reference_set) {
            (Some(a), Some(b)) => Some(active_set_discrepancy(a, b)),
            _ => None,
        };
        if let Some(d) = discrepancy {
            *metrics.discrepancy_histogram.entry(d).or_default() += 1;
        }
        acc.add(com_error, violation);
        metrics.sources.add(out.source);
        if out.saturated {
            metrics.saturated_cycles += 1;
        }
        if cfg.record_log {
            metrics.log.push(CycleRecord {
                t,
                delay: slot.round_trip().unwrap_or(f64::INFINITY),
                source: out.source,
                command_age: out.command_age,
                com_error,
                violation,
                as_discrepancy: discrepancy,
                tau: out.tau.iter().copied().collect(),
            });
        }
        metrics.cycles = k + 1;

        // Plant.
        let ext = push_force(&model, cfg, t);
        let mut fall = plant.step(&model, &out.tau, ext.as_ref(), dt).err().map(|e| format!("plant: {e}"));
        fault_streak = if out.fault.is_some() { fault_streak + 1 } else { 0 };
        if fall.is_none() && fault_streak >= FAULT_STREAK {
            fall = Some(format!("{FAULT_STREAK} consecutive faulted cycles"));
        }
        if fall.is_none() {
            let h = rbd::com_position(&model, &plant.state.q)?.y;
            if h < FALL_HEIGHT_RATIO * nominal_height {
                fall = Some("CoM height below threshold".into());
            } else if plant.state.q[2].abs() > FALL_PITCH {
                fall = Some("torso pitch beyond threshold".into());
            }
        }
        if let Some(reason) = fall {
            metrics.fell = true;
            metrics.fall = Some(FallEvent { time: t + dt, reason });
            break;
        }
    }

    let (c, v) = acc.averages();
    metrics.com_error_avg = c;
    metrics.violation_avg = v;
    metrics.faults = controller.faults;
    metrics.remote_failures = remote.failures;
    delays.sort_by(f64::total_cmp);
    metrics.channel.sent = downlink.stats.sent;
    metrics.channel.delivered = downlink.stats.delivered;
    metrics.channel.dropped = downlink.stats.dropped;
    metrics.channel.in_flight = downlink.in_flight();
    metrics.channel.delay_p50 = percentile(&delays, 50.0);
    metrics.channel.delay_p95 = percentile(&delays, 95.0);
    metrics.channel.delay_max = delays.last().copied().unwrap_or(f64::NAN);
    metrics.channel.wrapped_lookups = channel.wrapped_lookups;
    Ok(metrics)
}
