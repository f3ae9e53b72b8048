//! Reference plans: standing balance and LIP-based walking.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rbd::{self, ContactSet, RbdError, RobotModel};
use crate::tsid::{posture_reference, TaskReference, TaskSpec, TaskTuning};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("footstep unreachable: {0}")]
    Unreachable(String),
    #[error("invalid plan parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rbd(#[from] RbdError),
}

/// Slack for comparing times that lie on cycle boundaries.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn sole(self) -> &'static str {
        match self {
            Side::Left => "l_sole",
            Side::Right => "r_sole",
        }
    }

    pub fn contact_frames(self) -> [&'static str; 2] {
        match self {
            Side::Left => ["l_heel", "l_toe"],
            Side::Right => ["r_heel", "r_toe"],
        }
    }
}

fn foot_contacts(model: &RobotModel, sides: &[Side]) -> ContactSet {
    let names: Vec<&str> = sides.iter().flat_map(|s| s.contact_frames()).collect();
    ContactSet::from_names(model, &names).expect("biped contact frames")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkParams {
    pub step_length: f64,
    pub step_height: f64,
    pub single_support: f64,
    pub double_support: f64,
    /// Standing phase before the first lift-off.
    pub initial_double_support: f64,
    /// Standing phase after the last touchdown.
    pub final_double_support: f64,
    pub steps: usize,
    pub pelvis_height: f64,
    /// Zero-moment point offset from the sole point towards the toe.
    pub zmp_offset: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            step_length: 0.15,
            step_height: 0.05,
            single_support: 0.795,
            double_support: 0.005,
            initial_double_support: 0.8,
            final_double_support: 0.8,
            steps: 6,
            pelvis_height: 0.84,
            zmp_offset: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footstep {
    pub swing: Side,
    pub from_x: f64,
    pub to_x: f64,
    pub liftoff: f64,
    pub touchdown: f64,
}

/// One piece of the LIP solution with constant ZMP `zmp` on
/// `[start, next start)`: `x = zmp + (c/2)e^{ωτ} + k e^{−ωτ}`, `τ = t − start`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LipSegment {
    start: f64,
    zmp: f64,
    c: f64,
    k: f64,
}

#[derive(Debug, Clone)]
pub struct WalkPlan {
    pub params: WalkParams,
    pub initial_q: DVector<f64>,
    pub com_height: f64,
    pub omega: f64,
    pub footsteps: Vec<Footstep>,
    segments: Vec<LipSegment>,
    pub horizon: f64,
    contacts_both: ContactSet,
    contacts_left: ContactSet,
    contacts_right: ContactSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Double,
    Single { step: usize },
}

impl WalkPlan {
    pub fn new(model: &RobotModel, params: WalkParams) -> Result<Self, PlanError> {
        let p = params;
        if !(p.single_support > 0.0 && p.double_support >= 0.0 && p.initial_double_support > 0.0 && p.final_double_support > 0.0) {
            return Err(PlanError::Invalid("phase durations must be positive".into()));
        }
        if !(p.step_length.abs() <= 0.3) {
            return Err(PlanError::Unreachable(format!("step length {} exceeds 0.3 m", p.step_length)));
        }
        if !(0.0..=0.15).contains(&p.step_height) {
            return Err(PlanError::Unreachable(format!("step height {} outside [0, 0.15] m", p.step_height)));
        }
        let initial_q = rbd::stance_configuration(model, [0.0, p.pelvis_height], [0.0, 0.0])
            .map_err(|e| PlanError::Unreachable(format!("initial stance: {e}")))?;
        let com = rbd::com_position(model, &initial_q)?;
        let com_height = com.y;
        let omega = (-model.gravity[1] / com_height).sqrt();

        let mut feet = [0.0f64; 2];
        let mut footsteps = Vec::with_capacity(p.steps);
        // ZMP timeline as (start, end, zmp); the first value is solved below.
        let mut pieces = vec![(0.0, p.initial_double_support, f64::NAN)];
        let mut t = p.initial_double_support;
        let mut swing = Side::Right;
        for _ in 0..p.steps {
            let stance_x = feet[swing.other().index()];
            let to_x = stance_x + p.step_length;
            let touchdown = t + p.single_support;
            footsteps.push(Footstep {
                swing,
                from_x: feet[swing.index()],
                to_x,
                liftoff: t,
                touchdown,
            });
            pieces.push((t, touchdown, stance_x + p.zmp_offset));
            feet[swing.index()] = to_x;
            t = touchdown;
            if p.double_support > 0.0 {
                pieces.push((t, t + p.double_support, 0.5 * (feet[0] + feet[1]) + p.zmp_offset));
                t += p.double_support;
            }
            swing = swing.other();
        }
        let final_zmp = 0.5 * (feet[0] + feet[1]) + p.zmp_offset;
        pieces.push((t, t + p.final_double_support, final_zmp));
        let horizon = t + p.final_double_support;

        // Divergent component ξ = x + ẋ/ω integrated backwards from rest.
        let mut xi_end = final_zmp;
        let mut xi_start = vec![0.0; pieces.len()];
        for (i, (a, b, z)) in pieces.iter().enumerate().rev().take(pieces.len() - 1) {
            let xi_a = z + (xi_end - z) * (-omega * (b - a)).exp();
            xi_start[i] = xi_a;
            xi_end = xi_a;
        }
        // Initial ZMP chosen so the CoM starts at rest: ξ(0) = x(0).
        let (a0, b0, _) = pieces[0];
        let decay = (-omega * (b0 - a0)).exp();
        let z0 = (com.x - xi_end * decay) / (1.0 - decay);
        pieces[0].2 = z0;
        xi_start[0] = com.x;
        if !(-0.07..=0.15).contains(&z0) {
            return Err(PlanError::Unreachable(format!("initial ZMP {z0:.3} m leaves the support polygon")));
        }

        let mut segments = Vec::with_capacity(pieces.len());
        let mut x = com.x;
        for ((a, b, z), xi) in pieces.iter().zip(&xi_start) {
            let c = xi - z;
            let k = x - z - 0.5 * c;
            let seg = LipSegment { start: *a, zmp: *z, c, k };
            x = seg.position(omega, *b);
            segments.push(seg);
        }

        Ok(Self {
            params,
            initial_q,
            com_height,
            omega,
            footsteps,
            segments,
            horizon,
            contacts_both: foot_contacts(model, &[Side::Left, Side::Right]),
            contacts_left: foot_contacts(model, &[Side::Left]),
            contacts_right: foot_contacts(model, &[Side::Right]),
        })
    }

    fn segment(&self, t: f64) -> &LipSegment {
        let i = self.segments.partition_point(|s| s.start <= t + TIME_EPS);
        &self.segments[i.saturating_sub(1)]
    }

    /// Horizontal CoM (position, velocity, acceleration).
    pub fn com_x(&self, t: f64) -> [f64; 3] {
        let s = self.segment(t);
        [s.position(self.omega, t), s.velocity(self.omega, t), s.acceleration(self.omega, t)]
    }

    pub fn zmp(&self, t: f64) -> f64 {
        self.segment(t).zmp
    }

    pub fn phase(&self, t: f64) -> Phase {
        for (i, s) in self.footsteps.iter().enumerate() {
            if t + TIME_EPS >= s.liftoff && t + TIME_EPS < s.touchdown {
                return Phase::Single { step: i };
            }
        }
        Phase::Double
    }

    pub fn contacts_at(&self, t: f64) -> &ContactSet {
        match self.phase(t) {
            Phase::Double => &self.contacts_both,
            Phase::Single { step } => match self.footsteps[step].swing {
                Side::Left => &self.contacts_right,
                Side::Right => &self.contacts_left,
            },
        }
    }

    /// Swing-sole reference (x, z, foot angle) during single support.
    pub fn swing_reference(&self, t: f64) -> Option<(Side, TaskReference)> {
        let Phase::Single { step } = self.phase(t) else {
            return None;
        };
        let s = &self.footsteps[step];
        let dur = s.touchdown - s.liftoff;
        let tau = ((t - s.liftoff) / dur).clamp(0.0, 1.0);
        let (b, db, ddb) = smoothstep(tau);
        let dx = s.to_x - s.from_x;
        let h = self.params.step_height;
        let (z, dz, ddz) = if tau < 0.5 {
            let (u, du, ddu) = smoothstep(2.0 * tau);
            (h * u, 2.0 * h * du, 4.0 * h * ddu)
        } else {
            let (u, du, ddu) = smoothstep(2.0 * (1.0 - tau));
            (h * u, -2.0 * h * du, 4.0 * h * ddu)
        };
        let reference = TaskReference {
            position: DVector::from_column_slice(&[s.from_x + dx * b, z, 0.0]),
            velocity: DVector::from_column_slice(&[dx * db / dur, dz / dur, 0.0]),
            acceleration: DVector::from_column_slice(&[dx * ddb / dur.powi(2), ddz / dur.powi(2), 0.0]),
        };
        Some((s.swing, reference))
    }

    /// Lift-off and touchdown instants in increasing order.
    pub fn switch_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.footsteps.iter().flat_map(|s| [s.liftoff, s.touchdown]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
        v
    }
}

impl LipSegment {
    fn position(&self, w: f64, t: f64) -> f64 {
        let tau = t - self.start;
        self.zmp + 0.5 * self.c * (w * tau).exp() + self.k * (-w * tau).exp()
    }

    fn velocity(&self, w: f64, t: f64) -> f64 {
        let tau = t - self.start;
        w * (0.5 * self.c * (w * tau).exp() - self.k * (-w * tau).exp())
    }

    fn acceleration(&self, w: f64, t: f64) -> f64 {
        w * w * (self.position(w, t) - self.zmp)
    }
}

/// Cubic blend `3τ² − 2τ³` and its derivatives.
fn smoothstep(tau: f64) -> (f64, f64, f64) {
    (tau * tau * (3.0 - 2.0 * tau), 6.0 * tau * (1.0 - tau), 6.0 - 12.0 * tau)
}

/// Standing still on both feet at the initial configuration.
#[derive(Debug, Clone)]
pub struct BalancePlan {
    pub initial_q: DVector<f64>,
    pub com: [f64; 2],
    pub contacts: ContactSet,
}

impl BalancePlan {
    pub fn new(model: &RobotModel, pelvis_height: f64) -> Result<Self, PlanError> {
        let initial_q = rbd::stance_configuration(model, [0.0, pelvis_height], [0.0, 0.0])
            .map_err(|e| PlanError::Unreachable(format!("stance: {e}")))?;
        let c = rbd::com_position(model, &initial_q)?;
        Ok(Self {
            initial_q,
            com: [c.x, c.y],
            contacts: foot_contacts(model, &[Side::Left, Side::Right]),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Plan {
    Balance(BalancePlan),
    Walk(WalkPlan),
}

impl Plan {
    pub fn initial_q(&self) -> &DVector<f64> {
        match self {
            Plan::Balance(b) => &b.initial_q,
            Plan::Walk(w) => &w.initial_q,
        }
    }

    pub fn contacts_at(&self, t: f64) -> &ContactSet {
        match self {
            Plan::Balance(b) => &b.contacts,
            Plan::Walk(w) => w.contacts_at(t),
        }
    }

    pub fn com_reference(&self, t: f64) -> TaskReference {
        match self {
            Plan::Balance(b) => TaskReference::hold(DVector::from_column_slice(&b.com)),
            Plan::Walk(w) => {
                let [x, dx, ddx] = w.com_x(t);
                TaskReference {
                    position: DVector::from_column_slice(&[x, w.com_height]),
                    velocity: DVector::from_column_slice(&[dx, 0.0]),
                    acceleration: DVector::from_column_slice(&[ddx, 0.0]),
                }
            }
        }
    }

    pub fn tasks_at(&self, tuning: &TaskTuning, t: f64) -> Vec<TaskSpec> {
        let mut tasks = vec![
            tuning.com(self.com_reference(t)),
            tuning.posture(posture_reference(self.initial_q())),
        ];
        if let Plan::Walk(w) = self {
            if let Some((side, reference)) = w.swing_reference(t) {
                tasks.push(tuning.swing(side.sole(), reference));
            }
        }
        tasks
    }

    pub fn switch_times(&self) -> Vec<f64> {
        match self {
            Plan::Balance(_) => Vec::new(),
            Plan::Walk(w) => w.switch_times(),
        }
    }

    pub fn horizon(&self) -> Option<f64> {
        match self {
            Plan::Balance(_) => None,
            Plan::Walk(w) => Some(w.horizon),
        }
    }

    /// Contacts on which the constraint violation is reported: the left foot
    /// while balancing, the planned support while walking.
    pub fn monitored_contacts(&self, model: &RobotModel, t: f64) -> ContactSet {
        match self {
            Plan::Balance(_) => foot_contacts(model, &[Side::Left]),
            Plan::Walk(w) => w.contacts_at(t).clone(),
        }
    }
}
