//! Task-space inverse dynamics: turns tasks, contacts and limits into a
//! least-squares QP over `y = (q̈, f)` and rebuilds its right-hand side from a
//! fresh state without touching any matrix factorization.
//!
//! Forces are stacked as (x, z) per contact in [`ContactSet`] order. Task
//! rows are scaled by `√ω` so that a task with weight `ω` contributes
//! `ω‖J q̈ + J̇ q̇ − s̈*‖²` to twice the objective.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qpsolver::{ActiveSet, ConstraintId, LeastSquaresQp, QpError};
use crate::rbd::{self, ContactSet, FrameRef, RbdError, RobotModel, RobotState, BASE_DOF};

#[derive(Debug, Error)]
pub enum TsidError {
    #[error(transparent)]
    Rbd(#[from] RbdError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("at least one task is required")]
    NoTasks,
    #[error("invalid task {index}: {reason}")]
    InvalidTask { index: usize, reason: String },
    #[error("active set belongs to contact mode {active:#x}, current mode is {current:#x}")]
    ModeMismatch { active: u32, current: u32 },
    #[error("constraint {0:?} does not exist in the current problem")]
    UnknownConstraint(ConstraintId),
    #[error("decision vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TsidError>;

/// Weight on `‖f‖²` keeping the task level full rank under redundant contacts.
pub const FORCE_REGULARIZATION: f64 = 1e-6;

const DYNAMICS_BASE: u32 = 0;
const CONTACT_BASE: u32 = 100;
const FRICTION_BASE: u32 = 200;
const TORQUE_BASE: u32 = 300;

/// Row of the unactuated dynamics (`axis` in 0..3).
pub fn dynamics_row(axis: usize) -> ConstraintId {
    ConstraintId(DYNAMICS_BASE + axis as u32)
}

/// Acceleration constraint of contact `frame` along `axis` (0 = x, 1 = z).
pub fn contact_row(frame: usize, axis: usize) -> ConstraintId {
    ConstraintId(CONTACT_BASE + 2 * frame as u32 + axis as u32)
}

/// Friction cone edge of contact `frame` (`side` 0: +f_x, 1: −f_x).
pub fn friction_row(frame: usize, side: usize) -> ConstraintId {
    ConstraintId(FRICTION_BASE + 2 * frame as u32 + side as u32)
}

/// Torque bound of `joint` (`bound` 0: upper, 1: lower).
pub fn torque_row(joint: usize, bound: usize) -> ConstraintId {
    ConstraintId(TORQUE_BASE + 2 * joint as u32 + bound as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    /// Center of mass (x, z).
    ComTracking,
    /// Base pitch followed by all joint angles.
    Posture,
    /// Position (x, z) and absolute angle of the link carrying `frame`.
    FrameTracking { frame: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Gains {
    /// Critically damped PD gains.
    pub fn critical(kp: f64) -> Self {
        Self { kp, kd: 2.0 * kp.sqrt() }
    }
}

/// Task-space reference sampled at the current control instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskReference {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
    pub acceleration: DVector<f64>,
}

impl TaskReference {
    pub fn hold(position: DVector<f64>) -> Self {
        let n = position.len();
        Self {
            position,
            velocity: DVector::zeros(n),
            acceleration: DVector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub weight: f64,
    pub gains: Gains,
    pub reference: TaskReference,
}

impl TaskSpec {
    pub fn dim(&self, model: &RobotModel) -> usize {
        match self.kind {
            TaskKind::ComTracking => 2,
            TaskKind::Posture => model.nv() - 2,
            TaskKind::FrameTracking { .. } => 3,
        }
    }

    fn validate(&self, model: &RobotModel, index: usize) -> Result<()> {
        let bad = |reason: String| Err(TsidError::InvalidTask { index, reason });
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return bad(format!("weight must be positive, got {}", self.weight));
        }
        if !(self.gains.kp >= 0.0 && self.gains.kd >= 0.0) {
            return bad("gains must be non-negative".into());
        }
        let dim = self.dim(model);
        let r = &self.reference;
        for (what, v) in [("position", &r.position), ("velocity", &r.velocity), ("acceleration", &r.acceleration)] {
            if v.len() != dim {
                return bad(format!("reference {what} has length {}, expected {dim}", v.len()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return bad(format!("reference {what} is not finite"));
            }
        }
        if let TaskKind::FrameTracking { frame } = &self.kind {
            model.frame_index(frame)?;
        }
        Ok(())
    }
}

/// Kinematic quantities of one task at a state.
struct TaskKinematics {
    jacobian: DMatrix<f64>,
    drift: DVector<f64>,
    position: DVector<f64>,
}

fn task_kinematics(model: &RobotModel, state: &RobotState, task: &TaskSpec) -> Result<TaskKinematics> {
    let q = &state.q;
    Ok(match &task.kind {
        TaskKind::ComTracking => {
            let c = rbd::com_position(model, q)?;
            let d = rbd::com_drift(model, state)?;
            TaskKinematics {
                jacobian: rbd::com_jacobian(model, q)?,
                drift: DVector::from_column_slice(&[d.x, d.y]),
                position: DVector::from_column_slice(&[c.x, c.y]),
            }
        }
        TaskKind::Posture => {
            let dim = model.nv() - 2;
            let mut jacobian = DMatrix::zeros(dim, model.nv());
            for i in 0..dim {
                jacobian[(i, 2 + i)] = 1.0;
            }
            TaskKinematics {
                jacobian,
                drift: DVector::zeros(dim),
                position: q.rows(2, dim).into_owned(),
            }
        }
        TaskKind::FrameTracking { frame } => {
            let f = FrameRef::resolve(model, frame)?;
            let link = f.link(model);
            let p = rbd::frame_position(model, q, f)?;
            let d = rbd::jacobian_drift(model, state, f)?;
            let ang = rbd::link_angle_jacobian(model, link);
            let angle = (ang.row(0) * q)[0];
            let mut jacobian = DMatrix::zeros(3, model.nv());
            jacobian.rows_mut(0, 2).copy_from(&rbd::frame_jacobian(model, q, f)?);
            jacobian.row_mut(2).copy_from(&ang.row(0));
            TaskKinematics {
                jacobian,
                drift: DVector::from_column_slice(&[d.x, d.y, 0.0]),
                position: DVector::from_column_slice(&[p.x, p.y, angle]),
            }
        }
    })
}

/// PD-plus-feedforward target `s̈* = s̈_ref + Kd(ṡ_ref − ṡ) + Kp(s_ref − s)`.
pub fn task_acceleration_target(
    task: &TaskSpec,
    position: &DVector<f64>,
    velocity: &DVector<f64>,
) -> DVector<f64> {
    let r = &task.reference;
    &r.acceleration + (&r.velocity - velocity) * task.gains.kd + (&r.position - position) * task.gains.kp
}

/// Weighted target rows `√ω (s̈* − J̇ q̇)` for one task.
fn task_rhs(task: &TaskSpec, kin: &TaskKinematics, v: &DVector<f64>) -> DVector<f64> {
    let velocity = &kin.jacobian * v;
    let target = task_acceleration_target(task, &kin.position, &velocity);
    (target - &kin.drift) * task.weight.sqrt()
}

/// Torque and friction limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    /// Symmetric torque bound per joint; infinite entries add no rows.
    pub torque: DVector<f64>,
    pub friction_coeff: f64,
}

impl Limits {
    pub fn from_model(model: &RobotModel) -> Self {
        Self {
            torque: model.torque_limits(),
            friction_coeff: model.friction_coeff,
        }
    }

    pub fn unlimited(model: &RobotModel) -> Self {
        Self {
            torque: DVector::from_element(model.nj(), f64::INFINITY),
            friction_coeff: f64::INFINITY,
        }
    }
}

/// State-dependent right-hand sides, shared by the full build and the
/// fast feedback path so both produce bitwise identical values.
struct RhsTerms {
    bias: DVector<f64>,
    contact_drift: DVector<f64>,
}

impl RhsTerms {
    fn compute(model: &RobotModel, state: &RobotState, contacts: &ContactSet) -> Result<Self> {
        Ok(Self {
            bias: rbd::bias_forces(model, state)?,
            contact_drift: rbd::contact_drift_rigid(model, state, contacts)?,
        })
    }

    fn dynamics(&self, axis: usize) -> f64 {
        -self.bias[axis]
    }

    fn contact(&self, index: usize, axis: usize) -> f64 {
        -self.contact_drift[2 * index + axis]
    }

    fn torque(&self, limits: &Limits, joint: usize, bound: usize) -> f64 {
        let h = self.bias[BASE_DOF + joint];
        if bound == 0 {
            limits.torque[joint] - h
        } else {
            limits.torque[joint] + h
        }
    }
}

/// Rows of one task inside the task level.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBlock {
    pub kind: TaskKind,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub qp: LeastSquaresQp,
    pub contacts: ContactSet,
    pub nv: usize,
    pub task_blocks: Vec<TaskBlock>,
}

/// Stacked system `[Ā; C] y ≈ [b̄; d]`; rows before `boundary` are the
/// active constraint rows.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub boundary: usize,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.qp.n()
    }

    pub fn mode_id(&self) -> u32 {
        self.qp.mode_id
    }

    pub fn stacked(&self, active: &ActiveSet) -> Result<StackedSystem> {
        let m = active.len();
        let p = self.qp.task_matrix.nrows();
        let n = self.n();
        let mut matrix = DMatrix::zeros(m + p, n);
        for (i, id) in active.rows.iter().enumerate() {
            let k = self.row_index(*id).ok_or(TsidError::UnknownConstraint(*id))?;
            matrix.row_mut(i).copy_from(&self.qp.row_vec(k).transpose());
        }
        matrix.rows_mut(m, p).copy_from(&self.qp.task_matrix);
        let rhs = self.qp.stacked_rhs(active).map_err(|_| TsidError::UnknownConstraint(active.rows[0]))?;
        Ok(StackedSystem { matrix, rhs, boundary: m })
    }

    fn row_index(&self, id: ConstraintId) -> Option<usize> {
        (0..self.qp.n_rows()).find(|&k| self.qp.id(k) == id)
    }
}

fn check_tasks(model: &RobotModel, tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(TsidError::NoTasks);
    }
    for (i, t) in tasks.iter().enumerate() {
        t.validate(model, i)?;
    }
    Ok(())
}

fn task_level_rows(model: &RobotModel, tasks: &[TaskSpec]) -> usize {
    tasks.iter().map(|t| t.dim(model)).sum()
}

/// Builds the QP for the current state.
pub fn build_problem(
    model: &RobotModel,
    state: &RobotState,
    tasks: &[TaskSpec],
    contacts: &ContactSet,
    limits: &Limits,
) -> Result<QpProblem> {
    model.check_state(state)?;
    contacts.validate(model)?;
    check_tasks(model, tasks)?;
    let nv = model.nv();
    let nc = contacts.len();
    let n = nv + 2 * nc;
    let terms = RhsTerms::compute(model, state, contacts)?;
    let mass = rbd::mass_matrix(model, &state.q)?;
    let jc = rbd::contact_jacobian(model, &state.q, contacts)?;

    // Task level.
    let pt = task_level_rows(model, tasks);
    let p = pt + 2 * nc;
    let mut c = DMatrix::zeros(p, n);
    let mut d = DVector::zeros(p);
    let mut blocks = Vec::with_capacity(tasks.len());
    let mut row = 0;
    for task in tasks {
        let kin = task_kinematics(model, state, task)?;
        let dim = kin.jacobian.nrows();
        let w = task.weight.sqrt();
        c.view_mut((row, 0), (dim, nv)).copy_from(&(&kin.jacobian * w));
        d.rows_mut(row, dim).copy_from(&task_rhs(task, &kin, &state.v));
        blocks.push(TaskBlock {
            kind: task.kind.clone(),
            rows: row..row + dim,
        });
        row += dim;
    }
    let reg = FORCE_REGULARIZATION.sqrt();
    for i in 0..2 * nc {
        c[(pt + i, nv + i)] = reg;
    }

    // Equalities: unactuated dynamics, then contact accelerations.
    let me = BASE_DOF + 2 * nc;
    let mut e = DMatrix::zeros(me, n);
    let mut e_rhs = DVector::zeros(me);
    let mut e_ids = Vec::with_capacity(me);
    for axis in 0..BASE_DOF {
        e.view_mut((axis, 0), (1, nv)).copy_from(&mass.row(axis));
        e.view_mut((axis, nv), (1, 2 * nc)).copy_from(&(-jc.column(axis).transpose()));
        e_rhs[axis] = terms.dynamics(axis);
        e_ids.push(dynamics_row(axis));
    }
    for (i, contact) in contacts.contacts().iter().enumerate() {
        for axis in 0..2 {
            let r = BASE_DOF + 2 * i + axis;
            e.view_mut((r, 0), (1, nv)).copy_from(&jc.row(2 * i + axis));
            e_rhs[r] = terms.contact(i, axis);
            e_ids.push(contact_row(contact.frame, axis));
        }
    }

    // Inequalities: friction edges, then torque bounds.
    let mut g_rows: Vec<DVector<f64>> = Vec::new();
    let mut h = Vec::new();
    let mut g_ids = Vec::new();
    if limits.friction_coeff.is_finite() {
        for (i, contact) in contacts.contacts().iter().enumerate() {
            if !contact.friction_cone {
                continue;
            }
            for side in 0..2 {
                let mut g = DVector::zeros(n);
                g[nv + 2 * i] = if side == 0 { 1.0 } else { -1.0 };
                g[nv + 2 * i + 1] = -limits.friction_coeff;
                g_rows.push(g);
                h.push(0.0);
                g_ids.push(friction_row(contact.frame, side));
            }
        }
    }
    for j in 0..model.nj() {
        if !limits.torque[j].is_finite() {
            continue;
        }
        let mut tau_row = DVector::zeros(n);
        tau_row
            .rows_mut(0, nv)
            .copy_from(&mass.row(BASE_DOF + j).transpose());
        tau_row
            .rows_mut(nv, 2 * nc)
            .copy_from(&(-jc.column(BASE_DOF + j)));
        for bound in 0..2 {
            let sign = if bound == 0 { 1.0 } else { -1.0 };
            g_rows.push(&tau_row * sign);
            h.push(terms.torque(limits, j, bound));
            g_ids.push(torque_row(j, bound));
        }
    }
    let mut g = DMatrix::zeros(g_rows.len(), n);
    for (i, r) in g_rows.iter().enumerate() {
        g.row_mut(i).copy_from(&r.transpose());
    }

    let mut qp = LeastSquaresQp::new(c, d)
        .with_equalities(e, e_rhs)
        .with_inequalities(g, DVector::from_vec(h));
    qp.eq_ids = e_ids;
    qp.ineq_ids = g_ids;
    qp.mode_id = contacts.mode_id();
    Ok(QpProblem {
        qp,
        contacts: contacts.clone(),
        nv,
        task_blocks: blocks,
    })
}

/// Stacked right-hand side `[b̄; d]` for `active` at the current state.
/// Costs a few kinematic recursions and no factorization.
pub fn build_b(
    model: &RobotModel,
    state: &RobotState,
    tasks: &[TaskSpec],
    contacts: &ContactSet,
    limits: &Limits,
    active: &ActiveSet,
) -> Result<DVector<f64>> {
    if active.contact_mode_id != contacts.mode_id() {
        return Err(TsidError::ModeMismatch {
            active: active.contact_mode_id,
            current: contacts.mode_id(),
        });
    }
    model.check_state(state)?;
    check_tasks(model, tasks)?;
    let nc = contacts.len();
    let terms = RhsTerms::compute(model, state, contacts)?;
    let m = active.len();
    let pt = task_level_rows(model, tasks);
    let mut b = DVector::zeros(m + pt + 2 * nc);
    for (slot, id) in active.rows.iter().enumerate() {
        b[slot] = constraint_rhs(model, contacts, limits, &terms, *id).ok_or(TsidError::UnknownConstraint(*id))?;
    }
    let mut row = m;
    for task in tasks {
        let kin = task_kinematics(model, state, task)?;
        let dim = kin.jacobian.nrows();
        b.rows_mut(row, dim).copy_from(&task_rhs(task, &kin, &state.v));
        row += dim;
    }
    Ok(b)
}

fn constraint_rhs(model: &RobotModel, contacts: &ContactSet, limits: &Limits, terms: &RhsTerms, id: ConstraintId) -> Option<f64> {
    let raw = id.0;
    let index_of = |frame: usize| contacts.contacts().iter().position(|c| c.frame == frame);
    match raw {
        r if r < CONTACT_BASE => {
            let axis = (r - DYNAMICS_BASE) as usize;
            (axis < BASE_DOF).then(|| terms.dynamics(axis))
        }
        r if r < FRICTION_BASE => {
            let k = (r - CONTACT_BASE) as usize;
            index_of(k / 2).map(|i| terms.contact(i, k % 2))
        }
        r if r < TORQUE_BASE => {
            let k = (r - FRICTION_BASE) as usize;
            let ok = limits.friction_coeff.is_finite()
                && contacts.contacts().iter().any(|c| c.frame == k / 2 && c.friction_cone);
            ok.then_some(0.0)
        }
        r => {
            let k = (r - TORQUE_BASE) as usize;
            let joint = k / 2;
            (joint < model.nj() && limits.torque[joint].is_finite()).then(|| terms.torque(limits, joint, k % 2))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorqueCommand {
    pub tau: DVector<f64>,
    /// True if any joint had to be clamped.
    pub saturated: bool,
}

/// Joint torques realizing `y` through the rigid-body dynamics at `state`,
/// clamped to the torque limits.
pub fn extract_torque(
    model: &RobotModel,
    state: &RobotState,
    contacts: &ContactSet,
    y: &DVector<f64>,
    limits: &Limits,
) -> Result<TorqueCommand> {
    let nv = model.nv();
    let n = nv + 2 * contacts.len();
    if y.len() != n {
        return Err(TsidError::Dimension { expected: n, got: y.len() });
    }
    let mass = rbd::mass_matrix(model, &state.q)?;
    let bias = rbd::bias_forces(model, state)?;
    let mut gen = mass * y.rows(0, nv) + bias;
    if !contacts.is_empty() {
        let jc = rbd::contact_jacobian(model, &state.q, contacts)?;
        gen -= jc.tr_mul(&y.rows(nv, 2 * contacts.len()));
    }
    let mut tau = gen.rows(BASE_DOF, model.nj()).into_owned();
    let mut saturated = false;
    for (t, lim) in tau.iter_mut().zip(limits.torque.iter()) {
        let c = t.clamp(-lim, *lim);
        saturated |= c != *t;
        *t = c;
    }
    Ok(TorqueCommand { tau, saturated })
}

/// Default gains and weights of the balancing and walking tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskTuning {
    pub com_kp: f64,
    pub com_weight: f64,
    pub posture_kp: f64,
    pub posture_weight: f64,
    pub swing_kp: f64,
    pub swing_weight: f64,
}

impl Default for TaskTuning {
    fn default() -> Self {
        Self {
            com_kp: 100.0,
            com_weight: 1.0,
            posture_kp: 10.0,
            posture_weight: 1e-2,
            swing_kp: 200.0,
            swing_weight: 1.0,
        }
    }
}

impl TaskTuning {
    pub fn com(&self, reference: TaskReference) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::ComTracking,
            weight: self.com_weight,
            gains: Gains::critical(self.com_kp),
            reference,
        }
    }

    pub fn posture(&self, reference: TaskReference) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Posture,
            weight: self.posture_weight,
            gains: Gains::critical(self.posture_kp),
            reference,
        }
    }

    pub fn swing(&self, frame: &str, reference: TaskReference) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::FrameTracking { frame: frame.into() },
            weight: self.swing_weight,
            gains: Gains::critical(self.swing_kp),
            reference,
        }
    }
}

/// Nominal posture reference (pitch and joints) taken from `q`.
pub fn posture_reference(q: &DVector<f64>) -> TaskReference {
    TaskReference::hold(q.rows(2, q.len() - 2).into_owned())
}
