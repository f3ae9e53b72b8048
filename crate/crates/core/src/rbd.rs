//! Planar floating-base rigid-body dynamics.
//!
//! Generalized coordinates are `q = (x, z, pitch, joint angles...)` where the
//! first three describe the pose of the base link (link 0) in the sagittal
//! plane. Vectors are `(x, z)` pairs stored as `Vector2`; positive angles
//! rotate `x` towards `z`.
//!
//! The mass matrix is assembled from link Jacobians while bias forces and
//! inverse dynamics come from a recursive Newton-Euler pass, so the two routes
//! can be checked against each other.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Schema tag of the robot model file.
pub const MODEL_SCHEMA: &str = "rbd-model/1";

/// Number of base coordinates (x, z, pitch).
pub const BASE_DOF: usize = 3;

#[derive(Debug, Error)]
pub enum RbdError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("mass matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("contact system is singular")]
    SingularContact,
    #[error("inverse kinematics did not converge (residual {0:.3e})")]
    IkFailed(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, RbdError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    /// kg
    pub mass: f64,
    /// Rotational inertia about the link CoM, kg·m².
    pub inertia: f64,
    /// CoM in the link frame, m.
    pub com_offset: [f64; 2],
    pub length: f64,
}

/// Revolute joint `j` drives link `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    pub parent: usize,
    /// Joint location in the parent link frame, m.
    pub origin: [f64; 2],
    pub position_limits: [f64; 2],
    /// Symmetric bound |τ| ≤ torque_limit, N·m.
    pub torque_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactFrame {
    pub name: String,
    pub link: usize,
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub schema: String,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    pub contact_frames: Vec<ContactFrame>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 2],
    #[serde(default = "default_friction")]
    pub friction_coeff: f64,
}

fn default_gravity() -> [f64; 2] {
    [0.0, -9.81]
}

fn default_friction() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
}

impl RobotState {
    pub fn new(q: DVector<f64>, v: DVector<f64>, t: f64) -> Self {
        Self { q, v, t }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            v: DVector::zeros(n),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

/// One active contact point. Rigid contacts impose `J q̈ + J̇ q̇ = 0` on both
/// planar axes; the flags say whether the normal force must stay
/// non-negative and the tangential force inside the friction cone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Contact {
    pub frame: usize,
    pub unilateral: bool,
    pub friction_cone: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactSet {
    contacts: Vec<Contact>,
}

impl ContactSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Rigid, unilateral, friction-limited contacts on the given frames.
    pub fn from_frames(frames: impl IntoIterator<Item = usize>) -> Self {
        let mut contacts: Vec<Contact> = frames
            .into_iter()
            .map(|frame| Contact {
                frame,
                unilateral: true,
                friction_cone: true,
            })
            .collect();
        contacts.sort_by_key(|c| c.frame);
        contacts.dedup_by_key(|c| c.frame);
        Self { contacts }
    }

    pub fn from_names(model: &RobotModel, names: &[&str]) -> Result<Self> {
        let frames = names
            .iter()
            .map(|n| model.frame_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_frames(frames))
    }

    /// Inverse of [`ContactSet::mode_id`].
    pub fn from_mode_id(mode: u32) -> Self {
        Self::from_frames((0..32).filter(|i| mode & (1 << i) != 0))
    }

    pub fn contacts(&self) -> &[Contact] {
        &self.contacts
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.contacts.iter().map(|c| c.frame)
    }

    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.contacts.iter().any(|c| c.frame == frame)
    }

    /// Bitmask over contact frame indices; identifies the contact mode.
    pub fn mode_id(&self) -> u32 {
        self.contacts.iter().fold(0u32, |m, c| m | (1 << c.frame))
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        match self
            .contacts
            .iter()
            .find(|c| c.frame >= model.contact_frames.len())
        {
            Some(c) => Err(RbdError::UnknownFrame(format!("#{}", c.frame))),
            None => Ok(()),
        }
    }
}

#[inline]
pub fn rot(theta: f64, v: Vec2) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Quarter-turn: derivative of `rot(θ)v` with respect to θ is `perp(rot(θ)v)`.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// Planar cross product `a × b`.
#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn vec2(a: [f64; 2]) -> Vec2 {
    Vec2::new(a[0], a[1])
}

/// Absolute link angles and frame origins for a configuration.
#[derive(Debug, Clone)]
pub struct Placement {
    pub theta: Vec<f64>,
    pub origin: Vec<Vec2>,
}

impl RobotModel {
    pub fn nj(&self) -> usize {
        self.joints.len()
    }

    pub fn nv(&self) -> usize {
        BASE_DOF + self.joints.len()
    }

    pub fn nlinks(&self) -> usize {
        self.links.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub fn weight(&self) -> f64 {
        self.total_mass() * vec2(self.gravity).norm()
    }

    pub fn gravity_vec(&self) -> Vec2 {
        vec2(self.gravity)
    }

    pub fn parent_link(&self, link: usize) -> Option<usize> {
        (link > 0).then(|| self.joints[link - 1].parent)
    }

    /// Whether `ancestor` lies on the path from the base to `link` (inclusive).
    pub fn supports(&self, ancestor: usize, link: usize) -> bool {
        let mut k = Some(link);
        while let Some(l) = k {
            if l == ancestor {
                return true;
            }
            k = self.parent_link(l);
        }
        false
    }

    pub fn frame_index(&self, name: &str) -> Result<usize> {
        self.contact_frames
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| RbdError::UnknownFrame(name.to_string()))
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn torque_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.nj(), self.joints.iter().map(|j| j.torque_limit))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RbdError::InvalidModel(m));
        if self.schema != MODEL_SCHEMA {
            return bad(format!("schema `{}`, expected `{MODEL_SCHEMA}`", self.schema));
        }
        if self.links.len() != self.joints.len() + 1 {
            return bad(format!(
                "{} links need {} joints, got {}",
                self.links.len(),
                self.links.len().saturating_sub(1),
                self.joints.len()
            ));
        }
        for l in &self.links {
            if !(l.mass > 0.0) || !(l.inertia > 0.0) {
                return bad(format!("link `{}` needs positive mass and inertia", l.name));
            }
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if joint.parent > j {
                return bad(format!(
                    "joint `{}` has parent {} which does not precede link {}",
                    joint.name,
                    joint.parent,
                    j + 1
                ));
            }
            if !(joint.torque_limit > 0.0) {
                return bad(format!("joint `{}` needs a positive torque limit", joint.name));
            }
        }
        if !(self.friction_coeff > 0.0) {
            return bad("friction coefficient must be positive".into());
        }
        if self.contact_frames.len() < 2 {
            return bad("at least two contact frames are required".into());
        }
        if let Some(f) = self
            .contact_frames
            .iter()
            .find(|f| f.link >= self.links.len())
        {
            return bad(format!("contact frame `{}` on missing link", f.name));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let model: RobotModel =
            serde_path_to_error::deserialize(de).map_err(|e| RbdError::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.nv() {
            return Err(RbdError::Dimension {
                what: "q",
                expected: self.nv(),
                got: q.len(),
            });
        }
        if !q.iter().all(|x| x.is_finite()) {
            return Err(RbdError::NonFinite("configuration"));
        }
        Ok(())
    }

    pub fn check_state(&self, state: &RobotState) -> Result<()> {
        self.check_q(&state.q)?;
        if state.v.len() != self.nv() {
            return Err(RbdError::Dimension {
                what: "v",
                expected: self.nv(),
                got: state.v.len(),
            });
        }
        if !state.is_finite() {
            return Err(RbdError::NonFinite("state"));
        }
        Ok(())
    }

    /// Seven-link planar biped: torso, thighs, shanks and feet with heel, toe
    /// and sole contact points on each foot.
    pub fn biped() -> Self {
        let link = |name: &str, mass, inertia, com: [f64; 2], length| LinkSpec {
            name: name.into(),
            mass,
            inertia,
            com_offset: com,
            length,
        };
        let joint = |name: &str, parent, origin: [f64; 2], lim: [f64; 2], tau| JointSpec {
            name: name.into(),
            parent,
            origin,
            position_limits: lim,
            torque_limit: tau,
        };
        let frame = |name: &str, link, offset: [f64; 2]| ContactFrame {
            name: name.into(),
            link,
            offset,
        };
        let (thigh, shank) = (0.42, 0.42);
        RobotModel {
            schema: MODEL_SCHEMA.into(),
            links: vec![
                link("torso", 30.0, 1.5, [0.0, 0.25], 0.6),
                link("l_thigh", 7.0, 0.12, [0.0, -0.21], thigh),
                link("l_shank", 3.5, 0.05, [0.0, -0.21], shank),
                link("l_foot", 1.0, 0.005, [0.04, -0.05], 0.22),
                link("r_thigh", 7.0, 0.12, [0.0, -0.21], thigh),
                link("r_shank", 3.5, 0.05, [0.0, -0.21], shank),
                link("r_foot", 1.0, 0.005, [0.04, -0.05], 0.22),
            ],
            joints: vec![
                joint("l_hip", 0, [0.0, 0.0], [-1.5, 1.5], 200.0),
                joint("l_knee", 1, [0.0, -thigh], [-2.4, 0.05], 200.0),
                joint("l_ankle", 2, [0.0, -shank], [-0.8, 0.8], 120.0),
                joint("r_hip", 0, [0.0, 0.0], [-1.5, 1.5], 200.0),
                joint("r_knee", 4, [0.0, -thigh], [-2.4, 0.05], 200.0),
                joint("r_ankle", 5, [0.0, -shank], [-0.8, 0.8], 120.0),
            ],
            contact_frames: vec![
                frame("l_heel", 3, [-0.07, -0.08]),
                frame("l_toe", 3, [0.15, -0.08]),
                frame("r_heel", 6, [-0.07, -0.08]),
                frame("r_toe", 6, [0.15, -0.08]),
                frame("l_sole", 3, [0.0, -0.08]),
                frame("r_sole", 6, [0.0, -0.08]),
            ],
            gravity: default_gravity(),
            friction_coeff: default_friction(),
        }
    }
}

/// Link angles and frame origins.
pub fn placement(model: &RobotModel, q: &DVector<f64>) -> Placement {
    let nl = model.nlinks();
    let mut theta = vec![0.0; nl];
    let mut origin = vec![Vec2::zeros(); nl];
    theta[0] = q[2];
    origin[0] = Vec2::new(q[0], q[1]);
    for (j, joint) in model.joints.iter().enumerate() {
        let (k, p) = (j + 1, joint.parent);
        theta[k] = theta[p] + q[BASE_DOF + j];
        origin[k] = origin[p] + rot(theta[p], vec2(joint.origin));
    }
    Placement { theta, origin }
}

/// Absolute angular velocity of every link.
pub fn link_rates(model: &RobotModel, v: &DVector<f64>) -> Vec<f64> {
    let mut omega = vec![0.0; model.nlinks()];
    omega[0] = v[2];
    for (j, joint) in model.joints.iter().enumerate() {
        omega[j + 1] = omega[joint.parent] + v[BASE_DOF + j];
    }
    omega
}

fn point_world(pl: &Placement, link: usize, offset: Vec2) -> Vec2 {
    pl.origin[link] + rot(pl.theta[link], offset)
}

/// 2 × nv Jacobian of a point fixed on `link`.
fn point_jacobian(model: &RobotModel, pl: &Placement, link: usize, offset: Vec2) -> DMatrix<f64> {
    let p = point_world(pl, link, offset);
    let mut jac = DMatrix::zeros(2, model.nv());
    jac[(0, 0)] = 1.0;
    jac[(1, 1)] = 1.0;
    let col = perp(p - pl.origin[0]);
    jac[(0, 2)] = col.x;
    jac[(1, 2)] = col.y;
    let mut k = link;
    while k > 0 {
        let col = perp(p - pl.origin[k]);
        jac[(0, BASE_DOF + k - 1)] = col.x;
        jac[(1, BASE_DOF + k - 1)] = col.y;
        k = model.joints[k - 1].parent;
    }
    jac
}

/// `J̇ q̇` for a point fixed on `link`: every segment of the chain rotates
/// with its own link rate and contributes a centripetal term.
fn point_drift(model: &RobotModel, pl: &Placement, omega: &[f64], link: usize, offset: Vec2) -> Vec2 {
    let mut acc = -omega[link].powi(2) * rot(pl.theta[link], offset);
    let mut k = link;
    while k > 0 {
        let joint = &model.joints[k - 1];
        let p = joint.parent;
        acc -= omega[p].powi(2) * rot(pl.theta[p], vec2(joint.origin));
        k = p;
    }
    acc
}

/// Row vector (1 × nv) mapping q̇ to the absolute angular rate of `link`.
pub fn link_angle_jacobian(model: &RobotModel, link: usize) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(1, model.nv());
    jac[(0, 2)] = 1.0;
    let mut k = link;
    while k > 0 {
        jac[(0, BASE_DOF + k - 1)] = 1.0;
        k = model.joints[k - 1].parent;
    }
    jac
}

/// Frames addressable by name: `"base"` or any contact frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRef {
    Base,
    Contact(usize),
}

impl FrameRef {
    pub fn resolve(model: &RobotModel, name: &str) -> Result<Self> {
        if name == "base" {
            Ok(FrameRef::Base)
        } else {
            model.frame_index(name).map(FrameRef::Contact)
        }
    }

    fn anchor(self, model: &RobotModel) -> (usize, Vec2) {
        match self {
            FrameRef::Base => (0, Vec2::zeros()),
            FrameRef::Contact(i) => {
                let f = &model.contact_frames[i];
                (f.link, vec2(f.offset))
            }
        }
    }

    pub fn link(self, model: &RobotModel) -> usize {
        self.anchor(model).0
    }
}

pub fn frame_position(model: &RobotModel, q: &DVector<f64>, frame: FrameRef) -> Result<Vec2> {
    model.check_q(q)?;
    let (link, off) = frame.anchor(model);
    Ok(point_world(&placement(model, q), link, off))
}

pub fn frame_jacobian(model: &RobotModel, q: &DVector<f64>, frame: FrameRef) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let (link, off) = frame.anchor(model);
    Ok(point_jacobian(model, &placement(model, q), link, off))
}

pub fn jacobian_drift(model: &RobotModel, state: &RobotState, frame: FrameRef) -> Result<Vec2> {
    model.check_state(state)?;
    let (link, off) = frame.anchor(model);
    let pl = placement(model, &state.q);
    Ok(point_drift(model, &pl, &link_rates(model, &state.v), link, off))
}

/// Name-based convenience wrapper around [`frame_jacobian`].
pub fn frame_jacobian_by_name(model: &RobotModel, q: &DVector<f64>, name: &str) -> Result<DMatrix<f64>> {
    frame_jacobian(model, q, FrameRef::resolve(model, name)?)
}

pub fn com_position(model: &RobotModel, q: &DVector<f64>) -> Result<Vec2> {
    model.check_q(q)?;
    let pl = placement(model, q);
    let weighted = model
        .links
        .iter()
        .enumerate()
        .fold(Vec2::zeros(), |acc, (k, l)| {
            acc + l.mass * point_world(&pl, k, vec2(l.com_offset))
        });
    Ok(weighted / model.total_mass())
}

pub fn com_jacobian(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let pl = placement(model, q);
    let mut jac = DMatrix::zeros(2, model.nv());
    for (k, l) in model.links.iter().enumerate() {
        jac += l.mass * point_jacobian(model, &pl, k, vec2(l.com_offset));
    }
    Ok(jac / model.total_mass())
}

pub fn com_drift(model: &RobotModel, state: &RobotState) -> Result<Vec2> {
    model.check_state(state)?;
    let pl = placement(model, &state.q);
    let omega = link_rates(model, &state.v);
    let weighted = model
        .links
        .iter()
        .enumerate()
        .fold(Vec2::zeros(), |acc, (k, l)| {
            acc + l.mass * point_drift(model, &pl, &omega, k, vec2(l.com_offset))
        });
    Ok(weighted / model.total_mass())
}

/// Generalized inertia matrix `M(q) = Σ m Jᵀ J + I J_θᵀ J_θ` over link CoMs.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let pl = placement(model, q);
    let nv = model.nv();
    let mut m = DMatrix::zeros(nv, nv);
    for (k, l) in model.links.iter().enumerate() {
        let jv = point_jacobian(model, &pl, k, vec2(l.com_offset));
        let jw = link_angle_jacobian(model, k);
        m += l.mass * jv.transpose() * &jv + l.inertia * jw.transpose() * &jw;
    }
    // Symmetrize away round-off so Cholesky sees an exactly symmetric matrix.
    let mt = m.transpose();
    Ok((m + mt) * 0.5)
}

/// Recursive Newton-Euler: generalized forces needed to produce `a` at
/// `(q, v)`. With `with_gravity == false` the gravity field is switched off.
pub fn inverse_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    with_gravity: bool,
) -> Result<DVector<f64>> {
    model.check_q(q)?;
    for (what, x) in [("v", v), ("a", a)] {
        if x.len() != model.nv() {
            return Err(RbdError::Dimension {
                what,
                expected: model.nv(),
                got: x.len(),
            });
        }
        if !x.iter().all(|e| e.is_finite()) {
            return Err(RbdError::NonFinite(what));
        }
    }
    let nl = model.nlinks();
    let g = if with_gravity { model.gravity_vec() } else { Vec2::zeros() };
    let pl = placement(model, q);
    let mut omega = vec![0.0; nl];
    let mut alpha = vec![0.0; nl];
    let mut acc_origin = vec![Vec2::zeros(); nl];
    omega[0] = v[2];
    alpha[0] = a[2];
    acc_origin[0] = Vec2::new(a[0], a[1]);
    for (j, joint) in model.joints.iter().enumerate() {
        let (k, p) = (j + 1, joint.parent);
        let seg = rot(pl.theta[p], vec2(joint.origin));
        omega[k] = omega[p] + v[BASE_DOF + j];
        alpha[k] = alpha[p] + a[BASE_DOF + j];
        acc_origin[k] = acc_origin[p] + alpha[p] * perp(seg) - omega[p].powi(2) * seg;
    }

    // Force and moment (about the link origin) the parent applies to each subtree.
    let mut force = vec![Vec2::zeros(); nl];
    let mut moment = vec![0.0; nl];
    for k in (0..nl).rev() {
        let l = &model.links[k];
        let d = rot(pl.theta[k], vec2(l.com_offset));
        let acc_com = acc_origin[k] + alpha[k] * perp(d) - omega[k].powi(2) * d;
        let f = l.mass * (acc_com - g);
        force[k] += f;
        moment[k] += l.inertia * alpha[k] + cross(d, f);
        if k > 0 {
            let p = model.joints[k - 1].parent;
            let (fk, nk) = (force[k], moment[k]);
            force[p] += fk;
            moment[p] += nk + cross(pl.origin[k] - pl.origin[p], fk);
        }
    }

    let mut tau = DVector::zeros(model.nv());
    tau[0] = force[0].x;
    tau[1] = force[0].y;
    tau[2] = moment[0];
    for j in 0..model.nj() {
        tau[BASE_DOF + j] = moment[j + 1];
    }
    Ok(tau)
}

/// Coriolis, centrifugal and gravity terms `h(q, q̇)`.
pub fn bias_forces(model: &RobotModel, state: &RobotState) -> Result<DVector<f64>> {
    model.check_state(state)?;
    inverse_dynamics(model, &state.q, &state.v, &DVector::zeros(model.nv()), true)
}

pub fn kinetic_energy(model: &RobotModel, state: &RobotState) -> Result<f64> {
    let m = mass_matrix(model, &state.q)?;
    Ok(0.5 * state.v.dot(&(m * &state.v)))
}

pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> Result<f64> {
    let c = com_position(model, q)?;
    Ok(-model.total_mass() * model.gravity_vec().dot(&c))
}

/// Stacked contact Jacobian, two rows (x, z) per contact.
pub fn contact_jacobian(model: &RobotModel, q: &DVector<f64>, contacts: &ContactSet) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    contacts.validate(model)?;
    let pl = placement(model, q);
    let mut jc = DMatrix::zeros(2 * contacts.len(), model.nv());
    for (i, c) in contacts.contacts().iter().enumerate() {
        let f = &model.contact_frames[c.frame];
        jc.rows_mut(2 * i, 2)
            .copy_from(&point_jacobian(model, &pl, f.link, vec2(f.offset)));
    }
    Ok(jc)
}

pub fn contact_drift(model: &RobotModel, state: &RobotState, contacts: &ContactSet) -> Result<DVector<f64>> {
    model.check_state(state)?;
    contacts.validate(model)?;
    let pl = placement(model, &state.q);
    let omega = link_rates(model, &state.v);
    let mut d = DVector::zeros(2 * contacts.len());
    for (i, c) in contacts.contacts().iter().enumerate() {
        let f = &model.contact_frames[c.frame];
        let a = point_drift(model, &pl, &omega, f.link, vec2(f.offset));
        d[2 * i] = a.x;
        d[2 * i + 1] = a.y;
    }
    Ok(d)
}

/// Drift with each contact's own-link centripetal term removed, i.e. the
/// drift of the link origin. Rows of points on one link stay consistent
/// with their Jacobian dependence even when the link rotates, which matters
/// for noisy velocity estimates of a flat foot. Equals [`contact_drift`]
/// whenever the contact links are not rotating.
pub fn contact_drift_rigid(model: &RobotModel, state: &RobotState, contacts: &ContactSet) -> Result<DVector<f64>> {
    model.check_state(state)?;
    contacts.validate(model)?;
    let pl = placement(model, &state.q);
    let omega = link_rates(model, &state.v);
    let mut d = DVector::zeros(2 * contacts.len());
    for (i, c) in contacts.contacts().iter().enumerate() {
        let f = &model.contact_frames[c.frame];
        let a = point_drift(model, &pl, &omega, f.link, Vec2::zeros());
        d[2 * i] = a.x;
        d[2 * i + 1] = a.y;
    }
    Ok(d)
}

/// Tikhonov damping on the contact block of the plant solve.
pub const CONTACT_DAMPING: f64 = 1e-10;

/// Solves `Λ x = r` with `Λ + εI` and two refinement sweeps, so dependent but
/// consistent contact rows still end up satisfied to round-off.
fn damped_solve(lambda: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = lambda.nrows();
    let damped = lambda + DMatrix::identity(n, n) * CONTACT_DAMPING;
    let chol = damped.cholesky().ok_or(RbdError::SingularContact)?;
    let mut x = chol.solve(rhs);
    for _ in 0..2 {
        let r = rhs - lambda * &x;
        x += chol.solve(&r);
    }
    Ok(x)
}

/// Plant dynamics: solves `M q̈ + h = Sᵀτ + J_cᵀ f + ext` together with
/// `J_c q̈ + J̇_c q̇ = 0`. Returns `(q̈, f)` with `f` stacked as (x, z) per
/// contact.
pub fn constrained_forward_dynamics(
    model: &RobotModel,
    state: &RobotState,
    tau: &DVector<f64>,
    contacts: &ContactSet,
    external: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    model.check_state(state)?;
    if tau.len() != model.nj() {
        return Err(RbdError::Dimension {
            what: "tau",
            expected: model.nj(),
            got: tau.len(),
        });
    }
    if !tau.iter().all(|x| x.is_finite()) {
        return Err(RbdError::NonFinite("torque"));
    }
    let m = mass_matrix(model, &state.q)?;
    let h = bias_forces(model, state)?;
    let mut gen = -h;
    { let mut tail = gen.rows_mut(BASE_DOF, model.nj()); tail += tau; }
    if let Some(ext) = external {
        gen += ext;
    }
    let chol = m.cholesky().ok_or(RbdError::NotPositiveDefinite)?;
    let free = chol.solve(&gen);
    if contacts.is_empty() {
        return Ok((free, DVector::zeros(0)));
    }
    let jc = contact_jacobian(model, &state.q, contacts)?;
    let drift = contact_drift(model, state, contacts)?;
    let minv_jt = chol.solve(&jc.transpose());
    let lambda = &jc * &minv_jt;
    let rhs = -(drift + &jc * &free);
    let f = damped_solve(&lambda, &rhs)?;
    let qdd = free + minv_jt * &f;
    Ok((qdd, f))
}

/// Perfectly plastic impact: removes the velocity components that violate
/// newly established contacts.
pub fn contact_impulse(model: &RobotModel, state: &RobotState, contacts: &ContactSet) -> Result<DVector<f64>> {
    model.check_state(state)?;
    if contacts.is_empty() {
        return Ok(state.v.clone());
    }
    let m = mass_matrix(model, &state.q)?;
    let chol = m.cholesky().ok_or(RbdError::NotPositiveDefinite)?;
    let jc = contact_jacobian(model, &state.q, contacts)?;
    let minv_jt = chol.solve(&jc.transpose());
    let lambda = &jc * &minv_jt;
    let impulse = damped_solve(&lambda, &-(&jc * &state.v))?;
    Ok(&state.v + minv_jt * impulse)
}

/// Semi-implicit Euler step.
pub fn integrate(state: &RobotState, qdd: &DVector<f64>, dt: f64) -> Result<RobotState> {
    if !(dt > 0.0) {
        return Err(RbdError::InvalidModel(format!("time step must be positive, got {dt}")));
    }
    if !qdd.iter().all(|x| x.is_finite()) || !state.is_finite() {
        return Err(RbdError::NonFinite("integration input"));
    }
    let v = &state.v + qdd * dt;
    let q = &state.q + &v * dt;
    Ok(RobotState {
        q,
        v,
        t: state.t + dt,
    })
}

/// Double-support configuration with the torso at `pelvis = (x, z)`, zero
/// pitch and each foot flat with its sole point at `(foot_x[i], 0)`.
/// Feet are ordered left, right.
pub fn stance_configuration(model: &RobotModel, pelvis: [f64; 2], foot_x: [f64; 2]) -> Result<DVector<f64>> {
    let soles = [model.frame_index("l_sole")?, model.frame_index("r_sole")?];
    let mut q = DVector::zeros(model.nv());
    q[0] = pelvis[0];
    q[1] = pelvis[1];
    for (side, &sole) in soles.iter().enumerate() {
        let frame = &model.contact_frames[sole];
        // Actuated joints on the path from the base to the foot, root first.
        let mut chain = Vec::new();
        let mut k = frame.link;
        while k > 0 {
            chain.push(k - 1);
            k = model.joints[k - 1].parent;
        }
        chain.reverse();
        if chain.len() != 3 {
            return Err(RbdError::InvalidModel("stance IK expects hip-knee-ankle legs".into()));
        }
        q[BASE_DOF + chain[0]] = 0.3;
        q[BASE_DOF + chain[1]] = -0.6;
        q[BASE_DOF + chain[2]] = 0.3;
        let target = Vec2::new(foot_x[side], 0.0);
        let mut residual = f64::INFINITY;
        for _ in 0..50 {
            let pl = placement(model, &q);
            let p = point_world(&pl, frame.link, vec2(frame.offset));
            let err = nalgebra::Vector3::new(p.x - target.x, p.y - target.y, pl.theta[frame.link]);
            residual = err.norm();
            if residual < 1e-12 {
                break;
            }
            let jp = point_jacobian(model, &pl, frame.link, vec2(frame.offset));
            let mut jac = nalgebra::Matrix3::zeros();
            for (c, &j) in chain.iter().enumerate() {
                jac[(0, c)] = jp[(0, BASE_DOF + j)];
                jac[(1, c)] = jp[(1, BASE_DOF + j)];
                jac[(2, c)] = 1.0;
            }
            let step = jac.lu().solve(&err).ok_or(RbdError::IkFailed(residual))?;
            for (c, &j) in chain.iter().enumerate() {
                q[BASE_DOF + j] -= step[c];
            }
        }
        if residual > 1e-9 {
            return Err(RbdError::IkFailed(residual));
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pendulum() -> RobotModel {
        // Base link pinned by the test through contacts is awkward; instead
        // use a massless-ish base and read the joint block only.
        let mut m = RobotModel::biped();
        m.links.truncate(2);
        m.joints.truncate(1);
        m.links[1].inertia = 1e-9;
        m.contact_frames = vec![
            ContactFrame {
                name: "a".into(),
                link: 1,
                offset: [0.0, -0.42],
            },
            ContactFrame {
                name: "b".into(),
                link: 0,
                offset: [0.0, 0.0],
            },
        ];
        m
    }

    #[test]
    fn default_model_is_valid() {
        RobotModel::biped().validate().unwrap();
    }

    #[test]
    fn pendulum_joint_inertia_is_m_l_squared() {
        let m = pendulum();
        let q = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.4]);
        let mm = mass_matrix(&m, &q).unwrap();
        // Joint diagonal entry: point mass at distance 0.21 from the hip.
        assert_relative_eq!(mm[(3, 3)], 7.0 * 0.21 * 0.21 + 1e-9, epsilon = 1e-12);
    }

    #[test]
    fn translational_block_is_total_mass() {
        let m = RobotModel::biped();
        let q = DVector::from_fn(m.nv(), |i, _| 0.1 * i as f64);
        let mm = mass_matrix(&m, &q).unwrap();
        let total = m.total_mass();
        assert_relative_eq!(mm[(0, 0)], total, epsilon = 1e-12);
        assert_relative_eq!(mm[(1, 1)], total, epsilon = 1e-12);
        assert_relative_eq!(mm[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hanging_pendulum_has_no_joint_gravity_torque() {
        let m = pendulum();
        let s = RobotState::at_rest(DVector::zeros(4));
        let h = bias_forces(&m, &s).unwrap();
        assert!(h[3].abs() < 1e-12);
    }

    #[test]
    fn base_frame_jacobian_is_identity_block() {
        let m = RobotModel::biped();
        let q = DVector::from_fn(m.nv(), |i, _| 0.05 * i as f64);
        let j = frame_jacobian_by_name(&m, &q, "base").unwrap();
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(1, 1)], 1.0);
        assert!(j.columns(2, m.nv() - 2).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unknown_frame_is_reported() {
        let m = RobotModel::biped();
        let q = DVector::zeros(m.nv());
        assert!(matches!(
            frame_jacobian_by_name(&m, &q, "nose"),
            Err(RbdError::UnknownFrame(_))
        ));
    }

    #[test]
    fn non_finite_configuration_rejected() {
        let m = RobotModel::biped();
        let mut q = DVector::zeros(m.nv());
        q[4] = f64::NAN;
        assert!(matches!(mass_matrix(&m, &q), Err(RbdError::NonFinite(_))));
    }

    #[test]
    fn zero_velocity_has_zero_drift() {
        let m = RobotModel::biped();
        let s = RobotState::at_rest(DVector::from_fn(m.nv(), |i, _| 0.07 * i as f64));
        for f in 0..m.contact_frames.len() {
            assert_eq!(jacobian_drift(&m, &s, FrameRef::Contact(f)).unwrap(), Vec2::zeros());
        }
    }

    #[test]
    fn free_fall_without_contacts() {
        let m = RobotModel::biped();
        let q = stance_configuration(&m, [0.0, 0.85], [0.1, -0.1]).unwrap();
        let s = RobotState::at_rest(q);
        let (qdd, f) =
            constrained_forward_dynamics(&m, &s, &DVector::zeros(m.nj()), &ContactSet::empty(), None).unwrap();
        assert_eq!(f.len(), 0);
        let mm = mass_matrix(&m, &s.q).unwrap();
        let h = bias_forces(&m, &s).unwrap();
        let expect = mm.cholesky().unwrap().solve(&-h);
        assert!((qdd - expect).amax() < 1e-12);
    }

    #[test]
    fn stance_ik_places_feet() {
        let m = RobotModel::biped();
        let q = stance_configuration(&m, [0.0, 0.85], [0.1, -0.1]).unwrap();
        let l = frame_position(&m, &q, FrameRef::Contact(m.frame_index("l_sole").unwrap())).unwrap();
        let r = frame_position(&m, &q, FrameRef::Contact(m.frame_index("r_sole").unwrap())).unwrap();
        assert_relative_eq!(l.x, 0.1, epsilon = 1e-9);
        assert_relative_eq!(r.x, -0.1, epsilon = 1e-9);
        assert_relative_eq!(l.y, 0.0, epsilon = 1e-9);
        let c = com_position(&m, &q).unwrap();
        assert!(c.x > r.x && c.x < l.x);
    }

    #[test]
    fn integrate_constant_acceleration() {
        let s = RobotState::new(DVector::zeros(3), DVector::from_vec(vec![1.0, 0.0, 0.5]), 0.0);
        let a = DVector::from_vec(vec![0.0, -2.0, 1.0]);
        let mut x = s.clone();
        for _ in 0..10 {
            x = integrate(&x, &a, 1e-3).unwrap();
        }
        assert!((x.v - (&s.v + &a * 0.01)).amax() < 1e-15);
        assert!((x.t - 0.01).abs() < 1e-15);
        assert!(integrate(&s, &a, 0.0).is_err());
    }

    #[test]
    fn model_json_roundtrip_and_schema_check() {
        let m = RobotModel::biped();
        let back = RobotModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        let bad = m.to_json().replace("rbd-model/1", "rbd-model/9");
        assert!(RobotModel::from_json(&bad).is_err());
        let bad = m.to_json().replace("\"mass\": 30.0", "\"mass\": -1.0");
        assert!(matches!(RobotModel::from_json(&bad), Err(RbdError::InvalidModel(_))));
    }
}
