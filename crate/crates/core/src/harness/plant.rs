//! Simulated robot on flat ground.
//!
//! The plan names which contact points may touch the ground. With bilateral
//! contacts every candidate is held. With unilateral contacts a candidate
//! point is closed (no relative motion) while it pushes; it opens when the
//! closed-contact solution would need it to pull, and closes again with a
//! plastic impact once it comes back down to the ground. Tangential motion
//! of closed points is never modelled: friction is unbounded on the plant side.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::rbd::{self, ContactSet, FrameRef, RobotModel, RobotState};

/// Normal force below which a closed point is released.
const RELEASE_FORCE: f64 = -1e-9;
/// Height at or below which an open point counts as touching.
const TOUCH_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactModel {
    /// Planned contacts hold whatever force is needed.
    #[default]
    Bilateral,
    /// Planned contact points may lift off and land again.
    Unilateral,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub qdd: DVector<f64>,
    /// Contacts actually holding during the step.
    pub closed: ContactSet,
    pub forces: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub state: RobotState,
    pub contact_model: ContactModel,
    candidates: ContactSet,
    closed: ContactSet,
}

impl Plant {
    pub fn new(state: RobotState, candidates: ContactSet, contact_model: ContactModel) -> Self {
        Self {
            state,
            contact_model,
            closed: candidates.clone(),
            candidates,
        }
    }

    pub fn closed(&self) -> &ContactSet {
        &self.closed
    }

    fn height(model: &RobotModel, q: &DVector<f64>, frame: usize) -> rbd::Result<(f64, f64)> {
        let p = rbd::frame_position(model, q, FrameRef::Contact(frame))?;
        Ok((p.x, p.y))
    }

    /// Switches the candidate set. Newly planned contacts close at once and
    /// take a plastic impact; dropped ones open.
    pub fn set_candidates(&mut self, model: &RobotModel, planned: &ContactSet) -> rbd::Result<()> {
        if planned == &self.candidates {
            return Ok(());
        }
        let gained: Vec<usize> = planned.frames().filter(|f| !self.candidates.contains(*f)).collect();
        let kept = self.closed.frames().filter(|f| planned.contains(*f));
        self.closed = ContactSet::from_frames(kept.chain(gained.iter().copied()));
        self.candidates = planned.clone();
        if !gained.is_empty() {
            self.state.v = rbd::contact_impulse(model, &self.state, &self.closed)?;
        }
        Ok(())
    }

    /// Closes open candidates that are on the ground and moving into it.
    fn touchdowns(&mut self, model: &RobotModel) -> rbd::Result<()> {
        let mut landed = Vec::new();
        for f in self.candidates.frames() {
            if self.closed.contains(f) {
                continue;
            }
            let (_, z) = Self::height(model, &self.state.q, f)?;
            let jac = rbd::frame_jacobian(model, &self.state.q, FrameRef::Contact(f))?;
            let vz = (jac.row(1) * &self.state.v)[0];
            if z <= TOUCH_GAP && vz <= 0.0 {
                landed.push(f);
            }
        }
        if !landed.is_empty() {
            self.closed = ContactSet::from_frames(self.closed.frames().chain(landed));
            self.state.v = rbd::contact_impulse(model, &self.state, &self.closed)?;
        }
        Ok(())
    }

    /// Dynamics with the current closed set, releasing pulling points one at
    /// a time (most negative first).
    fn solve(&mut self, model: &RobotModel, tau: &DVector<f64>, external: Option<&DVector<f64>>) -> rbd::Result<StepResult> {
        loop {
            let (qdd, forces) = rbd::constrained_forward_dynamics(model, &self.state, tau, &self.closed, external)?;
            let worst = self
                .closed
                .frames()
                .enumerate()
                .map(|(k, f)| (f, forces[2 * k + 1]))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((frame, fz)) if fz < RELEASE_FORCE && self.contact_model == ContactModel::Unilateral => {
                    self.closed = ContactSet::from_frames(self.closed.frames().filter(|f| *f != frame));
                }
                _ => {
                    return Ok(StepResult {
                        qdd,
                        closed: self.closed.clone(),
                        forces,
                    })
                }
            }
        }
    }

    /// Advances by `dt` under `tau` and an optional generalized force.
    pub fn step(&mut self, model: &RobotModel, tau: &DVector<f64>, external: Option<&DVector<f64>>, dt: f64) -> rbd::Result<StepResult> {
        if self.contact_model == ContactModel::Unilateral {
            self.touchdowns(model)?;
        }
        let result = self.solve(model, tau, external)?;
        let t = self.state.t;
        self.state = rbd::integrate(&self.state, &result.qdd, dt)?;
        debug_assert!((self.state.t - (t + dt)).abs() < 1e-12);
        if !self.closed.is_empty() {
            // Euler steps leave a small velocity error on the held points.
            self.state.v = rbd::contact_impulse(model, &self.state, &self.closed)?;
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::plan::BalancePlan;

    #[test]
    fn standing_with_gravity_torques_keeps_all_points() {
        let model = RobotModel::biped();
        let plan = BalancePlan::new(&model, 0.84).unwrap();
        let state = RobotState::at_rest(plan.initial_q.clone());
        let mut plant = Plant::new(state, plan.contacts.clone(), ContactModel::Unilateral);
        // Zero torques on a standing robot still close the feet: knees
        // buckle forward but the soles stay pressed down.
        let r = plant.step(&model, &DVector::zeros(model.nj()), None, 1e-3).unwrap();
        assert_eq!(r.closed.len(), 4);
    }

    #[test]
    fn pulling_point_is_released() {
        let model = RobotModel::biped();
        let plan = BalancePlan::new(&model, 0.84).unwrap();
        let state = RobotState::at_rest(plan.initial_q.clone());
        let mut plant = Plant::new(state.clone(), plan.contacts.clone(), ContactModel::Unilateral);
        // A large backward push tips the feet onto their heels.
        let mut ext = DVector::zeros(model.nv());
        ext[0] = -2000.0;
        let r = plant.step(&model, &DVector::zeros(model.nj()), Some(&ext), 1e-3).unwrap();
        assert!(r.closed.len() < 4);
        for (k, _) in r.closed.frames().enumerate() {
            assert!(r.forces[2 * k + 1] >= RELEASE_FORCE);
        }
        let mut held = Plant::new(state, plan.contacts.clone(), ContactModel::Bilateral);
        let r = held.step(&model, &DVector::zeros(model.nj()), Some(&ext), 1e-3).unwrap();
        assert_eq!(r.closed.len(), 4);
    }
}
