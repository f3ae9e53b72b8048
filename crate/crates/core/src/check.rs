//! Independent reference computations used to validate the fast paths:
//! brute-force active-set enumeration for the QP solver and finite
//! differences for the dynamics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::qpsolver::{self, LeastSquaresQp};
use crate::rbd::{self, ContactSet, FrameRef, RobotModel, RobotState, BASE_DOF};

/// One named check: `value` must not exceed `tolerance`.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value <= self.tolerance
    }
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<32} {:.3e} (tol {:.1e})", self.name, self.value, self.tolerance)
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn gaussian_vector(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
}

/// Random feasible QP with `n` variables and `k` constraint rows, at most
/// half of which are equalities. The feasible set always contains a
/// reference point, with roughly a third of the inequalities tight there.
pub fn random_qp(rng: &mut impl Rng, n: usize, k: usize) -> LeastSquaresQp {
    let me = rng.random_range(0..=(k / 2).min(n.saturating_sub(1)));
    let mi = k - me;
    let p = n + rng.random_range(0..=3);
    let mut c = gaussian_matrix(rng, p, n);
    for i in 0..n {
        c[(i, i)] += 2.0;
    }
    let d = gaussian_vector(rng, p) * 3.0;
    let anchor = gaussian_vector(rng, n);
    let e = gaussian_matrix(rng, me, n);
    let e_rhs = &e * &anchor;
    let g = gaussian_matrix(rng, mi, n);
    let slack = DVector::from_fn(mi, |_, _| {
        if rng.random_bool(0.33) {
            0.0
        } else {
            rng.random_range(0.0..0.5)
        }
    });
    let h = &g * &anchor + slack;
    LeastSquaresQp::new(c, d)
        .with_equalities(e, e_rhs)
        .with_inequalities(g, h)
}

/// Global optimum by enumerating every subset of inequalities, solving each
/// KKT system with LU and keeping the best primal-feasible point.
pub fn enumerate_optimum(qp: &LeastSquaresQp) -> Option<(DVector<f64>, f64)> {
    let (n, me, mi) = (qp.n(), qp.n_eq(), qp.n_ineq());
    assert!(mi <= 16, "enumeration is exponential in the inequality count");
    let hess = qp.task_matrix.tr_mul(&qp.task_matrix);
    let grad0 = qp.task_matrix.tr_mul(&qp.task_target);
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << mi) {
        let rows: Vec<usize> = (0..me).chain((0..mi).filter(|i| mask & (1 << i) != 0).map(|i| me + i)).collect();
        let m = rows.len();
        if m > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
        rhs.rows_mut(0, n).copy_from(&grad0);
        for (i, &k) in rows.iter().enumerate() {
            let a = qp.row_vec(k);
            kkt.view_mut((n + i, 0), (1, n)).copy_from(&a.transpose());
            kkt.view_mut((0, n + i), (n, 1)).copy_from(&a);
            rhs[n + i] = qp.rhs(k);
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let y = sol.rows(0, n).into_owned();
        if !y.iter().all(|x| x.is_finite()) {
            continue;
        }
        let feasible = (0..qp.n_rows()).all(|k| {
            let r = qp.row_vec(k).dot(&y) - qp.rhs(k);
            if k < me {
                r.abs() <= 1e-9
            } else {
                r <= 1e-9
            }
        });
        if !feasible {
            continue;
        }
        let obj = qp.objective(&y);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((y, obj));
        }
    }
    best
}

/// Worst solution and objective gaps between the solver and enumeration over
/// `count` random instances (n ≤ 20, K ≤ 10). Solver failures count as
/// infinite gaps.
pub fn qp_oracle(seed: u64, count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_y, mut worst_obj) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let n = rng.random_range(2..=20);
        let k = rng.random_range(1..=10);
        let qp = random_qp(&mut rng, n, k);
        let Some((y_ref, obj_ref)) = enumerate_optimum(&qp) else {
            continue;
        };
        match qpsolver::solve(&qp, None) {
            Ok(sol) => {
                worst_y = worst_y.max((&sol.y - &y_ref).amax());
                worst_obj = worst_obj.max((sol.objective - obj_ref).abs() / (1.0 + obj_ref.abs()));
            }
            Err(_) => return (f64::INFINITY, f64::INFINITY),
        }
    }
    (worst_y, worst_obj)
}

/// Random configuration and velocity near the nominal stance.
pub fn random_state(model: &RobotModel, rng: &mut impl Rng) -> RobotState {
    let nv = model.nv();
    let mut q = DVector::zeros(nv);
    q[0] = rng.random_range(-0.5..0.5);
    q[1] = rng.random_range(0.6..1.0);
    q[2] = rng.random_range(-0.4..0.4);
    for j in 0..model.nj() {
        q[BASE_DOF + j] = rng.random_range(-0.9..0.9);
    }
    let v = gaussian_vector(rng, nv) * 1.5;
    RobotState::new(q, v, 0.0)
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// Largest gap between the Jacobian-sum mass matrix and RNEA columns, and
/// between RNEA bias forces and the Lagrangian computed by differencing the
/// mass matrix and potential energy.
pub fn crba_rnea_gap(model: &RobotModel, state: &RobotState) -> (f64, f64) {
    let nv = model.nv();
    let zero = DVector::zeros(nv);
    let m = rbd::mass_matrix(model, &state.q).unwrap();
    let mut gap_m: f64 = 0.0;
    for i in 0..nv {
        let col = rbd::inverse_dynamics(model, &state.q, &zero, &unit(nv, i), false).unwrap();
        gap_m = gap_m.max((col - m.column(i)).amax());
    }

    let eps = 1e-6;
    let v = &state.v;
    let dm = (rbd::mass_matrix(model, &(&state.q + v * eps)).unwrap()
        - rbd::mass_matrix(model, &(&state.q - v * eps)).unwrap())
        / (2.0 * eps);
    let mut lagrange = &dm * v;
    for i in 0..nv {
        let qp = &state.q + unit(nv, i) * eps;
        let qm = &state.q - unit(nv, i) * eps;
        let t = |q: &DVector<f64>| 0.5 * v.dot(&(rbd::mass_matrix(model, q).unwrap() * v));
        let u = |q: &DVector<f64>| rbd::potential_energy(model, q).unwrap();
        lagrange[i] += -(t(&qp) - t(&qm)) / (2.0 * eps) + (u(&qp) - u(&qm)) / (2.0 * eps);
    }
    let h = rbd::bias_forces(model, state).unwrap();
    let gap_h = (h - &lagrange).amax() / (1.0 + lagrange.amax());
    (gap_m, gap_h)
}

/// Central-difference gaps for a frame Jacobian and its drift term.
pub fn jacobian_fd_gap(model: &RobotModel, state: &RobotState, frame: FrameRef) -> (f64, f64) {
    let nv = model.nv();
    let eps = 1e-6;
    let jac = rbd::frame_jacobian(model, &state.q, frame).unwrap();
    let mut gap_j: f64 = 0.0;
    for i in 0..nv {
        let pp = rbd::frame_position(model, &(&state.q + unit(nv, i) * eps), frame).unwrap();
        let pm = rbd::frame_position(model, &(&state.q - unit(nv, i) * eps), frame).unwrap();
        let fd = (pp - pm) / (2.0 * eps);
        gap_j = gap_j.max((fd.x - jac[(0, i)]).abs()).max((fd.y - jac[(1, i)]).abs());
    }
    let v = &state.v;
    let jp = rbd::frame_jacobian(model, &(&state.q + v * eps), frame).unwrap();
    let jm = rbd::frame_jacobian(model, &(&state.q - v * eps), frame).unwrap();
    let fd_drift = (jp - jm) / (2.0 * eps) * v;
    let drift = rbd::jacobian_drift(model, state, frame).unwrap();
    let gap_d = (fd_drift[0] - drift.x).abs().max((fd_drift[1] - drift.y).abs());
    (gap_j, gap_d)
}

/// Contact acceleration residual of the constrained plant for random torques.
/// The velocity is first made consistent with the contacts, since heel and
/// toe rows on one rigid foot are dependent.
pub fn contact_residual(model: &RobotModel, state: &RobotState, contacts: &ContactSet, rng: &mut impl Rng) -> f64 {
    let mut state = state.clone();
    state.v = rbd::contact_impulse(model, &state, contacts).unwrap();
    let state = &state;
    let tau = gaussian_vector(rng, model.nj()) * 50.0;
    let (qdd, _) = rbd::constrained_forward_dynamics(model, state, &tau, contacts, None).unwrap();
    let jc = rbd::contact_jacobian(model, &state.q, contacts).unwrap();
    let drift = rbd::contact_drift(model, state, contacts).unwrap();
    (jc * qdd + drift).amax()
}

/// Relative energy change over `duration` of unactuated flight without
/// gravity, integrated at `dt`.
pub fn free_flight_energy_drift(model: &RobotModel, state: &RobotState, duration: f64, dt: f64) -> f64 {
    let mut model = model.clone();
    model.gravity = [0.0, 0.0];
    let e0 = rbd::kinetic_energy(&model, state).unwrap();
    let tau = DVector::zeros(model.nj());
    let mut s = state.clone();
    let steps = (duration / dt).round() as usize;
    for _ in 0..steps {
        let (qdd, _) = rbd::constrained_forward_dynamics(&model, &s, &tau, &ContactSet::empty(), None).unwrap();
        s = rbd::integrate(&s, &qdd, dt).unwrap();
    }
    let e1 = rbd::kinetic_energy(&model, &s).unwrap();
    (e1 - e0).abs() / e0
}

/// Dynamics checks over `samples` random states of `model`.
pub fn dynamics_suite(model: &RobotModel, seed: u64, samples: usize) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m, mut h, mut j, mut d, mut c) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let feet = ContactSet::from_names(model, &["l_heel", "l_toe", "r_heel", "r_toe"]).unwrap_or_else(|_| ContactSet::empty());
    let frames: Vec<FrameRef> = std::iter::once(FrameRef::Base)
        .chain((0..model.contact_frames.len()).map(FrameRef::Contact))
        .collect();
    for _ in 0..samples {
        let state = random_state(model, &mut rng);
        let (gm, gh) = crba_rnea_gap(model, &state);
        m = m.max(gm);
        h = h.max(gh);
        for f in &frames {
            let (gj, gd) = jacobian_fd_gap(model, &state, *f);
            j = j.max(gj);
            d = d.max(gd);
        }
        if !feet.is_empty() {
            c = c.max(contact_residual(model, &state, &feet, &mut rng));
        }
    }
    let flight = random_state(model, &mut rng);
    let energy = free_flight_energy_drift(model, &flight, 1.0, 1e-3);
    vec![
        CheckLine { name: "mass matrix vs RNEA", value: m, tolerance: 1e-8 },
        CheckLine { name: "bias vs Lagrangian FD", value: h, tolerance: 1e-5 },
        CheckLine { name: "frame Jacobian FD", value: j, tolerance: 1e-6 },
        CheckLine { name: "Jacobian drift FD", value: d, tolerance: 1e-4 },
        CheckLine { name: "plant contact residual", value: c, tolerance: 1e-8 },
        CheckLine { name: "free-flight energy drift", value: energy, tolerance: 1e-2 },
    ]
}

/// QP enumeration check plus the dynamics suite on the default biped.
pub fn run_all(seed: u64, qp_instances: usize) -> Vec<CheckLine> {
    let (gap_y, gap_obj) = qp_oracle(seed, qp_instances);
    let mut lines = vec![
        CheckLine { name: "QP solution vs enumeration", value: gap_y, tolerance: 1e-5 },
        CheckLine { name: "QP objective vs enumeration", value: gap_obj, tolerance: 1e-6 },
    ];
    lines.extend(dynamics_suite(&RobotModel::biped(), seed, 20));
    lines
}

/// Dense QP for complexity measurements: `n` variables and task rows,
/// `n / 4` equalities and four inequalities kept inactive by a wide margin,
/// so every solve is one factorization plus the feasibility scan.
pub fn scaling_qp(seed: u64, n: usize) -> LeastSquaresQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
    let mut c = gaussian_matrix(&mut rng, n, n);
    for i in 0..n {
        c[(i, i)] += 2.0;
    }
    let d = gaussian_vector(&mut rng, n) * 3.0;
    let anchor = gaussian_vector(&mut rng, n);
    let e = gaussian_matrix(&mut rng, n / 4, n);
    let e_rhs = &e * &anchor;
    let g = gaussian_matrix(&mut rng, 4, n);
    let h = DVector::from_element(4, 1e6);
    LeastSquaresQp::new(c, d).with_equalities(e, e_rhs).with_inequalities(g, h)
}

/// Wall time in seconds of a full solve and of one decomposition apply on
/// `qp`. Each is the fastest of five batch means, the apply batches running
/// fifty times as many repetitions since a single apply is sub-microsecond.
pub fn time_solve_apply(qp: &LeastSquaresQp, reps: usize) -> (f64, f64) {
    use std::hint::black_box;
    use std::time::Instant;
    let sol = qpsolver::solve(qp, None).expect("timing QP solves");
    let b = qp.stacked_rhs(&sol.active_set).expect("active set of its own solution");
    let best = |reps: usize, f: &dyn Fn()| {
        (0..5)
            .map(|_| {
                let start = Instant::now();
                for _ in 0..reps {
                    f();
                }
                start.elapsed().as_secs_f64() / reps as f64
            })
            .fold(f64::INFINITY, f64::min)
    };
    let reps = (reps / 5).max(1);
    let solve = best(reps, &|| {
        black_box(qpsolver::solve(black_box(qp), None).ok());
    });
    let apply = best(50 * reps, &|| {
        black_box(sol.decomposition.apply(black_box(&b)).ok());
    });
    (solve, apply)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
