use edgewbc_core::check::{crba_rnea_gap, random_state};
use edgewbc_core::harness::plan::BalancePlan;
use edgewbc_core::rbd::{self, ContactSet, RobotModel, RobotState, BASE_DOF};
use edgewbc_core::tsid::{self, posture_reference, Limits, TaskReference, TaskSpec, TaskTuning};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Scene {
    model: RobotModel,
    tasks: Vec<TaskSpec>,
    contacts: ContactSet,
    limits: Limits,
    nominal: DVector<f64>,
}

fn scene() -> Scene {
    let model = RobotModel::biped();
    let plan = BalancePlan::new(&model, 0.84).unwrap();
    let tuning = TaskTuning::default();
    let tasks = vec![
        tuning.com(TaskReference::hold(DVector::from_column_slice(&plan.com))),
        tuning.posture(posture_reference(&plan.initial_q)),
    ];
    Scene {
        limits: Limits::from_model(&model),
        contacts: plan.contacts.clone(),
        nominal: plan.initial_q.clone(),
        tasks,
        model,
    }
}

/// Standing state with joint perturbations of size `scale`.
fn perturbed(s: &Scene, seed: u64, scale: f64) -> RobotState {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = RobotState::at_rest(s.nominal.clone());
    for i in BASE_DOF..s.model.nv() {
        st.q[i] += scale * rng.random_range(-1.0..1.0);
        st.v[i] += scale * rng.random_range(-1.0..1.0);
    }
    st
}

fn solve(s: &Scene, st: &RobotState) -> (tsid::QpProblem, edgewbc_core::qpsolver::Solution) {
    let p = tsid::build_problem(&s.model, st, &s.tasks, &s.contacts, &s.limits).unwrap();
    let sol = edgewbc_core::qpsolver::solve(&p.qp, None).unwrap();
    (p, sol)
}

#[test]
fn double_support_counts_dynamics_and_contact_rows() {
    let s = scene();
    let (p, _) = solve(&s, &perturbed(&s, 0, 0.0));
    assert_eq!(p.qp.n_eq(), 3 + 2 * s.contacts.len());
}

#[test]
fn zero_error_at_rest_gives_zero_task_targets() {
    let s = scene();
    let st = RobotState::at_rest(s.nominal.clone());
    let (p, sol) = solve(&s, &st);
    let b = tsid::build_b(&s.model, &st, &s.tasks, &s.contacts, &s.limits, &sol.active_set).unwrap();
    let task_rows = b.rows(sol.active_set.len(), b.len() - sol.active_set.len());
    let weighted = &p.qp.task_target;
    // The force regularizer rows carry zero targets as well.
    assert!(task_rows.amax() < 1e-12, "{}", task_rows.amax());
    assert!(weighted.amax() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn mass_matrix_symmetric_and_consistent(seed in any::<u64>()) {
        let model = RobotModel::biped();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = random_state(&model, &mut rng);
        let m = rbd::mass_matrix(&model, &st.q).unwrap();
        prop_assert!((&m - m.transpose()).amax() < 1e-10);
        prop_assert!(m.clone().cholesky().is_some());
        let (gap_m, _) = crba_rnea_gap(&model, &st);
        prop_assert!(gap_m < 1e-8);
    }

    #[test]
    fn optimum_is_feasible(seed in any::<u64>(), scale in 0.0f64..0.05) {
        let s = scene();
        let st = perturbed(&s, seed, scale);
        let (p, sol) = solve(&s, &st);
        for k in 0..p.qp.n_rows() {
            let r = p.qp.row_vec(k).dot(&sol.y) - p.qp.rhs(k);
            if k < p.qp.n_eq() {
                prop_assert!(r.abs() <= 1e-8, "equality row {k}: {r}");
            } else {
                prop_assert!(r <= 1e-8, "inequality row {k}: {r}");
            }
        }
    }

    /// The fast path rebuilds exactly the right-hand side of the full solve.
    #[test]
    fn build_b_matches_solver_rhs(seed in any::<u64>(), scale in 0.0f64..0.05) {
        let s = scene();
        let st = perturbed(&s, seed, scale);
        let (p, sol) = solve(&s, &st);
        let internal = p.qp.stacked_rhs(&sol.active_set).unwrap();
        let fast = tsid::build_b(&s.model, &st, &s.tasks, &s.contacts, &s.limits, &sol.active_set).unwrap();
        prop_assert_eq!(fast, internal);
    }

    /// Right after a cache update the cached operator reproduces the packet.
    #[test]
    fn fresh_cache_reproduces_optimum(seed in any::<u64>(), scale in 0.0f64..0.05) {
        let s = scene();
        let st = perturbed(&s, seed, scale);
        let (_, sol) = solve(&s, &st);
        let b = tsid::build_b(&s.model, &st, &s.tasks, &s.contacts, &s.limits, &sol.active_set).unwrap();
        let y = sol.decomposition.apply(&b).unwrap();
        prop_assert!((&y - &sol.y).amax() <= 1e-10 * (1.0 + sol.y.amax()));
    }

    /// A stale decomposition still enforces its active rows at a frozen
    /// state, and the residual grows from zero with state drift.
    #[test]
    fn stale_cache_keeps_active_rows(seed in any::<u64>()) {
        let s = scene();
        let st = perturbed(&s, seed, 0.02);
        let (_, sol) = solve(&s, &st);
        let residual = |at: &RobotState| {
            let b = tsid::build_b(&s.model, at, &s.tasks, &s.contacts, &s.limits, &sol.active_set).unwrap();
            let y = sol.decomposition.apply(&b).unwrap();
            let now = tsid::build_problem(&s.model, at, &s.tasks, &s.contacts, &s.limits).unwrap();
            let sys = now.stacked(&sol.active_set).unwrap();
            let m = sys.boundary;
            (sys.matrix.rows(0, m) * &y - sys.rhs.rows(0, m)).amax()
        };
        prop_assert!(residual(&st) <= 1e-10 * (1.0 + sol.y.amax()));
        let drifted = |eps: f64| {
            let mut moved = st.clone();
            for i in BASE_DOF..s.model.nv() {
                moved.q[i] += eps;
            }
            residual(&moved)
        };
        let (small, large) = (drifted(1e-6), drifted(1e-2));
        prop_assert!(small <= 1e-3 * large + 1e-8, "{small} vs {large}");
    }
}
