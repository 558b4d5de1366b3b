use hetalloc_core::allocator::SearchSettings;
use hetalloc_core::sim::{check_milestones, Milestone, MilestoneKind, MILESTONE_TOL};
use hetalloc_core::{
    brute_force_allocation, run_centralized, run_mixed, solve_allocation, Allocation, AllocationProblem, AllocatorParams,
    Ensemble, HeterogeneityModel, Hyperedge, MixedOptions, QpProblem, QpSolver, QpStatus, Scenario, SingleIntegrator,
    TaskSpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Two robots with wheels; only robot 1 carries the camera task 1 needs.
fn two_robot_scenario() -> Scenario {
    let t = DMatrix::from_row_slice(2, 2, &[1, 0, 0, 1]);
    let a = DMatrix::from_row_slice(2, 2, &[true, true, false, true]);
    let caps = vec![vec![Hyperedge::unit(vec![0])], vec![Hyperedge::unit(vec![1])]];
    let model = HeterogeneityModel::new(t, a, caps).unwrap();
    let mut params = AllocatorParams::new(2, 2);
    params.l = 1e-12;
    Scenario {
        name: "two".into(),
        model,
        initial: Ensemble::from_robots(&[[-1.0, 0.0], [1.0, 0.0]]),
        tasks: vec![TaskSpec::goto([-1.0, 0.8]), TaskSpec::goto([1.0, 0.8])],
        params,
        search: SearchSettings::default(),
        events: vec![],
        fields: vec![],
        dt: 0.033,
        duration: 3.0,
        latency: 5,
        beta: None,
        bounds: None,
        seed: 0,
        milestones: vec![
            Milestone {
                label: "split".into(),
                time: 0.0,
                kind: MilestoneKind::Allocation(Allocation(vec![Some(0), Some(1)])),
            },
            Milestone {
                label: "second goal".into(),
                time: 1.5,
                kind: MilestoneKind::TaskDone { task: 1, tol: 1e-2, after: 0.0 },
            },
        ],
    }
}

#[test]
fn a_hand_built_scenario_runs_to_its_goals() {
    let sc = two_robot_scenario();
    let trace = run_centralized(&sc).unwrap();
    assert_eq!(trace.rows.len(), sc.steps());
    let results = check_milestones(&sc.milestones, &trace, MILESTONE_TOL);
    assert!(results.iter().all(|r| r.passed), "{results:?}");
    let last = trace.rows.last().unwrap();
    assert!(last.h.iter().all(|&h| h > -1e-2), "{:?}", last.h);
    assert!(trace.rows.windows(2).all(|w| w[1].v <= w[0].v + 1e-12));
}

#[test]
fn runs_are_deterministic() {
    let sc = two_robot_scenario();
    assert_eq!(run_centralized(&sc).unwrap(), run_centralized(&sc).unwrap());
    let opts = MixedOptions { latency: 3, compare: true };
    assert_eq!(run_mixed(&sc, &opts).unwrap(), run_mixed(&sc, &opts).unwrap());
}

#[test]
fn mixed_runs_without_disturbances_track_the_fresh_allocation() {
    let sc = two_robot_scenario();
    let trace = run_mixed(&sc, &MixedOptions { latency: 10, compare: true }).unwrap();
    let worst = trace.input_gap().into_iter().flatten().fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn invalid_scenarios_are_rejected_up_front() {
    let mut sc = two_robot_scenario();
    sc.dt = 0.0;
    assert!(run_centralized(&sc).is_err());
    let mut sc = two_robot_scenario();
    sc.tasks.pop();
    assert!(run_centralized(&sc).is_err());
}

fn spd(n: usize, vals: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| vals[(i * n + j) % vals.len()]);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strictly_convex_qps_meet_kkt(
        n in 1usize..6,
        m in 0usize..8,
        vals in proptest::collection::vec(-2.0f64..2.0, 36),
        lin in proptest::collection::vec(-3.0f64..3.0, 6),
        rows in proptest::collection::vec(-1.0f64..1.0, 48),
        slack in proptest::collection::vec(0.0f64..2.0, 8),
    ) {
        let q = spd(n, &vals);
        let c = DVector::from_fn(n, |i, _| lin[i]);
        let g = DMatrix::from_fn(m, n, |i, j| rows[i * 6 + j]);
        // the origin is strictly feasible, so the problem always has a solution
        let d = DVector::from_fn(m, |i, _| slack[i] + 0.1);
        let p = QpProblem::new(q, c, g, d).unwrap();
        let sol = QpSolver::default().solve(&p, None);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.kkt.within(1e-8, 1e-10), "{:?}", sol.kkt);
        prop_assert!(p.objective(&sol.z) <= p.objective(&DVector::zeros(n)) + 1e-12);
    }

    #[test]
    fn allocator_matches_enumeration_on_small_teams(
        xs in proptest::collection::vec((-1.7f64..1.7, -1.1f64..1.1), 3),
        goals in proptest::collection::vec((-1.5f64..1.5, -1.0f64..1.0), 2),
        owns in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let a = DMatrix::from_fn(2, 3, |f, r| owns[f * 3 + r] || (f == 0 && r == 0));
        let caps = vec![vec![Hyperedge::unit(vec![0])], vec![Hyperedge::unit(vec![1])]];
        let model = HeterogeneityModel::new(DMatrix::from_row_slice(2, 2, &[1, 0, 0, 1]), a, caps).unwrap();
        let specs = model.specializations().to_vec();
        let tasks: Vec<TaskSpec> = goals.iter().map(|&(x, y)| TaskSpec::goto([x, y])).collect();
        let robots: Vec<[f64; 2]> = xs.iter().map(|&(x, y)| [x, y]).collect();
        let x = Ensemble::from_robots(&robots);
        let params = AllocatorParams::new(2, 3);
        let d = SingleIntegrator::new(2);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &Allocation::idle(3));
        match (solve_allocation(&p), brute_force_allocation(&p)) {
            (Ok(a), Ok(b)) => {
                prop_assert!(p.admits(&a.alpha));
                prop_assert!((a.objective - b.objective).abs() <= 1e-6 * b.objective.abs().max(1e-9));
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "solver and enumeration disagree on feasibility: {a:?} {b:?}"),
        }
    }
}
