//! Reacting to things going wrong.
//!
//! Two mechanisms. Unmodelled trouble (a robot that cannot move the way its
//! model says) shows up as a gap between the progress a robot actually made
//! and the progress a nominal one-step prediction expected; that gap slowly
//! erodes the robot's specialization for the task it is working on. Known
//! trouble (a broken sensor) is applied directly to the feature or capability
//! mappings.

use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

use crate::allocator::Allocation;
use crate::dynamics::{Dynamics, Ensemble};
use crate::model::{HeterogeneityModel, ModelError, Specialization};
use crate::tasks::{TaskFrame, TaskSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResilienceError {
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("update gain must be positive, got {0}")]
    InvalidGain(f64),
    #[error("event time must be non-negative, got {0}")]
    InvalidTime(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What the team looked like one step ago and what each robot was told to do.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressLedger {
    dt: f64,
    beta: f64,
    previous: Option<(Ensemble, Vec<Vec<f64>>)>,
}

impl ProgressLedger {
    pub fn new(dt: f64, beta: f64) -> Result<Self, ResilienceError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ResilienceError::InvalidStep(dt));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(ResilienceError::InvalidGain(beta));
        }
        Ok(Self { dt, beta, previous: None })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn record(&mut self, x: &Ensemble, u: &[Vec<f64>]) {
        self.previous = Some((x.clone(), u.to_vec()));
    }

    pub fn previous_state(&self) -> Option<&Ensemble> {
        self.previous.as_ref().map(|(x, _)| x)
    }

    pub fn previous_input(&self, robot: usize) -> Option<&[f64]> {
        self.previous.as_ref().map(|(_, u)| u[robot].as_slice())
    }

    pub fn clear(&mut self) {
        self.previous = None;
    }
}

/// Where robot `robot` should be now had its dynamics behaved nominally.
///
/// Every other robot stays where it was. `None` before anything was recorded.
pub fn simulate_nominal(ledger: &ProgressLedger, dynamics: &dyn Dynamics, robot: usize) -> Option<Ensemble> {
    let (x, u) = ledger.previous.as_ref()?;
    let next = dynamics.euler_step(x.robot(robot), &u[robot], ledger.dt, 1.0);
    Some(x.with_robot(robot, &next))
}

/// `min(0, h(actual) - h(simulated))` for robot `robot`'s share of a task.
///
/// Both are evaluated in `frame`, the task's team data at the actual state.
pub fn progress_deficit(
    task: &TaskSpec,
    frame: &TaskFrame,
    robot: usize,
    actual: &Ensemble,
    simulated: &Ensemble,
    t: f64,
) -> f64 {
    let got = task.robot_value(frame, robot, actual.robot(robot), t);
    let expected = task.robot_value(frame, robot, simulated.robot(robot), t);
    (got - expected).min(0.0)
}

/// Decays the specialization of the task the robot works on, clamped at 0.
pub fn update_specialization(
    spec: &Specialization,
    task: Option<usize>,
    deficits: &[f64],
    beta: f64,
) -> Specialization {
    let mut out = spec.clone();
    if let Some(m) = task {
        let d = deficits[m].min(0.0);
        out.set(m, spec.get(m) + beta * d);
    }
    out
}

/// One exogenous update for the whole team.
///
/// `frames` must be the task frames at `actual`. Robots without a recorded
/// previous step keep their specialization.
#[allow(clippy::too_many_arguments)]
pub fn exogenous_update(
    ledger: &ProgressLedger,
    tasks: &[TaskSpec],
    frames: &[TaskFrame],
    dynamics: &dyn Dynamics,
    actual: &Ensemble,
    t: f64,
    allocation: &Allocation,
    specs: &[Specialization],
) -> Vec<Specialization> {
    (0..actual.len())
        .map(|i| {
            let Some(task) = allocation.task_of(i) else {
                return specs[i].clone();
            };
            let Some(sim) = simulate_nominal(ledger, dynamics, i) else {
                return specs[i].clone();
            };
            let mut deficits = alloc::vec![0.0; tasks.len()];
            deficits[task] = progress_deficit(&tasks[task], &frames[task], i, actual, &sim, t);
            update_specialization(&specs[i], Some(task), &deficits, ledger.beta)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceKind {
    FeatureFailure { robot: usize, feature: usize },
    WeightChange { capability: usize, edge: usize, weight: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceEvent {
    pub time: f64,
    pub kind: DisturbanceKind,
}

impl DisturbanceEvent {
    pub fn new(time: f64, kind: DisturbanceKind) -> Result<Self, ResilienceError> {
        if !(time >= 0.0 && time.is_finite()) {
            return Err(ResilienceError::InvalidTime(time));
        }
        Ok(Self { time, kind })
    }
}

/// The model after a known disturbance.
pub fn apply_endogenous(model: &HeterogeneityModel, event: &DisturbanceEvent) -> Result<HeterogeneityModel, ResilienceError> {
    Ok(match event.kind {
        DisturbanceKind::FeatureFailure { robot, feature } => model.apply_feature_failure(robot, feature)?,
        DisturbanceKind::WeightChange { capability, edge, weight } => {
            model.set_hyperedge_weight(capability, edge, weight)?
        }
    })
}

/// Specializations after a model change, never undoing earlier decay.
pub fn refresh_specializations(current: &[Specialization], model: &HeterogeneityModel) -> Vec<Specialization> {
    current
        .iter()
        .zip(model.specializations())
        .map(|(cur, fresh)| cur.min_with(fresh))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SingleIntegrator;
    use crate::model::fixtures::{escort_model, four_robot_model};
    use proptest::prelude::*;

    fn ledger_at(x: &[[f64; 2]], u: &[[f64; 2]], dt: f64) -> ProgressLedger {
        let mut l = ProgressLedger::new(dt, 0.5).unwrap();
        let u: Vec<Vec<f64>> = u.iter().map(|v| v.to_vec()).collect();
        l.record(&Ensemble::from_robots(x), &u);
        l
    }

    #[test]
    fn ledger_validation() {
        assert!(ProgressLedger::new(0.0, 1.0).is_err());
        assert!(ProgressLedger::new(0.1, -1.0).is_err());
        assert!(DisturbanceEvent::new(-1.0, DisturbanceKind::FeatureFailure { robot: 0, feature: 0 }).is_err());
    }

    #[test]
    fn nominal_prediction() {
        let d = SingleIntegrator::new(2);
        let l = ledger_at(&[[0.0, 0.0]], &[[1.0, 0.0]], 0.1);
        let sim = simulate_nominal(&l, &d, 0).unwrap();
        assert_eq!(sim.robot(0), &[0.1, 0.0]);
        let l = ledger_at(&[[0.3, -0.2]], &[[0.0, 0.0]], 0.1);
        assert_eq!(simulate_nominal(&l, &d, 0).unwrap().robot(0), &[0.3, -0.2]);
        assert!(simulate_nominal(&ProgressLedger::new(0.1, 1.0).unwrap(), &d, 0).is_none());
    }

    #[test]
    fn others_stay_put_in_prediction() {
        let d = SingleIntegrator::new(2);
        let l = ledger_at(&[[0.0, 0.0], [1.0, 1.0]], &[[1.0, 0.0], [5.0, 5.0]], 0.1);
        let sim = simulate_nominal(&l, &d, 0).unwrap();
        assert_eq!(sim.robot(1), &[1.0, 1.0]);
    }

    #[test]
    fn deficit_values() {
        // h = -|p|^2 towards the origin
        let task = TaskSpec::goto([0.0, 0.0]);
        let frame = TaskFrame::Local;
        let sim = Ensemble::from_robots(&[[1.0, 0.0]]);
        let behind = Ensemble::from_robots(&[[1.3f64.sqrt(), 0.0]]);
        let ahead = Ensemble::from_robots(&[[0.5f64.sqrt(), 0.0]]);
        assert_eq!(progress_deficit(&task, &frame, 0, &sim, &sim, 0.0), 0.0);
        assert!((progress_deficit(&task, &frame, 0, &behind, &sim, 0.0) + 0.3).abs() < 1e-12);
        assert_eq!(progress_deficit(&task, &frame, 0, &ahead, &sim, 0.0), 0.0);
    }

    #[test]
    fn specialization_update_values() {
        let s = Specialization::new(alloc::vec![1.0, 1.0]);
        let out = update_specialization(&s, Some(0), &[-0.4, -3.0], 0.5);
        assert_eq!(out.entries(), &[0.8, 1.0]);
        assert_eq!(update_specialization(&s, None, &[-0.4, -0.4], 0.5), s);
    }

    #[test]
    fn repeated_decay_reaches_zero_and_stays() {
        let mut s = Specialization::new(alloc::vec![1.0]);
        let mut steps = 0;
        while s.get(0) > 0.0 {
            s = update_specialization(&s, Some(0), &[-0.07], 1.0);
            steps += 1;
            assert!(steps < 100);
        }
        assert_eq!(steps, 15);
        for _ in 0..5 {
            s = update_specialization(&s, Some(0), &[-0.07], 1.0);
            assert_eq!(s.get(0), 0.0);
        }
        assert_eq!(s.projector(), alloc::vec![1.0]);
    }

    #[test]
    fn undisturbed_robot_has_no_deficit() {
        let d = SingleIntegrator::new(2);
        let task = TaskSpec::goto([0.4, -0.2]);
        let mut l = ProgressLedger::new(0.033, 1.0).unwrap();
        let mut x = Ensemble::from_robots(&[[-1.0, 0.7]]);
        for _ in 0..50 {
            let own = x.robot(0);
            let u = alloc::vec![alloc::vec![0.4 - own[0], -0.2 - own[1]]];
            l.record(&x, &u);
            x = x.with_robot(0, &d.euler_step(x.robot(0), &u[0], 0.033, 1.0));
            let sim = simulate_nominal(&l, &d, 0).unwrap();
            assert!(progress_deficit(&task, &TaskFrame::Local, 0, &x, &sim, 0.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn stuck_robot_decays_only_its_task() {
        let d = SingleIntegrator::new(2);
        let tasks = [TaskSpec::goto([1.0, 0.0]), TaskSpec::goto([-1.0, 0.0])];
        let frames = [TaskFrame::Local, TaskFrame::Local];
        let x = Ensemble::from_robots(&[[0.0, 0.0], [0.0, 0.5]]);
        let l = ledger_at(&[[0.0, 0.0], [0.0, 0.5]], &[[1.0, 0.0], [-1.0, 0.0]], 0.1);
        let specs = alloc::vec![Specialization::ones(2), Specialization::ones(2)];
        let alloc = Allocation(alloc::vec![Some(0), None]);
        // nobody moved: robot 0 fell short, robot 1 is idle
        let out = exogenous_update(&l, &tasks, &frames, &d, &x, 0.0, &alloc, &specs);
        assert!(out[0].get(0) < 1.0);
        assert_eq!(out[0].get(1), 1.0);
        assert_eq!(out[1], specs[1]);
    }

    #[test]
    fn feature_loss_changes_features_row() {
        let m = four_robot_model();
        let ev = DisturbanceEvent::new(3.0, DisturbanceKind::FeatureFailure { robot: 1, feature: 3 }).unwrap();
        let after = apply_endogenous(&m, &ev).unwrap();
        assert!(m.features()[(3, 1)]);
        assert!(!after.features()[(3, 1)]);
        for f in 0..6 {
            for r in 0..4 {
                if (f, r) != (3, 1) {
                    assert_eq!(after.features()[(f, r)], m.features()[(f, r)]);
                }
            }
        }
    }

    #[test]
    fn camera_loss_removes_monitoring() {
        let m = escort_model();
        let ev = DisturbanceEvent::new(15.0, DisturbanceKind::FeatureFailure { robot: 2, feature: 2 }).unwrap();
        let after = apply_endogenous(&m, &ev).unwrap();
        assert_eq!(after.capability_map()[(1, 2)], 0.0);
        assert_eq!(after.capability_map()[(0, 2)], 1.0);
    }

    #[test]
    fn weight_round_trip_is_exact() {
        let m = four_robot_model();
        let zero = apply_endogenous(
            &m,
            &DisturbanceEvent::new(0.0, DisturbanceKind::WeightChange { capability: 0, edge: 1, weight: 0.0 }).unwrap(),
        )
        .unwrap();
        assert_ne!(zero.capability_map(), m.capability_map());
        let back = apply_endogenous(
            &zero,
            &DisturbanceEvent::new(0.0, DisturbanceKind::WeightChange { capability: 0, edge: 1, weight: 1.0 }).unwrap(),
        )
        .unwrap();
        assert_eq!(back.capability_map(), m.capability_map());
    }

    #[test]
    fn refresh_keeps_decay() {
        let m = four_robot_model();
        let mut cur = m.specializations().to_vec();
        cur[3].set(1, 0.25);
        let out = refresh_specializations(&cur, &m);
        assert_eq!(out[3].get(1), 0.25);
        assert_eq!(out[3].get(0), 1.0);
    }

    proptest! {
        #[test]
        fn specialization_never_grows(
            s in proptest::collection::vec(0.0f64..=1.0, 3),
            d in proptest::collection::vec(-5.0f64..5.0, 3),
            task in proptest::option::of(0usize..3),
            beta in 0.01f64..10.0,
        ) {
            let spec = Specialization::new(s);
            let out = update_specialization(&spec, task, &d, beta);
            for m in 0..3 {
                prop_assert!(out.get(m) <= spec.get(m));
                prop_assert!((0.0..=1.0).contains(&out.get(m)));
                if Some(m) != task {
                    prop_assert_eq!(out.get(m), spec.get(m));
                }
            }
        }

        #[test]
        fn deficit_is_never_positive(a in proptest::array::uniform2(-2.0f64..2.0), b in proptest::array::uniform2(-2.0f64..2.0)) {
            let task = TaskSpec::goto([0.1, 0.2]);
            let d = progress_deficit(&task, &TaskFrame::Local, 0, &Ensemble::from_robots(&[a]), &Ensemble::from_robots(&[b]), 0.0);
            prop_assert!(d <= 0.0);
        }
    }
}
