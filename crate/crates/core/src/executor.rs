//! Per-robot execution QP.
//!
//! Given the robot's column of the priority matrix, pick the least-effort
//! input that keeps every task's barrier condition, relaxing each task by its
//! slack and letting the priority rows decide which slack must stay small.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::allocator::PriorityConstraintSet;
use crate::dynamics::{Dynamics, Ensemble};
use crate::model::Specialization;
use crate::qp::{KktResiduals, QpProblem, QpSolver, QpStatus, WarmStart};
use crate::tasks::{lie_terms, ClassK, TaskFrame, TaskSpec};

/// Barrier constraints of one robot for every task, linearised at one instant.
///
/// Task `m` reads `input[m] . u + rhs[m] + delta_m >= 0` with
/// `rhs[m] = L_f h + dh/dt + gamma(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotRows {
    pub value: Vec<f64>,
    pub rhs: Vec<f64>,
    pub input: Vec<Vec<f64>>,
}

impl RobotRows {
    pub fn n_tasks(&self) -> usize {
        self.value.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.input.first().map_or(0, Vec::len)
    }
}

pub fn robot_rows(
    tasks: &[TaskSpec],
    frames: &[TaskFrame],
    dynamics: &dyn Dynamics,
    gamma: ClassK,
    robot: usize,
    own: &[f64],
    t: f64,
) -> RobotRows {
    let mut rows = RobotRows {
        value: Vec::with_capacity(tasks.len()),
        rhs: Vec::with_capacity(tasks.len()),
        input: Vec::with_capacity(tasks.len()),
    };
    for (task, frame) in tasks.iter().zip(frames) {
        let h = task.robot_value(frame, robot, own, t);
        let (drift, input) = lie_terms(task, dynamics, frame, robot, own, t);
        rows.value.push(h);
        rows.rhs.push(drift + gamma.eval(h));
        rows.input.push(input);
    }
    if tasks.is_empty() {
        rows.input.clear();
    }
    rows
}

/// Everything one robot needs for one step.
#[derive(Clone, Copy)]
pub struct ExecutionInput<'a> {
    pub robot: usize,
    pub tasks: &'a [TaskSpec],
    /// One frame per task, built from the same snapshot as `x`.
    pub frames: &'a [TaskFrame],
    pub dynamics: &'a dyn Dynamics,
    pub x: &'a Ensemble,
    pub t: f64,
    /// The robot's priority column, binary with at most one 1.
    pub alpha: &'a [f64],
    pub specialization: &'a Specialization,
    pub priorities: &'a PriorityConstraintSet,
    pub gamma: ClassK,
    pub l: f64,
    pub delta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutput {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    /// `|u|^2 + l sum s_m delta_m^2`
    pub objective: f64,
    pub kkt: KktResiduals,
    pub status: QpStatus,
    pub warm: Option<WarmStart>,
}

impl ExecutionOutput {
    pub fn is_infeasible(&self) -> bool {
        self.status != QpStatus::Optimal
    }
}

/// `[u, delta]` problem of one robot.
pub fn robot_problem(
    rows: &RobotRows,
    n_inputs: usize,
    alpha: &[f64],
    spec: &Specialization,
    priorities: &PriorityConstraintSet,
    l: f64,
    delta_max: f64,
) -> QpProblem {
    let n_t = rows.n_tasks();
    let n = n_inputs + n_t;
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n_inputs {
        q[(j, j)] = 2.0;
    }
    for m in 0..n_t {
        q[(n_inputs + m, n_inputs + m)] = 2.0 * l * spec.get(m);
    }
    let pairs = priorities.pairs();
    let n_rows = n_t + pairs.len() + 2 * n_t;
    let mut g = DMatrix::zeros(n_rows, n);
    let mut d = DVector::zeros(n_rows);
    for m in 0..n_t {
        for (j, &v) in rows.input[m].iter().enumerate() {
            g[(m, j)] = -v;
        }
        g[(m, n_inputs + m)] = -1.0;
        d[m] = rows.rhs[m];
    }
    let kappa = priorities.kappa();
    for (r, &(hi, lo)) in pairs.iter().enumerate() {
        let row = n_t + r;
        g[(row, n_inputs + hi)] = 1.0;
        g[(row, n_inputs + lo)] = -1.0 / kappa;
        d[row] = delta_max * (1.0 - alpha[hi]);
    }
    let base = n_t + pairs.len();
    for m in 0..n_t {
        g[(base + 2 * m, n_inputs + m)] = -1.0;
        g[(base + 2 * m + 1, n_inputs + m)] = 1.0;
        d[base + 2 * m + 1] = delta_max;
    }
    QpProblem::new(q, DVector::zeros(n), g, d).expect("robot problem is well formed")
}

/// Solves one robot's problem from linearised rows.
///
/// An infeasible problem yields zero input and saturated slack.
#[allow(clippy::too_many_arguments)]
pub fn solve_robot(
    solver: &mut QpSolver,
    rows: &RobotRows,
    n_inputs: usize,
    alpha: &[f64],
    spec: &Specialization,
    priorities: &PriorityConstraintSet,
    l: f64,
    delta_max: f64,
    warm: Option<&WarmStart>,
) -> ExecutionOutput {
    let n_t = rows.n_tasks();
    let problem = robot_problem(rows, n_inputs, alpha, spec, priorities, l, delta_max);
    let sol = solver.solve(&problem, warm);
    if sol.status != QpStatus::Optimal {
        log::warn!("execution problem not solved ({:?}); holding still", sol.status);
        return ExecutionOutput {
            u: vec![0.0; n_inputs],
            delta: vec![delta_max; n_t],
            objective: f64::INFINITY,
            kkt: sol.kkt,
            status: sol.status,
            warm: None,
        };
    }
    let u: Vec<f64> = sol.z.rows(0, n_inputs).iter().copied().collect();
    let delta: Vec<f64> = sol.z.rows(n_inputs, n_t).iter().copied().collect();
    let objective =
        u.iter().map(|v| v * v).sum::<f64>() + l * (0..n_t).map(|m| spec.get(m) * delta[m] * delta[m]).sum::<f64>();
    ExecutionOutput {
        u,
        delta,
        objective,
        kkt: sol.kkt,
        status: sol.status,
        warm: Some(sol.warm_start()),
    }
}

pub fn execute_step(input: &ExecutionInput<'_>) -> ExecutionOutput {
    let i = input.robot;
    assert!(
        input.alpha.iter().all(|&a| a == 0.0 || a == 1.0) && input.alpha.iter().sum::<f64>() <= 1.0,
        "priority column must be binary with at most one entry set"
    );
    let rows = robot_rows(input.tasks, input.frames, input.dynamics, input.gamma, i, input.x.robot(i), input.t);
    solve_robot(
        &mut QpSolver::default(),
        &rows,
        input.dynamics.input_dim(),
        input.alpha,
        input.specialization,
        input.priorities,
        input.l,
        input.delta_max,
        None,
    )
}
