//! Minimum-energy task allocation.
//!
//! The allocator picks, for every robot, at most one task to prioritise
//! (`alpha`, binary, tasks x robots) together with all inputs and slacks, so
//! that the team covers every task's capability demand while spending as
//! little control effort as possible. Assigning a robot to a task it is not
//! specialised for costs `C` per assignment.
//!
//! The search is branch and bound over the entries of `alpha`. Each node is
//! bounded by the sum over robots of the cheapest option each robot still has
//! (exact once `alpha` is fixed, because the cost separates over robots), and
//! optionally by the convex relaxation with `alpha` in `[0, 1]`. The
//! relaxation rarely prunes more and is costly on badly scaled instances, so
//! it is off by default.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

use crate::dynamics::{Dynamics, Ensemble};
use crate::executor::{robot_rows, solve_robot, ExecutionOutput, RobotRows};
use crate::model::{check_feasible_assignment, HeterogeneityModel, Specialization, KRON_TOL};
use crate::qp::{QpProblem, QpSolver, QpStatus, WarmStart};
use crate::tasks::{ClassK, TaskFrame, TaskSpec};

/// Pairwise ordering rows `Theta delta + Phi alpha <= Psi` for one robot.
///
/// Row `(m, n)` reads `kappa d_m - d_n + kappa d_max a_m <= kappa d_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityConstraintSet {
    theta: DMatrix<f64>,
    phi: DMatrix<f64>,
    psi: DVector<f64>,
    pairs: Vec<(usize, usize)>,
    kappa: f64,
    delta_max: f64,
}

pub fn build_priority_constraints(n_tasks: usize, kappa: f64, delta_max: f64) -> PriorityConstraintSet {
    assert!(n_tasks >= 1, "need at least one task");
    let pairs: Vec<(usize, usize)> = (0..n_tasks)
        .flat_map(|m| (0..n_tasks).filter(move |&n| n != m).map(move |n| (m, n)))
        .collect();
    let rows = pairs.len();
    let mut theta = DMatrix::zeros(rows, n_tasks);
    let mut phi = DMatrix::zeros(rows, n_tasks);
    for (r, &(m, n)) in pairs.iter().enumerate() {
        theta[(r, m)] = kappa;
        theta[(r, n)] = -1.0;
        phi[(r, m)] = kappa * delta_max;
    }
    PriorityConstraintSet {
        theta,
        phi,
        psi: DVector::from_element(rows, kappa * delta_max),
        pairs,
        kappa,
        delta_max,
    }
}

impl PriorityConstraintSet {
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    /// `(higher, lower)` task of every row.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_satisfied(&self, delta: &[f64], alpha: &[f64]) -> bool {
        let d = DVector::from_column_slice(delta);
        let a = DVector::from_column_slice(alpha);
        let lhs = &self.theta * d + &self.phi * a;
        lhs.iter().zip(self.psi.iter()).all(|(l, r)| *l <= *r + 1e-9 * r.abs().max(1.0))
    }
}

/// Which task, if any, each robot prioritises.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation(pub Vec<Option<usize>>);

impl Allocation {
    pub fn idle(n_robots: usize) -> Self {
        Self(vec![None; n_robots])
    }

    pub fn n_robots(&self) -> usize {
        self.0.len()
    }

    pub fn task_of(&self, robot: usize) -> Option<usize> {
        self.0[robot]
    }

    /// `members[i]` is true when robot `i` works on `task`.
    pub fn members(&self, task: usize) -> Vec<bool> {
        self.0.iter().map(|a| *a == Some(task)).collect()
    }

    pub fn robots_on(&self, task: usize) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] == Some(task)).collect()
    }

    pub fn count(&self, task: usize) -> usize {
        self.0.iter().filter(|a| **a == Some(task)).count()
    }

    pub fn column(&self, robot: usize, n_tasks: usize) -> Vec<f64> {
        let mut col = vec![0.0; n_tasks];
        if let Some(m) = self.0[robot] {
            col[m] = 1.0;
        }
        col
    }

    pub fn matrix(&self, n_tasks: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(n_tasks, self.0.len());
        for (i, t) in self.0.iter().enumerate() {
            if let Some(m) = t {
                a[(*m, i)] = 1.0;
            }
        }
        a
    }

    /// Robot sets per task, in the form the feasibility check expects.
    pub fn task_sets(&self, n_tasks: usize) -> Vec<Vec<usize>> {
        (0..n_tasks).map(|m| self.robots_on(m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorParams {
    /// Penalty on assignments the robot is not specialised for.
    pub c: f64,
    /// Weight of the slack term.
    pub l: f64,
    pub kappa: f64,
    pub delta_max: f64,
    pub gamma: ClassK,
    pub n_min: Vec<usize>,
    pub n_max: Vec<usize>,
}

impl AllocatorParams {
    pub fn new(n_tasks: usize, n_robots: usize) -> Self {
        Self {
            c: 1e6,
            l: 1e-6,
            kappa: 1e6,
            delta_max: 1e3,
            gamma: ClassK::default(),
            n_min: vec![0; n_tasks],
            n_max: vec![n_robots; n_tasks],
        }
    }

    pub fn validate(&self, n_tasks: usize, n_robots: usize) -> Result<(), AllocError> {
        if self.n_min.len() != n_tasks || self.n_max.len() != n_tasks {
            return Err(AllocError::InvalidParams(format!(
                "cardinality bounds must have one entry per task ({n_tasks})"
            )));
        }
        for m in 0..n_tasks {
            if self.n_min[m] > self.n_max[m] || self.n_max[m] > n_robots {
                return Err(AllocError::InvalidParams(format!(
                    "task {m}: need 0 <= n_min <= n_max <= {n_robots}, got {} and {}",
                    self.n_min[m], self.n_max[m]
                )));
            }
        }
        if !(self.c >= 0.0 && self.l >= 0.0 && self.kappa > 0.0 && self.delta_max > 0.0) {
            return Err(AllocError::InvalidParams(String::from(
                "C and l must be non-negative, kappa and delta_max positive",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AllocError {
    #[error("no feasible allocation{}: {reason}", task.map(|t| format!(" (task {t})")).unwrap_or_default())]
    Infeasible { task: Option<usize>, reason: String },
    #[error("node budget exhausted before any feasible allocation was found")]
    Budget,
    #[error("instance too large for exhaustive enumeration ({0} candidates)")]
    TooLarge(u128),
    #[error("invalid allocator parameters: {0}")]
    InvalidParams(String),
}

/// One allocation instance: model, linearised tasks and weights.
#[derive(Debug, Clone)]
pub struct AllocationProblem<'a> {
    pub model: &'a HeterogeneityModel,
    pub specializations: &'a [Specialization],
    pub rows: Vec<RobotRows>,
    pub n_inputs: usize,
    pub params: &'a AllocatorParams,
    pub priorities: PriorityConstraintSet,
}

/// Frames of every task for the team at `x`, with `current` deciding membership.
pub fn task_frames(tasks: &[TaskSpec], x: &Ensemble, t: f64, current: &Allocation) -> Vec<TaskFrame> {
    tasks
        .iter()
        .enumerate()
        .map(|(m, task)| task.frame(x, t, &current.members(m)))
        .collect()
}

impl<'a> AllocationProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a HeterogeneityModel,
        specializations: &'a [Specialization],
        tasks: &[TaskSpec],
        dynamics: &dyn Dynamics,
        x: &Ensemble,
        t: f64,
        params: &'a AllocatorParams,
        current: &Allocation,
    ) -> Self {
        let frames = task_frames(tasks, x, t, current);
        let rows = (0..x.len())
            .map(|i| robot_rows(tasks, &frames, dynamics, params.gamma, i, x.robot(i), t))
            .collect();
        Self::from_rows(model, specializations, rows, dynamics.input_dim(), params)
    }

    pub fn from_rows(
        model: &'a HeterogeneityModel,
        specializations: &'a [Specialization],
        rows: Vec<RobotRows>,
        n_inputs: usize,
        params: &'a AllocatorParams,
    ) -> Self {
        let priorities = build_priority_constraints(model.n_tasks().max(1), params.kappa, params.delta_max);
        Self {
            model,
            specializations,
            rows,
            n_inputs,
            params,
            priorities,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.model.n_tasks()
    }

    pub fn n_robots(&self) -> usize {
        self.model.n_robots()
    }

    fn block(&self) -> usize {
        self.n_inputs + 2 * self.n_tasks()
    }

    /// Whether an allocation meets the capability demand and the cardinality bounds.
    pub fn admits(&self, alloc: &Allocation) -> bool {
        let n_t = self.n_tasks();
        (0..n_t).all(|m| {
            let k = alloc.count(m);
            k >= self.params.n_min[m] && k <= self.params.n_max[m]
        }) && check_feasible_assignment(self.model.capability_map(), self.model.requirements(), &alloc.task_sets(n_t))
    }

    /// Joint problem over `[u_i, delta_i, alpha_i]` blocks with `lb <= alpha <= ub`.
    ///
    /// `lb` and `ub` are indexed `task * n_robots + robot`.
    pub fn relaxation(&self, lb: &[bool], ub: &[bool]) -> QpProblem {
        let (n_t, n_r, n_u) = (self.n_tasks(), self.n_robots(), self.n_inputs);
        let b = self.block();
        let n = b * n_r;
        let p = self.params;
        let u_at = |i: usize, j: usize| i * b + j;
        let d_at = |i: usize, m: usize| i * b + n_u + m;
        let a_at = |i: usize, m: usize| i * b + n_u + n_t + m;
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n_r {
            let s = &self.specializations[i];
            let proj = s.projector();
            for j in 0..n_u {
                q[(u_at(i, j), u_at(i, j))] = 2.0;
            }
            for m in 0..n_t {
                q[(d_at(i, m), d_at(i, m))] = 2.0 * p.l * s.get(m);
                q[(a_at(i, m), a_at(i, m))] = 2.0 * p.c * proj[m];
            }
        }
        let mut g: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let pairs = self.priorities.pairs();
        let kappa = self.priorities.kappa();
        for i in 0..n_r {
            let rows = &self.rows[i];
            for m in 0..n_t {
                let mut r: Vec<(usize, f64)> = rows.input[m].iter().enumerate().map(|(j, &v)| (u_at(i, j), -v)).collect();
                r.push((d_at(i, m), -1.0));
                g.push((r, rows.rhs[m]));
            }
            for &(hi, lo) in pairs {
                g.push((
                    vec![(d_at(i, hi), 1.0), (d_at(i, lo), -1.0 / kappa), (a_at(i, hi), p.delta_max)],
                    p.delta_max,
                ));
            }
            for m in 0..n_t {
                g.push((vec![(d_at(i, m), -1.0)], 0.0));
                g.push((vec![(d_at(i, m), 1.0)], p.delta_max));
                let k = m * n_r + i;
                g.push((vec![(a_at(i, m), -1.0)], -f64::from(u8::from(lb[k]))));
                g.push((vec![(a_at(i, m), 1.0)], f64::from(u8::from(ub[k]))));
            }
            g.push(((0..n_t).map(|m| (a_at(i, m), 1.0)).collect(), 1.0));
        }
        let f = self.model.capability_map();
        let t = self.model.requirements();
        for m in 0..n_t {
            for k in 0..t.ncols() {
                if t[(m, k)] > 0 {
                    g.push((
                        (0..n_r).map(|i| (a_at(i, m), -f[(k, i)])).collect(),
                        -f64::from(t[(m, k)]) + KRON_TOL,
                    ));
                }
            }
            g.push(((0..n_r).map(|i| (a_at(i, m), 1.0)).collect(), p.n_max[m] as f64));
            g.push(((0..n_r).map(|i| (a_at(i, m), -1.0)).collect(), -(p.n_min[m] as f64)));
        }
        let mut gm = DMatrix::zeros(g.len(), n);
        let mut d = DVector::zeros(g.len());
        for (r, (coef, rhs)) in g.into_iter().enumerate() {
            for (j, v) in coef {
                gm[(r, j)] = v;
            }
            d[r] = rhs;
        }
        QpProblem::new(q, DVector::zeros(n), gm, d).expect("relaxation is well formed")
    }

    /// Joint problem over `[u_i, delta_i]` blocks with `alpha` substituted.
    ///
    /// Returns the problem and the constant penalty term it leaves out.
    pub fn fixed(&self, alloc: &Allocation) -> (QpProblem, f64) {
        let (n_t, n_r, n_u) = (self.n_tasks(), self.n_robots(), self.n_inputs);
        let b = n_u + n_t;
        let n = b * n_r;
        let p = self.params;
        let pairs = self.priorities.pairs();
        let kappa = self.priorities.kappa();
        let rows_per = n_t + pairs.len() + 2 * n_t;
        let mut q = DMatrix::zeros(n, n);
        let mut g = DMatrix::zeros(rows_per * n_r, n);
        let mut d = DVector::zeros(rows_per * n_r);
        let mut penalty = 0.0;
        for i in 0..n_r {
            let s = &self.specializations[i];
            if let Some(m) = alloc.0[i] {
                penalty += p.c * s.projector()[m];
            }
            for j in 0..n_u {
                q[(i * b + j, i * b + j)] = 2.0;
            }
            for m in 0..n_t {
                q[(i * b + n_u + m, i * b + n_u + m)] = 2.0 * p.l * s.get(m);
            }
            let mut r = i * rows_per;
            for m in 0..n_t {
                for j in 0..n_u {
                    g[(r, i * b + j)] = -self.rows[i].input[m][j];
                }
                g[(r, i * b + n_u + m)] = -1.0;
                d[r] = self.rows[i].rhs[m];
                r += 1;
            }
            for &(hi, lo) in pairs {
                g[(r, i * b + n_u + hi)] = 1.0;
                g[(r, i * b + n_u + lo)] = -1.0 / kappa;
                d[r] = if alloc.0[i] == Some(hi) { 0.0 } else { p.delta_max };
                r += 1;
            }
            for m in 0..n_t {
                g[(r, i * b + n_u + m)] = -1.0;
                g[(r + 1, i * b + n_u + m)] = 1.0;
                d[r + 1] = p.delta_max;
                r += 2;
            }
        }
        let problem = QpProblem::new(q, DVector::zeros(n), g, d).expect("joint problem is well formed");
        (problem, penalty)
    }

    fn alpha_of(&self, z: &DVector<f64>) -> Vec<f64> {
        let (n_t, n_r) = (self.n_tasks(), self.n_robots());
        let b = self.block();
        let mut a = vec![0.0; n_t * n_r];
        for m in 0..n_t {
            for i in 0..n_r {
                a[m * n_r + i] = z[i * b + self.n_inputs + n_t + m];
            }
        }
        a
    }

    fn diagnose(&self) -> AllocError {
        let (n_t, n_r) = (self.n_tasks(), self.n_robots());
        let f = self.model.capability_map();
        let t = self.model.requirements();
        for m in 0..n_t {
            for k in 0..t.ncols() {
                let supply: f64 = (0..n_r).map(|i| f[(k, i)]).sum();
                if supply + KRON_TOL < f64::from(t[(m, k)]) {
                    return AllocError::Infeasible {
                        task: Some(m),
                        reason: format!(
                            "capability {k} is needed {} times but the team supplies {supply}",
                            t[(m, k)]
                        ),
                    };
                }
            }
        }
        let minima: usize = self.params.n_min.iter().sum();
        if minima > n_r {
            return AllocError::Infeasible {
                task: None,
                reason: format!("cardinality minima add up to {minima} but there are {n_r} robots"),
            };
        }
        AllocError::Infeasible {
            task: None,
            reason: String::from("tasks cannot be covered simultaneously with one task per robot"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSolution {
    pub alpha: Allocation,
    pub u: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub objective: f64,
    pub nodes: usize,
    /// False when the search stopped early; `alpha` is then the best found.
    pub optimal: bool,
    /// Filled in by callers that own a clock.
    pub wall_time: Option<Duration>,
    /// Largest KKT residual among the per-robot solves behind `u`.
    pub kkt_max: f64,
}

impl AllocationSolution {
    pub fn alpha_matrix(&self, n_tasks: usize) -> DMatrix<f64> {
        self.alpha.matrix(n_tasks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSettings {
    pub max_nodes: usize,
    /// Bound nodes with the convex relaxation as well as the separable bound.
    pub relaxation: bool,
    pub integrality_tol: f64,
    /// Relative optimality gap used for pruning.
    pub gap_tol: f64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            max_nodes: 100_000,
            relaxation: false,
            integrality_tol: 1e-7,
            gap_tol: 1e-9,
        }
    }
}

/// Per-robot option costs: index 0 is idle, `m + 1` is task `m`.
struct OptionTable {
    outputs: Vec<Vec<ExecutionOutput>>,
    cost: Vec<Vec<f64>>,
}

impl OptionTable {
    fn build(problem: &AllocationProblem<'_>) -> Self {
        let (n_t, n_r) = (problem.n_tasks(), problem.n_robots());
        let mut solver = QpSolver::default();
        let mut outputs = Vec::with_capacity(n_r);
        let mut cost = Vec::with_capacity(n_r);
        for i in 0..n_r {
            let spec = &problem.specializations[i];
            let proj = spec.projector();
            let mut outs = Vec::with_capacity(n_t + 1);
            let mut costs = Vec::with_capacity(n_t + 1);
            for choice in 0..=n_t {
                let mut alpha = vec![0.0; n_t];
                let mut penalty = 0.0;
                if choice > 0 {
                    alpha[choice - 1] = 1.0;
                    penalty = problem.params.c * proj[choice - 1];
                }
                let out = solve_robot(
                    &mut solver,
                    &problem.rows[i],
                    problem.n_inputs,
                    &alpha,
                    spec,
                    &problem.priorities,
                    problem.params.l,
                    problem.params.delta_max,
                    None,
                );
                costs.push(out.objective + penalty);
                outs.push(out);
            }
            outputs.push(outs);
            cost.push(costs);
        }
        Self { outputs, cost }
    }

    fn value(&self, alloc: &Allocation) -> f64 {
        alloc
            .0
            .iter()
            .enumerate()
            .map(|(i, c)| self.cost[i][c.map_or(0, |m| m + 1)])
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Node {
    lb: Vec<bool>,
    ub: Vec<bool>,
    bound: f64,
    id: usize,
    warm: Option<WarmStart>,
}

struct Search<'p, 'a> {
    problem: &'p AllocationProblem<'a>,
    table: OptionTable,
    settings: SearchSettings,
    best: Option<(f64, Allocation)>,
    solver: QpSolver,
}

impl Search<'_, '_> {
    /// Choices still open to robot `i` (0 = idle, `m + 1` = task `m`).
    fn allowed(&self, node: &Node, i: usize) -> Vec<usize> {
        let (n_t, n_r) = (self.problem.n_tasks(), self.problem.n_robots());
        let forced: Vec<usize> = (0..n_t).filter(|&m| node.lb[m * n_r + i]).collect();
        match forced.len() {
            0 => core::iter::once(0)
                .chain((0..n_t).filter(|&m| node.ub[m * n_r + i]).map(|m| m + 1))
                .collect(),
            1 => vec![forced[0] + 1],
            _ => Vec::new(),
        }
    }

    /// Separable lower bound, or `None` when some necessary condition fails.
    fn separable_bound(&self, node: &Node) -> Option<(f64, Vec<Vec<usize>>)> {
        let p = self.problem;
        let (n_t, n_r) = (p.n_tasks(), p.n_robots());
        let mut total = 0.0;
        let mut options = Vec::with_capacity(n_r);
        for i in 0..n_r {
            let opts = self.allowed(node, i);
            let best = opts.iter().map(|&c| self.table.cost[i][c]).fold(f64::INFINITY, f64::min);
            if !best.is_finite() {
                return None;
            }
            total += best;
            options.push(opts);
        }
        let f = p.model.capability_map();
        let t = p.model.requirements();
        for m in 0..n_t {
            let possible: Vec<usize> = (0..n_r).filter(|&i| options[i].contains(&(m + 1))).collect();
            let forced = (0..n_r).filter(|&i| options[i] == [m + 1]).count();
            if possible.len() < p.params.n_min[m] || forced > p.params.n_max[m] {
                return None;
            }
            for k in 0..t.ncols() {
                let supply: f64 = possible.iter().map(|&i| f[(k, i)]).sum();
                if supply + KRON_TOL < f64::from(t[(m, k)]) {
                    return None;
                }
            }
        }
        Some((total, options))
    }

    fn prunes(&self, bound: f64) -> bool {
        match &self.best {
            Some((best, _)) => bound >= best - self.settings.gap_tol * best.abs().max(1.0),
            None => false,
        }
    }

    fn offer(&mut self, alloc: Allocation) {
        if !self.problem.admits(&alloc) {
            return;
        }
        let value = self.table.value(&alloc);
        let better = match &self.best {
            Some((best, _)) => value < *best,
            None => true,
        };
        if better {
            self.best = Some((value, alloc));
        }
    }

    /// Processes a node; returns the children to queue.
    fn expand(&mut self, node: Node) -> Vec<Node> {
        let p = self.problem;
        let (n_t, n_r) = (p.n_tasks(), p.n_robots());
        let Some((sep, options)) = self.separable_bound(&node) else {
            return Vec::new();
        };
        if self.prunes(sep) {
            return Vec::new();
        }
        if options.iter().all(|o| o.len() == 1) {
            let alloc = Allocation(options.iter().map(|o| o[0].checked_sub(1)).collect());
            self.offer(alloc);
            return Vec::new();
        }
        let mut bound = sep.max(node.bound);
        let mut warm = None;
        let branch_on = if self.settings.relaxation {
            let relax = p.relaxation(&node.lb, &node.ub);
            let sol = self.solver.solve(&relax, node.warm.as_ref());
            if sol.status == QpStatus::Infeasible {
                return Vec::new();
            }
            if sol.status == QpStatus::Optimal {
                bound = bound.max(sol.objective);
                if self.prunes(bound) {
                    return Vec::new();
                }
                warm = Some(sol.warm_start());
                let alpha = p.alpha_of(&sol.z);
                let mut pick: Option<(usize, f64)> = None;
                for (k, &a) in alpha.iter().enumerate() {
                    if node.lb[k] == node.ub[k] {
                        continue;
                    }
                    let frac = a.min(1.0 - a);
                    if frac > self.settings.integrality_tol && pick.is_none_or(|(_, f)| frac > f) {
                        pick = Some((k, frac));
                    }
                }
                match pick {
                    Some((k, _)) => Some((k, alpha[k] >= 0.5)),
                    None => {
                        let alloc = Allocation(
                            (0..n_r)
                                .map(|i| (0..n_t).find(|&m| alpha[m * n_r + i] > 0.5))
                                .collect(),
                        );
                        self.offer(alloc);
                        // the relaxation is exact here, so nothing below can do better
                        return Vec::new();
                    }
                }
            } else {
                None
            }
        } else {
            None
        };
        let (k, one_first) = match branch_on {
            Some(b) => b,
            None => self.cheapest_open_entry(&node, &options),
        };
        let mut down = Node {
            ub: node.ub.clone(),
            lb: node.lb.clone(),
            bound,
            id: 0,
            warm: warm.clone(),
        };
        down.ub[k] = false;
        let mut up = Node {
            lb: node.lb,
            ub: node.ub,
            bound,
            id: 0,
            warm,
        };
        up.lb[k] = true;
        // the child to explore first goes last (stack order)
        if one_first {
            vec![down, up]
        } else {
            vec![up, down]
        }
    }

    /// Branching entry without a relaxation: the cheapest open option of the
    /// first undecided robot.
    fn cheapest_open_entry(&self, node: &Node, options: &[Vec<usize>]) -> (usize, bool) {
        let n_r = self.problem.n_robots();
        let i = options.iter().position(|o| o.len() > 1).expect("some robot is undecided");
        let best = options[i]
            .iter()
            .copied()
            .min_by(|&a, &b| self.table.cost[i][a].total_cmp(&self.table.cost[i][b]))
            .expect("non-empty");
        match best {
            0 => {
                let m = options[i].iter().find(|&&c| c > 0).expect("an open task") - 1;
                (m * n_r + i, false)
            }
            c => {
                debug_assert!(!node.lb[(c - 1) * n_r + i]);
                ((c - 1) * n_r + i, true)
            }
        }
    }
}

/// Global optimum with default search settings and no hint.
pub fn solve_allocation(problem: &AllocationProblem<'_>) -> Result<AllocationSolution, AllocError> {
    solve_allocation_with(problem, &SearchSettings::default(), None, &mut |_| false)
}

/// Branch and bound with an optional incumbent hint and a stop callback.
///
/// `stop` is asked once per node with the node count; returning true ends the
/// search with the best allocation found so far flagged as not optimal.
pub fn solve_allocation_with(
    problem: &AllocationProblem<'_>,
    settings: &SearchSettings,
    hint: Option<&Allocation>,
    stop: &mut dyn FnMut(usize) -> bool,
) -> Result<AllocationSolution, AllocError> {
    let (n_t, n_r) = (problem.n_tasks(), problem.n_robots());
    problem.params.validate(n_t, n_r)?;
    let mut search = Search {
        problem,
        table: OptionTable::build(problem),
        settings: *settings,
        best: None,
        solver: QpSolver::default(),
    };
    if let Some(h) = hint {
        if h.n_robots() == n_r && h.0.iter().all(|a| a.is_none_or(|m| m < n_t)) {
            search.offer(h.clone());
        }
    }
    let root = Node {
        lb: vec![false; n_t * n_r],
        ub: vec![true; n_t * n_r],
        bound: f64::NEG_INFINITY,
        id: 0,
        warm: None,
    };
    let mut open = vec![root];
    let mut next_id = 1;
    let mut nodes = 0;
    let mut complete = true;
    while !open.is_empty() {
        if nodes >= settings.max_nodes || stop(nodes) {
            complete = false;
            break;
        }
        let pick = if search.best.is_none() {
            open.len() - 1
        } else {
            let mut at = 0;
            for (j, n) in open.iter().enumerate() {
                let cur = &open[at];
                if n.bound < cur.bound || (n.bound == cur.bound && n.id < cur.id) {
                    at = j;
                }
            }
            at
        };
        let node = open.swap_remove(pick);
        nodes += 1;
        if search.prunes(node.bound) {
            continue;
        }
        for mut child in search.expand(node) {
            child.id = next_id;
            next_id += 1;
            open.push(child);
        }
    }
    let Some((objective, alpha)) = search.best.take() else {
        return Err(if complete { problem.diagnose() } else { AllocError::Budget });
    };
    let mut u = Vec::with_capacity(n_r);
    let mut delta = Vec::with_capacity(n_r);
    let mut kkt_max: f64 = 0.0;
    for i in 0..n_r {
        let out = &search.table.outputs[i][alpha.0[i].map_or(0, |m| m + 1)];
        u.push(out.u.clone());
        delta.push(out.delta.clone());
        kkt_max = kkt_max.max(out.kkt.max());
    }
    Ok(AllocationSolution {
        alpha,
        u,
        delta,
        objective,
        nodes,
        optimal: complete,
        wall_time: None,
        kkt_max,
    })
}

/// Exhaustive oracle: every admissible allocation, each solved as one joint QP.
pub fn brute_force_allocation(problem: &AllocationProblem<'_>) -> Result<AllocationSolution, AllocError> {
    let (n_t, n_r) = (problem.n_tasks(), problem.n_robots());
    problem.params.validate(n_t, n_r)?;
    let candidates = (n_t as u128 + 1).checked_pow(n_r as u32).unwrap_or(u128::MAX);
    if candidates > 100_000 {
        return Err(AllocError::TooLarge(candidates));
    }
    let mut solver = QpSolver::default();
    let mut best: Option<(f64, Allocation, DVector<f64>)> = None;
    let mut visited = 0;
    let mut digits = vec![0usize; n_r];
    loop {
        let alloc = Allocation(digits.iter().map(|&c| c.checked_sub(1)).collect());
        if problem.admits(&alloc) {
            visited += 1;
            let (joint, penalty) = problem.fixed(&alloc);
            let sol = solver.solve(&joint, None);
            let value = sol.objective + penalty;
            if sol.status == QpStatus::Optimal && best.as_ref().is_none_or(|(b, _, _)| value < *b) {
                best = Some((value, alloc, sol.z));
            }
        }
        let mut pos = 0;
        while pos < n_r {
            digits[pos] += 1;
            if digits[pos] <= n_t {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
        if pos == n_r {
            break;
        }
    }
    let Some((objective, alpha, z)) = best else {
        return Err(problem.diagnose());
    };
    let b = problem.n_inputs + n_t;
    let u = (0..n_r).map(|i| z.rows(i * b, problem.n_inputs).iter().copied().collect()).collect();
    let delta = (0..n_r)
        .map(|i| z.rows(i * b + problem.n_inputs, n_t).iter().copied().collect())
        .collect();
    Ok(AllocationSolution {
        alpha,
        u,
        delta,
        objective,
        nodes: visited,
        optimal: true,
        wall_time: None,
        kkt_max: 0.0,
    })
}


#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;
    use crate::dynamics::SingleIntegrator;
    use crate::executor::execute_step;
    use crate::executor::ExecutionInput;
    use crate::model::Hyperedge;

    #[test]
    fn priority_rows() {
        assert!(build_priority_constraints(1, 1e6, 1e3).is_empty());
        assert_eq!(build_priority_constraints(3, 1e6, 1e3).len(), 6);
        let p = build_priority_constraints(2, 10.0, 1.0);
        assert!(p.is_satisfied(&[0.05, 1.0], &[1.0, 0.0]));
        assert!(!p.is_satisfied(&[1.0, 0.05], &[1.0, 0.0]));
    }

    #[test]
    fn priority_implications() {
        let p = build_priority_constraints(3, 100.0, 2.0);
        // selected task: d_m <= d_n / kappa
        assert!(p.is_satisfied(&[0.01, 1.0, 1.5], &[1.0, 0.0, 0.0]));
        assert!(!p.is_satisfied(&[0.02, 1.0, 1.5], &[1.0, 0.0, 0.0]));
        // nothing selected: d_m <= d_max + d_n / kappa
        assert!(p.is_satisfied(&[2.0, 2.0, 2.0], &[0.0, 0.0, 0.0]));
        assert!(!p.is_satisfied(&[2.1, 0.0, 0.0], &[0.0, 0.0, 0.0]));
    }

    #[test]
    fn nearest_capable_robots_are_picked() {
        let inst = four_robot_goto(0);
        let sol = solve_allocation(&inst.problem()).unwrap();
        assert_eq!(sol.alpha, Allocation(vec![None, Some(0), None, Some(1)]));
        assert!(sol.optimal);
    }

    #[test]
    fn cardinality_minimum_recruits_second_robot() {
        let inst = four_robot_goto(2);
        let sol = solve_allocation(&inst.problem()).unwrap();
        assert_eq!(sol.alpha, Allocation(vec![None, Some(0), Some(0), Some(1)]));
    }

    #[test]
    fn matches_oracle_on_fixed_instances() {
        for n_min in [0, 2] {
            let inst = four_robot_goto(n_min);
            let p = inst.problem();
            let bb = solve_allocation(&p).unwrap();
            let bf = brute_force_allocation(&p).unwrap();
            assert!((bb.objective - bf.objective).abs() <= 1e-6 * bf.objective.abs().max(1.0));
            assert_eq!(bb.alpha, bf.alpha);
        }
    }

    #[test]
    fn separable_search_agrees_with_relaxation_search() {
        for seed in 0..30 {
            let inst = random_instance(seed);
            let p = inst.problem();
            let settings = SearchSettings {
                relaxation: true,
                ..SearchSettings::default()
            };
            let with = solve_allocation_with(&p, &settings, None, &mut |_| false).unwrap();
            let without = solve_allocation(&p).unwrap();
            assert!((with.objective - without.objective).abs() <= 1e-6 * with.objective.abs().max(1.0));
        }
    }

    #[test]
    fn single_robot_matches_executor() {
        let t = DMatrix::from_row_slice(1, 1, &[1]);
        let a = DMatrix::from_element(1, 1, true);
        let model = HeterogeneityModel::new(t, a, vec![vec![Hyperedge::unit(vec![0])]]).unwrap();
        let specs = model.specializations().to_vec();
        let tasks = vec![TaskSpec::goto([0.0, 0.0])];
        let x = Ensemble::from_robots(&[[1.0, 0.5]]);
        let params = AllocatorParams::new(1, 1);
        let d = SingleIntegrator::new(2);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &Allocation::idle(1));
        let sol = solve_allocation(&p).unwrap();
        assert_eq!(sol.alpha, Allocation(vec![Some(0)]));
        let frames = [TaskFrame::Local];
        let out = execute_step(&ExecutionInput {
            robot: 0,
            tasks: &tasks,
            frames: &frames,
            dynamics: &d,
            x: &x,
            t: 0.0,
            alpha: &[1.0],
            specialization: &specs[0],
            priorities: &p.priorities,
            gamma: params.gamma,
            l: params.l,
            delta_max: params.delta_max,
        });
        for j in 0..2 {
            assert!((out.u[j] - sol.u[0][j]).abs() <= 1e-6);
        }
    }

    #[test]
    fn missing_capability_is_reported() {
        let mut inst = four_robot_goto(0);
        inst.model = inst.model.apply_feature_failure(3, 5).unwrap();
        inst.specs = inst.model.specializations().to_vec();
        let err = solve_allocation(&inst.problem()).unwrap_err();
        assert!(matches!(err, AllocError::Infeasible { task: Some(1), .. }), "{err}");
        let err = brute_force_allocation(&inst.problem()).unwrap_err();
        assert!(matches!(err, AllocError::Infeasible { task: Some(1), .. }));
    }

    #[test]
    fn lone_versatile_robot_takes_cheaper_task() {
        let t = DMatrix::from_row_slice(2, 1, &[0, 0]);
        let a = DMatrix::from_element(1, 1, true);
        let model = HeterogeneityModel::new(t, a, vec![vec![Hyperedge::unit(vec![0])]]).unwrap();
        let specs = vec![Specialization::ones(2)];
        let tasks = vec![TaskSpec::goto([1.0, 0.0]), TaskSpec::goto([-0.3, 0.0])];
        let x = Ensemble::from_robots(&[[0.0, 0.0]]);
        let d = SingleIntegrator::new(2);
        let idle = Allocation::idle(1);
        let mut params = AllocatorParams::new(2, 1);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &idle);
        // nothing is required, so staying idle is cheapest
        assert_eq!(solve_allocation(&p).unwrap().alpha, Allocation(vec![None]));
        let table = OptionTable::build(&p);
        assert!(table.cost[0][2] < table.cost[0][1]);
        params.n_min = vec![0, 1];
        let near = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &idle);
        let near = solve_allocation(&near).unwrap();
        params.n_min = vec![1, 0];
        let far = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &idle);
        let far = solve_allocation(&far).unwrap();
        assert_eq!(near.alpha, Allocation(vec![Some(1)]));
        assert_eq!(far.alpha, Allocation(vec![Some(0)]));
        assert!(near.objective < far.objective);
    }

    #[test]
    fn budget_stop_returns_incumbent_or_error() {
        let inst = four_robot_goto(0);
        let p = inst.problem();
        let hint = Allocation(vec![Some(0), None, None, Some(1)]);
        let sol = solve_allocation_with(&p, &SearchSettings::default(), Some(&hint), &mut |_| true).unwrap();
        assert!(!sol.optimal);
        assert_eq!(sol.alpha, hint);
        let err = solve_allocation_with(&p, &SearchSettings::default(), None, &mut |_| true).unwrap_err();
        assert_eq!(err, AllocError::Budget);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let t = DMatrix::from_row_slice(2, 1, &[0, 0]);
        let a = DMatrix::from_element(1, 12, true);
        let model = HeterogeneityModel::new(t, a, vec![vec![Hyperedge::unit(vec![0])]]).unwrap();
        let specs = model.specializations().to_vec();
        let params = AllocatorParams::new(2, 12);
        let rows = vec![
            RobotRows {
                value: vec![0.0, 0.0],
                rhs: vec![0.0, 0.0],
                input: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            };
            12
        ];
        let p = AllocationProblem::from_rows(&model, &specs, rows, 2, &params);
        assert!(matches!(brute_force_allocation(&p), Err(AllocError::TooLarge(_))));
    }

    #[test]
    fn invalid_cardinality_bounds() {
        let mut inst = four_robot_goto(0);
        inst.params.n_min[0] = 5;
        assert!(matches!(solve_allocation(&inst.problem()), Err(AllocError::InvalidParams(_))));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        for seed in 100..200 {
            let inst = random_instance(seed);
            let p = inst.problem();
            let bb = solve_allocation(&p).unwrap();
            let bf = brute_force_allocation(&p).unwrap();
            let tol = 1e-6 * bf.objective.abs().max(1.0);
            assert!((bb.objective - bf.objective).abs() <= tol, "seed {seed}: {} vs {}", bb.objective, bf.objective);
            assert!(p.admits(&bb.alpha));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn consistent_assignment_avoids_penalty(seed in 0u64..10_000) {
            let mut inst = random_instance(seed);
            inst.params.c = 1e6;
            inst.params.l = 1e-6;
            let p = inst.problem();
            let sol = solve_allocation(&p).unwrap();
            let n_t = p.n_tasks();
            // is there an admissible allocation using only specialised pairs?
            let clean = (0..(n_t + 1).pow(p.n_robots() as u32)).any(|code| {
                let mut c = code;
                let alloc = Allocation((0..p.n_robots()).map(|_| { let d = c % (n_t + 1); c /= n_t + 1; d.checked_sub(1) }).collect());
                p.admits(&alloc) && alloc.0.iter().enumerate().all(|(i, a)| a.is_none_or(|m| inst.specs[i].get(m) > 0.0))
            });
            let penalty: f64 = sol.alpha.0.iter().enumerate()
                .map(|(i, a)| a.map_or(0.0, |m| inst.specs[i].projector()[m]))
                .sum();
            if clean {
                proptest::prop_assert_eq!(penalty, 0.0);
            }
        }

        #[test]
        fn dropping_minima_never_adds_robots(seed in 0u64..10_000) {
            let mut inst = random_instance(seed);
            let with = solve_allocation(&inst.problem()).unwrap();
            inst.params.n_min.iter_mut().for_each(|n| *n = 0);
            let without = solve_allocation(&inst.problem()).unwrap();
            let busy = |a: &Allocation| a.0.iter().filter(|x| x.is_some()).count();
            proptest::prop_assert!(busy(&without.alpha) <= busy(&with.alpha));
        }

        #[test]
        fn idle_robots_spend_nothing(seed in 0u64..10_000) {
            let mut inst = random_instance(seed);
            inst.params.l = 1e-12;
            let sol = solve_allocation(&inst.problem()).unwrap();
            for (i, a) in sol.alpha.0.iter().enumerate() {
                if a.is_none() {
                    let norm = sol.u[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                    proptest::prop_assert!(norm <= 1e-9, "robot {} idle with |u| = {}", i, norm);
                }
            }
        }
    }
}
