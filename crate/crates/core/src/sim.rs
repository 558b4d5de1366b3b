//! Deterministic simulation on a virtual clock.
//!
//! Two drivers share one step pipeline ([`Simulation`]). The centralized
//! driver solves the full allocation problem every step and applies its
//! inputs. The mixed driver publishes allocations with a latency of `n` steps
//! (a zero-order hold in between) while every robot solves its own small
//! problem each step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

use crate::allocator::{
    build_priority_constraints, solve_allocation_with, task_frames, AllocError, Allocation, AllocationProblem,
    AllocationSolution, AllocatorParams, PriorityConstraintSet, SearchSettings,
};
use crate::analysis::{lyapunov_from_values, task_values};
use crate::dynamics::{Dynamics, Ensemble, SingleIntegrator};
use crate::executor::{robot_rows, solve_robot, RobotRows};
use crate::model::{HeterogeneityModel, ModelError, Specialization};
use crate::qp::QpSolver;
use crate::resilience::{
    apply_endogenous, exogenous_update, refresh_specializations, DisturbanceEvent, DisturbanceKind, ProgressLedger,
    ResilienceError,
};
use crate::tasks::{TaskFrame, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Inside the disk the input of affected robots is scaled by `mobility`.
    LowFriction,
    /// Affected robots cannot enter the disk; a step that would end inside is cancelled.
    Barrier,
}

/// A part of the world the allocator knows nothing about.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousField {
    pub kind: FieldKind,
    pub center: [f64; 2],
    pub radius: f64,
    pub robots: Vec<usize>,
    /// Input scale for affected robots inside a low-friction disk.
    pub mobility: f64,
}

impl ExogenousField {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) < self.radius * self.radius
    }

    pub fn affects(&self, robot: usize) -> bool {
        self.robots.contains(&robot)
    }
}

/// One Euler step of the true dynamics of `robot`, fields included.
pub fn apply_disturbed_dynamics(
    dynamics: &dyn Dynamics,
    robot: usize,
    own: &[f64],
    u: &[f64],
    dt: f64,
    fields: &[ExogenousField],
) -> Vec<f64> {
    let here = [own[0], own[1]];
    let mobility = fields
        .iter()
        .filter(|f| f.kind == FieldKind::LowFriction && f.affects(robot) && f.contains(here))
        .fold(1.0, |m: f64, f| m.min(f.mobility));
    let next = dynamics.euler_step(own, u, dt, mobility);
    let blocked = fields
        .iter()
        .any(|f| f.kind == FieldKind::Barrier && f.affects(robot) && f.contains([next[0], next[1]]));
    if blocked {
        own.to_vec()
    } else {
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MilestoneKind {
    /// The allocation in force equals this one.
    Allocation(Allocation),
    /// At or after `after`, `h` of the task over its allocated robots is at
    /// least `-tol`.
    TaskDone { task: usize, tol: f64, after: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Milestone {
    pub label: String,
    pub time: f64,
    pub kind: MilestoneKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: HeterogeneityModel,
    pub initial: Ensemble,
    pub tasks: Vec<TaskSpec>,
    pub params: AllocatorParams,
    pub search: SearchSettings,
    pub events: Vec<DisturbanceEvent>,
    pub fields: Vec<ExogenousField>,
    pub dt: f64,
    pub duration: f64,
    /// Allocation latency of the mixed driver, in steps.
    pub latency: usize,
    /// Gain of the specialization decay; `None` switches decay off.
    pub beta: Option<f64>,
    /// Positions are clamped into this rectangle when set.
    pub bounds: Option<([f64; 2], [f64; 2])>,
    /// Carried into traces; the simulation itself draws no random numbers.
    pub seed: u64,
    pub milestones: Vec<Milestone>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("allocation failed at step {step} (t = {t:.3} s): {source}")]
    Allocation { step: usize, t: f64, source: AllocError },
    #[error("disturbance at t = {t} s could not be applied: {source}")]
    Event { t: f64, source: ModelError },
}

impl SimError {
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            SimError::Allocation {
                source: AllocError::Infeasible { .. },
                ..
            }
        )
    }
}

impl Scenario {
    pub fn n_robots(&self) -> usize {
        self.initial.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn dynamics(&self) -> SingleIntegrator {
        SingleIntegrator::new(self.initial.state_dim())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("time step must be positive, got {}", self.dt));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.latency == 0 {
            return bad(String::from("allocation latency must be at least one step"));
        }
        if self.initial.state_dim() < 2 {
            return bad(String::from("robot states need at least a planar position"));
        }
        if self.model.n_robots() != self.n_robots() {
            return bad(format!(
                "model has {} robots but {} initial states are given",
                self.model.n_robots(),
                self.n_robots()
            ));
        }
        if self.model.n_tasks() != self.n_tasks() {
            return bad(format!(
                "model has {} tasks but {} task definitions are given",
                self.model.n_tasks(),
                self.n_tasks()
            ));
        }
        for (m, t) in self.tasks.iter().enumerate() {
            if t.min_state_dim() > self.initial.state_dim() {
                return bad(format!("task {m} needs a state of dimension {}", t.min_state_dim()));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("decay gain must be positive, got {b}"));
            }
        }
        if let Err(e) = self.params.validate(self.n_tasks(), self.n_robots()) {
            return bad(format!("{e}"));
        }
        for ev in &self.events {
            if !(ev.time >= 0.0) {
                return bad(format!("event time must be non-negative, got {}", ev.time));
            }
            let ok = match ev.kind {
                DisturbanceKind::FeatureFailure { robot, feature } => {
                    robot < self.n_robots() && feature < self.model.n_features()
                }
                DisturbanceKind::WeightChange { capability, edge, weight } => {
                    capability < self.model.n_capabilities()
                        && edge < self.model.hyperedges(capability).len()
                        && weight >= 0.0
                }
            };
            if !ok {
                return bad(format!("event at t = {} refers to a missing robot, feature or edge", ev.time));
            }
        }
        for f in &self.fields {
            if !(f.radius > 0.0) || !(0.0..=1.0).contains(&f.mobility) || f.robots.iter().any(|&r| r >= self.n_robots())
            {
                return bad(String::from(
                    "field needs a positive radius, a mobility in [0, 1] and valid robot indices",
                ));
            }
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo[0] < hi[0] && lo[1] < hi[1]) {
                return bad(String::from("domain bounds must be a non-empty rectangle"));
            }
        }
        for ms in &self.milestones {
            match &ms.kind {
                MilestoneKind::Allocation(a) if a.n_robots() != self.n_robots() => {
                    return bad(format!("milestone '{}' has the wrong number of robots", ms.label));
                }
                MilestoneKind::TaskDone { task, .. } if *task >= self.n_tasks() => {
                    return bad(format!("milestone '{}' refers to a missing task", ms.label));
                }
                _ => {}
            }
        }
        let worst = self.largest_task_value();
        if worst > self.params.delta_max {
            return bad(format!(
                "slack bound {} is below the largest task value magnitude {worst:.3}; the executors could become infeasible",
                self.params.delta_max
            ));
        }
        Ok(())
    }

    /// Largest `|h_{m,i}|` over a sample of states: the initial ones and, when
    /// bounds are set, a grid over the domain at a few times.
    ///
    /// Coverage tasks are sampled at the initial state only, since their
    /// value depends on the whole team.
    pub fn largest_task_value(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let idle = Allocation::idle(self.n_robots());
        let times: Vec<f64> = (0..=4).map(|k| self.duration * k as f64 / 4.0).collect();
        for &t in &times {
            let frames = task_frames(&self.tasks, &self.initial, t, &idle);
            for (m, task) in self.tasks.iter().enumerate() {
                for i in 0..self.n_robots() {
                    worst = worst.max(task.robot_value(&frames[m], i, self.initial.robot(i), t).abs());
                }
                if let (Some((lo, hi)), TaskFrame::Local) = (self.bounds, &frames[m]) {
                    let mut state = vec![0.0; self.initial.state_dim()];
                    for a in 0..=8 {
                        for b in 0..=8 {
                            state[0] = lo[0] + (hi[0] - lo[0]) * a as f64 / 8.0;
                            state[1] = lo[1] + (hi[1] - lo[1]) * b as f64 / 8.0;
                            worst = worst.max(task.robot_value(&frames[m], 0, &state, t).abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Whether every task is one of the static go-to kind.
    pub fn only_static_tasks(&self) -> bool {
        self.tasks.iter().all(|t| matches!(t.kind, TaskKind::Goto { .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Disturbance(DisturbanceKind),
    /// The allocation in force changed.
    Reallocation { from: Allocation, to: Allocation },
    /// A field started to slow or stop the robot.
    Impeded { robot: usize },
    Clamped { robot: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step: usize,
    pub t: f64,
    pub kind: EventKind,
}

/// Everything recorded at one step, before the state is advanced.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub x: Ensemble,
    pub u: Vec<Vec<f64>>,
    /// Inputs an up-to-date allocation would have produced (compare runs).
    pub u_ref: Option<Vec<Vec<f64>>>,
    pub delta: Vec<Vec<f64>>,
    /// Allocation in force at this step.
    pub alpha: Allocation,
    /// `h_m` over the robots in `alpha`.
    pub h: Vec<f64>,
    pub v: f64,
    pub s: Vec<Vec<f64>>,
    /// Optimal allocation cost when the allocator ran at this step.
    pub cost: Option<f64>,
    pub nodes: usize,
    /// Largest KKT residual of the inputs applied at this step.
    pub kkt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Centralized,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub scenario: String,
    pub mode: Mode,
    pub latency: usize,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub events: Vec<TraceEvent>,
}

impl RunTrace {
    /// `max_i |u_i - u_ref_i|_inf` per step, when a reference was recorded.
    pub fn input_gap(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                r.u_ref.as_ref().map(|uref| {
                    r.u.iter()
                        .flatten()
                        .zip(uref.iter().flatten())
                        .fold(0.0, |a: f64, (p, q)| a.max((p - q).abs()))
                })
            })
            .collect()
    }

    pub fn allocation_changes(&self) -> Vec<(f64, &Allocation, &Allocation)> {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Reallocation { from, to } => Some((e.t, from, to)),
                _ => None,
            })
            .collect()
    }

    /// Times of known disturbances and of the first impediment of each robot.
    pub fn disturbance_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Disturbance(_) | EventKind::Impeded { .. }))
            .map(|e| e.t)
            .collect()
    }
}

/// Owned snapshot of one allocation problem, solvable on another thread.
#[derive(Debug, Clone)]
pub struct AllocationJob {
    pub step: usize,
    pub t: f64,
    pub model: HeterogeneityModel,
    pub specializations: Vec<Specialization>,
    pub rows: Vec<RobotRows>,
    pub n_inputs: usize,
    pub params: AllocatorParams,
    pub search: SearchSettings,
    pub hint: Option<Allocation>,
}

impl AllocationJob {
    pub fn problem(&self) -> AllocationProblem<'_> {
        AllocationProblem::from_rows(
            &self.model,
            &self.specializations,
            self.rows.clone(),
            self.n_inputs,
            &self.params,
        )
    }

    pub fn solve(&self) -> Result<AllocationSolution, SimError> {
        solve_allocation_with(&self.problem(), &self.search, self.hint.as_ref(), &mut |_| false).map_err(|source| {
            SimError::Allocation {
                step: self.step,
                t: self.t,
                source,
            }
        })
    }
}

/// Per-step linearisation shared by the allocator and the executors.
#[derive(Debug, Clone)]
pub struct StepView {
    pub step: usize,
    pub t: f64,
    pub frames: Vec<TaskFrame>,
    pub rows: Vec<RobotRows>,
}

/// Inputs chosen for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub u: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub kkt: f64,
}

impl From<&AllocationSolution> for Inputs {
    fn from(sol: &AllocationSolution) -> Self {
        Self {
            u: sol.u.clone(),
            delta: sol.delta.clone(),
            kkt: sol.kkt_max,
        }
    }
}

/// World state and the step pipeline. One driver owns it.
///
/// Per step: [`prepare`](Self::prepare) applies due disturbances and the
/// decay law and linearises the tasks; the driver chooses an allocation and
/// inputs; [`commit`](Self::commit) records the row and integrates the true
/// dynamics.
pub struct Simulation<'s> {
    sc: &'s Scenario,
    dynamics: SingleIntegrator,
    priorities: PriorityConstraintSet,
    x: Ensemble,
    model: HeterogeneityModel,
    specs: Vec<Specialization>,
    /// Allocation the robots used in the previous step.
    in_force: Allocation,
    ledger: Option<ProgressLedger>,
    pending_events: Vec<DisturbanceEvent>,
    impeded: Vec<bool>,
    events: Vec<TraceEvent>,
    rows: Vec<TraceRow>,
    solver: QpSolver,
}

impl<'s> Simulation<'s> {
    pub fn new(sc: &'s Scenario) -> Result<Self, SimError> {
        sc.validate()?;
        let mut pending_events = sc.events.clone();
        pending_events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self {
            sc,
            dynamics: sc.dynamics(),
            priorities: build_priority_constraints(sc.n_tasks().max(1), sc.params.kappa, sc.params.delta_max),
            x: sc.initial.clone(),
            model: sc.model.clone(),
            specs: sc.model.specializations().to_vec(),
            in_force: Allocation::idle(sc.n_robots()),
            ledger: sc.beta.map(|b| ProgressLedger::new(sc.dt, b).expect("validated")),
            pending_events,
            impeded: vec![false; sc.n_robots()],
            events: Vec::new(),
            rows: Vec::with_capacity(sc.steps()),
            solver: QpSolver::default(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        self.sc
    }

    pub fn state(&self) -> &Ensemble {
        &self.x
    }

    pub fn model(&self) -> &HeterogeneityModel {
        &self.model
    }

    pub fn specializations(&self) -> &[Specialization] {
        &self.specs
    }

    /// Allocation used in the previous step (idle before the first one).
    pub fn in_force(&self) -> &Allocation {
        &self.in_force
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.sc.dt
    }

    /// Known disturbances, then the decay update, then the step's linearisation.
    pub fn prepare(&mut self, step: usize) -> Result<StepView, SimError> {
        let t = self.time(step);
        while let Some(ev) = self.pending_events.first() {
            if ev.time > t + 1e-9 {
                break;
            }
            let ev = self.pending_events.remove(0);
            self.model = apply_endogenous(&self.model, &ev).map_err(|e| match e {
                ResilienceError::Model(source) => SimError::Event { t: ev.time, source },
                other => SimError::InvalidScenario(format!("{other}")),
            })?;
            self.specs = refresh_specializations(&self.specs, &self.model);
            self.events.push(TraceEvent {
                step,
                t,
                kind: EventKind::Disturbance(ev.kind),
            });
        }
        let frames = task_frames(&self.sc.tasks, &self.x, t, &self.in_force);
        if let Some(ledger) = &self.ledger {
            self.specs = exogenous_update(
                ledger,
                &self.sc.tasks,
                &frames,
                &self.dynamics,
                &self.x,
                t,
                &self.in_force,
                &self.specs,
            );
        }
        let rows = (0..self.x.len())
            .map(|i| robot_rows(&self.sc.tasks, &frames, &self.dynamics, self.sc.params.gamma, i, self.x.robot(i), t))
            .collect();
        Ok(StepView { step, t, frames, rows })
    }

    pub fn job(&self, view: &StepView, hint: Option<&Allocation>) -> AllocationJob {
        AllocationJob {
            step: view.step,
            t: view.t,
            model: self.model.clone(),
            specializations: self.specs.clone(),
            rows: view.rows.clone(),
            n_inputs: self.dynamics.input_dim(),
            params: self.sc.params.clone(),
            search: self.sc.search,
            hint: hint.cloned(),
        }
    }

    /// Solves the full allocation problem for this step.
    pub fn allocate(&self, view: &StepView, hint: Option<&Allocation>) -> Result<AllocationSolution, SimError> {
        let problem = AllocationProblem::from_rows(
            &self.model,
            &self.specs,
            view.rows.clone(),
            self.dynamics.input_dim(),
            &self.sc.params,
        );
        solve_allocation_with(&problem, &self.sc.search, hint, &mut |_| false).map_err(|source| {
            SimError::Allocation {
                step: view.step,
                t: view.t,
                source,
            }
        })
    }

    /// Every robot solves its own problem for the given allocation.
    pub fn execute(&mut self, view: &StepView, alpha: &Allocation) -> Inputs {
        let n_t = self.sc.n_tasks();
        let mut u = Vec::with_capacity(self.x.len());
        let mut delta = Vec::with_capacity(self.x.len());
        let mut kkt: f64 = 0.0;
        for i in 0..self.x.len() {
            let out = solve_robot(
                &mut self.solver,
                &view.rows[i],
                self.dynamics.input_dim(),
                &alpha.column(i, n_t),
                &self.specs[i],
                &self.priorities,
                self.sc.params.l,
                self.sc.params.delta_max,
                None,
            );
            kkt = kkt.max(out.kkt.max());
            u.push(out.u);
            delta.push(out.delta);
        }
        Inputs { u, delta, kkt }
    }

    /// Records the step and integrates the true dynamics with `inputs.u`.
    pub fn commit(
        &mut self,
        view: &StepView,
        alpha: Allocation,
        inputs: Inputs,
        u_ref: Option<Vec<Vec<f64>>>,
        solved: Option<&AllocationSolution>,
    ) {
        let (step, t) = (view.step, view.t);
        if alpha != self.in_force && step > 0 {
            self.events.push(TraceEvent {
                step,
                t,
                kind: EventKind::Reallocation {
                    from: self.in_force.clone(),
                    to: alpha.clone(),
                },
            });
        }
        let h = task_values(&self.sc.tasks, &self.x, t, &alpha);
        let v = lyapunov_from_values(self.sc.params.gamma, &h);
        if let Some(ledger) = &mut self.ledger {
            ledger.record(&self.x, &inputs.u);
        }
        let mut next = self.x.clone();
        for i in 0..self.x.len() {
            let own = self.x.robot(i);
            let mut s = apply_disturbed_dynamics(&self.dynamics, i, own, &inputs.u[i], self.sc.dt, &self.sc.fields);
            let nominal = self.dynamics.euler_step(own, &inputs.u[i], self.sc.dt, 1.0);
            let impeded = s != nominal;
            if impeded && !self.impeded[i] {
                self.events.push(TraceEvent {
                    step,
                    t,
                    kind: EventKind::Impeded { robot: i },
                });
            }
            self.impeded[i] = impeded;
            if let Some((lo, hi)) = self.sc.bounds {
                let mut clamped = false;
                for a in 0..2 {
                    let c = s[a].clamp(lo[a], hi[a]);
                    if c != s[a] {
                        s[a] = c;
                        clamped = true;
                    }
                }
                if clamped {
                    self.events.push(TraceEvent {
                        step,
                        t,
                        kind: EventKind::Clamped { robot: i },
                    });
                }
            }
            next.robot_mut(i).copy_from_slice(&s);
        }
        let row = TraceRow {
            step,
            t,
            x: core::mem::replace(&mut self.x, next),
            u: inputs.u,
            u_ref,
            delta: inputs.delta,
            alpha: alpha.clone(),
            h,
            v,
            s: self.specs.iter().map(|s| s.entries().to_vec()).collect(),
            cost: solved.map(|s| s.objective),
            nodes: solved.map_or(0, |s| s.nodes),
            kkt: inputs.kkt,
        };
        self.rows.push(row);
        self.in_force = alpha;
    }

    pub fn finish(self, mode: Mode, latency: usize) -> RunTrace {
        RunTrace {
            scenario: self.sc.name.clone(),
            mode,
            latency,
            seed: self.sc.seed,
            rows: self.rows,
            events: self.events,
        }
    }
}

/// Solves the full allocation problem at every step and applies its inputs.
pub fn run_centralized(sc: &Scenario) -> Result<RunTrace, SimError> {
    let mut sim = Simulation::new(sc)?;
    for step in 0..sc.steps() {
        let view = sim.prepare(step)?;
        let hint = sim.in_force().clone();
        let sol = sim.allocate(&view, Some(&hint))?;
        sim.commit(&view, sol.alpha.clone(), Inputs::from(&sol), None, Some(&sol));
    }
    Ok(sim.finish(Mode::Centralized, 0))
}

/// Options of the mixed driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixedOptions {
    /// Steps between starting an allocation and publishing it; 0 publishes instantly.
    pub latency: usize,
    /// Also record the inputs an allocation solved at every step would give.
    pub compare: bool,
}

/// Allocations published with latency, per-robot execution every step.
///
/// The first allocation is computed from the initial state and used right
/// away. From then on an allocation is started whenever the previous one is
/// published, so with latency `n` the one computed from the state at step
/// `k` is in force from step `k + n` on.
pub fn run_mixed(sc: &Scenario, opts: &MixedOptions) -> Result<RunTrace, SimError> {
    let mut sim = Simulation::new(sc)?;
    let mut pending: Option<(usize, Allocation)> = None;
    let mut published = Allocation::idle(sc.n_robots());
    for step in 0..sc.steps() {
        let view = sim.prepare(step)?;
        let mut fresh: Option<AllocationSolution> = None;
        if opts.latency == 0 || step == 0 {
            let sol = sim.allocate(&view, Some(&published))?;
            published = sol.alpha.clone();
            fresh = Some(sol);
        } else if pending.as_ref().is_some_and(|(due, _)| *due == step) {
            published = pending.take().expect("checked").1;
        }
        if opts.latency > 0 && pending.is_none() {
            if fresh.is_none() {
                fresh = Some(sim.allocate(&view, Some(&published))?);
            }
            let alpha = fresh.as_ref().expect("just solved").alpha.clone();
            pending = Some((step + opts.latency, alpha));
        }
        let inputs = sim.execute(&view, &published);
        let u_ref = if opts.compare {
            let sol = match &fresh {
                Some(s) => s.u.clone(),
                None => sim.allocate(&view, Some(&published))?.u,
            };
            Some(sol)
        } else {
            None
        };
        sim.commit(&view, published.clone(), inputs, u_ref, fresh.as_ref());
    }
    Ok(sim.finish(Mode::Mixed, opts.latency))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneResult {
    pub label: String,
    pub expected: f64,
    pub observed: Option<f64>,
    pub passed: bool,
}

pub const MILESTONE_TOL: f64 = 2.0;

/// First time each milestone holds, and whether that is within the tolerance.
///
/// Milestones are searched in order: each one from the step the previous
/// one was met on.
pub fn check_milestones(milestones: &[Milestone], trace: &RunTrace, tol: f64) -> Vec<MilestoneResult> {
    let mut from = 0;
    milestones
        .iter()
        .map(|ms| {
            let hit = trace.rows[from.min(trace.rows.len())..].iter().find(|r| match &ms.kind {
                MilestoneKind::Allocation(a) => r.alpha == *a,
                MilestoneKind::TaskDone { task, tol, after } => r.t >= *after - 1e-9 && r.h[*task] >= -tol,
            });
            let observed = hit.map(|r| r.t);
            if let Some(r) = hit {
                from = r.step;
            }
            MilestoneResult {
                label: ms.label.clone(),
                expected: ms.time,
                observed,
                passed: observed.is_some_and(|t| (t - ms.time).abs() <= tol),
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::model::fixtures::four_robot_model;

    pub fn goto_scenario() -> Scenario {
        let model = four_robot_model();
        let mut params = AllocatorParams::new(2, 4);
        params.l = 1e-12;
        Scenario {
            name: String::from("four robots, two goals"),
            initial: Ensemble::from_robots(&[[-1.7, -1.1], [-0.6, 0.3], [-0.2, -0.9], [0.9, -0.8]]),
            tasks: vec![TaskSpec::goto([-0.8, 0.8]), TaskSpec::goto([1.2, 0.6])],
            params,
            search: SearchSettings::default(),
            events: Vec::new(),
            fields: Vec::new(),
            dt: 0.033,
            duration: 3.0,
            latency: 10,
            beta: None,
            bounds: Some(([-1.8, -1.2], [1.8, 1.2])),
            seed: 0,
            milestones: Vec::new(),
            model,
        }
    }
}
