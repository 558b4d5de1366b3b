//! Tasks encoded as control barrier functions.
//!
//! Every task is a sum of per-robot contributions `h_{m,i}`. A task is done
//! when its value reaches zero from below. Coverage tasks couple robots
//! through their Voronoi partition; that coupling is captured once per step
//! in a [`TaskFrame`] and treated as frozen while differentiating.

pub mod voronoi;

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

use crate::dynamics::{Dynamics, Ensemble};
pub use voronoi::{Centroid, CoverageDomain, DensityGrid};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("trajectory needs at least one waypoint")]
    EmptyTrajectory,
    #[error("waypoint times must be finite and strictly increasing")]
    UnorderedWaypoints,
    #[error("coverage domain is degenerate")]
    DegenerateDomain,
    #[error("density parameters must be positive")]
    InvalidDensity,
    #[error("class-K gain must be positive, got {0}")]
    InvalidGain(f64),
    #[error("task needs a state with at least {needed} components, got {found}")]
    StateTooSmall { needed: usize, found: usize },
}

/// Linear class-K function `s -> gain * s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassK {
    gain: f64,
}

impl Default for ClassK {
    fn default() -> Self {
        Self { gain: 5.0 }
    }
}

impl ClassK {
    pub fn linear(gain: f64) -> Result<Self, TaskError> {
        if gain.is_finite() && gain > 0.0 {
            Ok(Self { gain })
        } else {
            Err(TaskError::InvalidGain(gain))
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.gain * s
    }

    pub fn derivative(&self, _s: f64) -> f64 {
        self.gain
    }
}

/// Piecewise-cubic Hermite path through timed waypoints.
///
/// Interior tangents follow Catmull-Rom, end tangents are zero and the path
/// holds its end points outside the waypoint time span, so it is C1 everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    points: Vec<[f64; 2]>,
    tangents: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: &[(f64, [f64; 2])]) -> Result<Self, TaskError> {
        if waypoints.is_empty() {
            return Err(TaskError::EmptyTrajectory);
        }
        if waypoints.iter().any(|(t, _)| !t.is_finite())
            || waypoints.windows(2).any(|w| w[1].0 <= w[0].0)
        {
            return Err(TaskError::UnorderedWaypoints);
        }
        let times: Vec<f64> = waypoints.iter().map(|w| w.0).collect();
        let points: Vec<[f64; 2]> = waypoints.iter().map(|w| w.1).collect();
        let n = points.len();
        let tangents = (0..n)
            .map(|k| {
                if k == 0 || k + 1 == n {
                    [0.0, 0.0]
                } else {
                    let span = times[k + 1] - times[k - 1];
                    [
                        (points[k + 1][0] - points[k - 1][0]) / span,
                        (points[k + 1][1] - points[k - 1][1]) / span,
                    ]
                }
            })
            .collect();
        Ok(Self { times, points, tangents })
    }

    pub fn stationary(p: [f64; 2]) -> Self {
        Self::new(&[(0.0, p)]).expect("single waypoint is valid")
    }

    pub fn waypoints(&self) -> impl Iterator<Item = (f64, [f64; 2])> + '_ {
        self.times.iter().copied().zip(self.points.iter().copied())
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    fn segment(&self, t: f64) -> Option<(usize, f64, f64)> {
        let n = self.times.len();
        if n < 2 || t <= self.times[0] || t >= self.times[n - 1] {
            return None;
        }
        let k = self.times.partition_point(|&tk| tk <= t) - 1;
        let h = self.times[k + 1] - self.times[k];
        Some((k, (t - self.times[k]) / h, h))
    }

    pub fn position(&self, t: f64) -> [f64; 2] {
        match self.segment(t) {
            None if t <= self.times[0] => self.points[0],
            None => *self.points.last().expect("non-empty"),
            Some((k, s, h)) => {
                let (s2, s3) = (s * s, s * s * s);
                let b = [2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2];
                self.blend(k, h, b)
            }
        }
    }

    pub fn velocity(&self, t: f64) -> [f64; 2] {
        match self.segment(t) {
            None => [0.0, 0.0],
            Some((k, s, h)) => {
                let s2 = s * s;
                let b = [6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s];
                let p = self.blend(k, h, b);
                [p[0] / h, p[1] / h]
            }
        }
    }

    fn blend(&self, k: usize, h: f64, b: [f64; 4]) -> [f64; 2] {
        let (p0, p1) = (self.points[k], self.points[k + 1]);
        let (m0, m1) = (self.tangents[k], self.tangents[k + 1]);
        [0, 1].map(|a| b[0] * p0[a] + b[1] * h * m0[a] + b[2] * p1[a] + b[3] * h * m1[a])
    }
}

/// Importance density of a coverage task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    Uniform,
    /// `exp(-gain (|q - c(t)|^2 - radius^2)^2)`, a ridge on a circle around the moving centre.
    Ring { gain: f64, radius: f64 },
}

impl Density {
    pub fn ring() -> Self {
        Density::Ring { gain: 100.0, radius: 0.4 }
    }

    /// Value and time derivative at `q` for a centre at `c` moving with `c_dot`.
    pub fn eval(&self, q: [f64; 2], c: [f64; 2], c_dot: [f64; 2]) -> (f64, f64) {
        match *self {
            Density::Uniform => (1.0, 0.0),
            Density::Ring { gain, radius } => {
                let d = [q[0] - c[0], q[1] - c[1]];
                let w = d[0] * d[0] + d[1] * d[1] - radius * radius;
                let phi = (-gain * w * w).exp();
                (phi, phi * 4.0 * gain * w * (d[0] * c_dot[0] + d[1] * c_dot[1]))
            }
        }
    }
}

/// Arrange around a moving centre while pointing a camera at a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageEscort {
    pub domain: CoverageDomain,
    pub density: Density,
    pub center: Trajectory,
    pub monitor: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Goto { target: [f64; 2] },
    Trajectory(Trajectory),
    CoverageEscort(CoverageEscort),
}

/// A task ready to be linearised along robot states.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
}

/// Per-step data a task needs that depends on the whole team.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskFrame {
    Local,
    /// Centroid each robot would be driven to, with its rate for a frozen partition.
    Coverage(Vec<Centroid>),
}

/// Angle wrapped to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = a % two_pi;
    if w <= -PI {
        w += two_pi;
    } else if w > PI {
        w -= two_pi;
    }
    w
}

impl TaskSpec {
    pub fn goto(target: [f64; 2]) -> Self {
        Self { kind: TaskKind::Goto { target } }
    }

    pub fn trajectory(path: Trajectory) -> Self {
        Self { kind: TaskKind::Trajectory(path) }
    }

    pub fn coverage_escort(
        domain: CoverageDomain,
        density: Density,
        center: Trajectory,
        monitor: [f64; 2],
    ) -> Result<Self, TaskError> {
        if !domain.is_valid() {
            return Err(TaskError::DegenerateDomain);
        }
        if let Density::Ring { gain, radius } = density {
            if !(gain > 0.0 && radius > 0.0) {
                return Err(TaskError::InvalidDensity);
            }
        }
        Ok(Self {
            kind: TaskKind::CoverageEscort(CoverageEscort { domain, density, center, monitor }),
        })
    }

    /// Robots' contributions interact (through a shared partition).
    pub fn is_coordinated(&self) -> bool {
        matches!(self.kind, TaskKind::CoverageEscort(_))
    }

    /// No explicit time dependence.
    pub fn is_static(&self) -> bool {
        matches!(self.kind, TaskKind::Goto { .. })
    }

    /// Time from which the task's reference stops moving.
    pub fn settles_at(&self) -> f64 {
        match &self.kind {
            TaskKind::Goto { .. } => 0.0,
            TaskKind::Trajectory(path) => path.end_time(),
            TaskKind::CoverageEscort(cov) => cov.center.end_time(),
        }
    }

    pub fn min_state_dim(&self) -> usize {
        match self.kind {
            TaskKind::CoverageEscort(_) => 3,
            _ => 2,
        }
    }

    /// Team-dependent data for this step.
    ///
    /// `members[i]` marks robots currently working on the task. Members split
    /// the domain among themselves; every other robot gets the centroid it
    /// would own if it joined them.
    pub fn frame(&self, x: &Ensemble, t: f64, members: &[bool]) -> TaskFrame {
        let TaskKind::CoverageEscort(cov) = &self.kind else {
            return TaskFrame::Local;
        };
        let c = cov.center.position(t);
        let c_dot = cov.center.velocity(t);
        let grid = match cov.density {
            Density::Uniform => DensityGrid::uniform(&cov.domain),
            d => DensityGrid::sample(&cov.domain, |q| d.eval(q, c, c_dot)),
        };
        let positions = x.positions();
        let team: Vec<usize> = (0..x.len()).filter(|&i| members.get(i).copied().unwrap_or(false)).collect();
        let gens: Vec<[f64; 2]> = team.iter().map(|&i| positions[i]).collect();
        let shared = voronoi::centroids_on_grid(&gens, &cov.domain, &grid);
        let mut out = vec![Centroid { point: [0.0; 2], rate: [0.0; 2] }; x.len()];
        for (slot, &i) in team.iter().enumerate() {
            out[i] = shared[slot];
        }
        for i in (0..x.len()).filter(|i| !team.contains(i)) {
            let mut joined = gens.clone();
            joined.push(positions[i]);
            out[i] = *voronoi::centroids_on_grid(&joined, &cov.domain, &grid)
                .last()
                .expect("joined partition is non-empty");
        }
        TaskFrame::Coverage(out)
    }

    fn centroid(frame: &TaskFrame, i: usize) -> Centroid {
        match frame {
            TaskFrame::Coverage(c) => c[i],
            TaskFrame::Local => panic!("coverage task evaluated with a local frame"),
        }
    }

    /// `h_{m,i}` for robot `i` in state `own`.
    pub fn robot_value(&self, frame: &TaskFrame, i: usize, own: &[f64], t: f64) -> f64 {
        match &self.kind {
            TaskKind::Goto { target } => -dist2(own, *target),
            TaskKind::Trajectory(path) => -dist2(own, path.position(t)),
            TaskKind::CoverageEscort(cov) => {
                let g = Self::centroid(frame, i).point;
                let e = camera_error(own, cov.monitor);
                -dist2(own, g) - e * e
            }
        }
    }

    /// Gradient of `h_{m,i}` with respect to robot `i`'s own state.
    pub fn robot_gradient(&self, frame: &TaskFrame, i: usize, own: &[f64], t: f64) -> Vec<f64> {
        let mut grad = vec![0.0; own.len()];
        let anchor = match &self.kind {
            TaskKind::Goto { target } => *target,
            TaskKind::Trajectory(path) => path.position(t),
            TaskKind::CoverageEscort(_) => Self::centroid(frame, i).point,
        };
        grad[0] = -2.0 * (own[0] - anchor[0]);
        grad[1] = -2.0 * (own[1] - anchor[1]);
        if let TaskKind::CoverageEscort(cov) = &self.kind {
            let e = camera_error(own, cov.monitor);
            let v = [cov.monitor[0] - own[0], cov.monitor[1] - own[1]];
            let r2 = v[0] * v[0] + v[1] * v[1];
            // bearing = atan2(v); d bearing / d p = (v_y, -v_x) / |v|^2
            grad[0] += 2.0 * e * v[1] / r2;
            grad[1] -= 2.0 * e * v[0] / r2;
            grad[2] = -2.0 * e;
        }
        grad
    }

    /// Explicit time derivative of `h_{m,i}`.
    pub fn robot_time_derivative(&self, frame: &TaskFrame, i: usize, own: &[f64], t: f64) -> f64 {
        let (anchor, rate) = match &self.kind {
            TaskKind::Goto { .. } => return 0.0,
            TaskKind::Trajectory(path) => (path.position(t), path.velocity(t)),
            TaskKind::CoverageEscort(_) => {
                let c = Self::centroid(frame, i);
                (c.point, c.rate)
            }
        };
        2.0 * ((own[0] - anchor[0]) * rate[0] + (own[1] - anchor[1]) * rate[1])
    }

    /// Per-robot contributions at the current state.
    pub fn robot_values(&self, x: &Ensemble, t: f64, members: &[bool]) -> Vec<f64> {
        let frame = self.frame(x, t, members);
        (0..x.len()).map(|i| self.robot_value(&frame, i, x.robot(i), t)).collect()
    }

    /// `h_m`, the sum of the contributions of the robots flagged in `over`.
    pub fn value(&self, x: &Ensemble, t: f64, members: &[bool], over: &[bool]) -> f64 {
        self.robot_values(x, t, members)
            .into_iter()
            .zip(over)
            .filter(|(_, &on)| on)
            .map(|(h, _)| h)
            .sum()
    }
}

fn dist2(own: &[f64], p: [f64; 2]) -> f64 {
    (own[0] - p[0]).powi(2) + (own[1] - p[1]).powi(2)
}

fn camera_error(own: &[f64], monitor: [f64; 2]) -> f64 {
    let bearing = (monitor[1] - own[1]).atan2(monitor[0] - own[0]);
    wrap_angle(own[2] - bearing)
}

/// Drift term `L_f h + dh/dt` and input row `L_g h` for robot `i`.
pub fn lie_terms(
    task: &TaskSpec,
    dynamics: &dyn Dynamics,
    frame: &TaskFrame,
    i: usize,
    own: &[f64],
    t: f64,
) -> (f64, Vec<f64>) {
    let grad = task.robot_gradient(frame, i, own, t);
    let f = dynamics.drift(own);
    let g = dynamics.input_matrix(own);
    let drift = grad.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + task.robot_time_derivative(frame, i, own, t);
    let row = (0..g.ncols())
        .map(|c| (0..g.nrows()).map(|r| grad[r] * g[(r, c)]).sum())
        .collect();
    (drift, row)
}
