//! Scenario files (JSON).
//!
//! All indices are 0-based. See `scenarios/README.md` for the schema.

use std::fs;
use std::path::Path;

use hetalloc_core::allocator::{Allocation, AllocatorParams, SearchSettings};
use hetalloc_core::dynamics::Ensemble;
use hetalloc_core::model::{HeterogeneityModel, Hyperedge};
use hetalloc_core::resilience::{DisturbanceEvent, DisturbanceKind};
use hetalloc_core::sim::{ExogenousField, FieldKind, Milestone, MilestoneKind, Scenario};
use hetalloc_core::tasks::voronoi::CoverageDomain;
use hetalloc_core::tasks::{ClassK, Density, TaskSpec, Trajectory};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub model: ModelSpec,
    pub robots: Vec<RobotSpec>,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub allocator: AllocatorSpec,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    pub sim: SimSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Tasks x capabilities, required amount of each capability.
    #[serde(rename = "T")]
    pub t: Vec<Vec<u32>>,
    /// Features x robots, 1 where the robot has the feature.
    #[serde(rename = "A")]
    pub a: Vec<Vec<u8>>,
    /// Per capability, the feature bundles that provide it.
    pub hyperedges: Vec<Vec<EdgeSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub features: Vec<usize>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RobotClass {
    #[default]
    Wheeled,
    Flying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    /// Position, optionally followed by a camera heading.
    pub state: Vec<f64>,
    #[serde(default)]
    pub class: RobotClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskEntry {
    Goto {
        target: [f64; 2],
    },
    Trajectory {
        /// `[t, x, y]` rows.
        waypoints: Vec<[f64; 3]>,
    },
    CoverageEscort {
        /// Waypoints of the centre the team arranges around.
        center: Vec<[f64; 3]>,
        monitor: [f64; 2],
        #[serde(default)]
        density: DensitySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<DomainSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    Ring { gain: f64, radius: f64 },
}

impl Default for DensitySpec {
    fn default() -> Self {
        match Density::ring() {
            Density::Ring { gain, radius } => DensitySpec::Ring { gain, radius },
            Density::Uniform => DensitySpec::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub cells: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorSpec {
    #[serde(rename = "C", default = "default_c")]
    pub c: f64,
    #[serde(default = "default_l")]
    pub l: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    /// Gain of the linear class-K function.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Per task; zeros when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_min: Option<Vec<usize>>,
    /// Per task; the number of robots when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<Vec<usize>>,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    /// Also bound search nodes with the convex relaxation.
    #[serde(default)]
    pub relaxation: bool,
}

fn default_c() -> f64 {
    1e6
}
fn default_l() -> f64 {
    1e-6
}
fn default_kappa() -> f64 {
    1e6
}
fn default_delta_max() -> f64 {
    1e3
}
fn default_gamma() -> f64 {
    5.0
}
fn default_max_nodes() -> usize {
    SearchSettings::default().max_nodes
}

impl Default for AllocatorSpec {
    fn default() -> Self {
        Self {
            c: default_c(),
            l: default_l(),
            kappa: default_kappa(),
            delta_max: default_delta_max(),
            gamma: default_gamma(),
            n_min: None,
            n_max: None,
            max_nodes: default_max_nodes(),
            relaxation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    FeatureFailure {
        t: f64,
        robot: usize,
        feature: usize,
    },
    WeightChange {
        t: f64,
        capability: usize,
        edge: usize,
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default = "default_latency")]
    pub latency: usize,
    /// Decay gain of the specialization update; off when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub milestones: Vec<MilestoneSpec>,
}

fn default_dt() -> f64 {
    0.033
}
fn default_latency() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKindSpec {
    LowFriction,
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub kind: FieldKindSpec,
    pub center: [f64; 2],
    pub radius: f64,
    /// Robots affected by index...
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robots: Vec<usize>,
    /// ...or by class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<RobotClass>,
    /// Input scale inside a low-friction disk.
    #[serde(default)]
    pub mobility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilestoneSpec {
    pub label: String,
    pub t: f64,
    /// Expected task per robot (`null` for idle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_done: Option<usize>,
    #[serde(default = "default_done_tol")]
    pub tol: f64,
}

fn default_done_tol() -> f64 {
    1e-2
}

fn waypoints(rows: &[[f64; 3]]) -> Result<Trajectory, ScenarioError> {
    let pts: Vec<(f64, [f64; 2])> = rows.iter().map(|w| (w[0], [w[1], w[2]])).collect();
    Trajectory::new(&pts).map_err(|e| ScenarioError::Invalid(format!("trajectory: {e}")))
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn model(&self) -> Result<HeterogeneityModel, ScenarioError> {
        let m = &self.model;
        let n_c = m.hyperedges.len();
        if m.t.iter().any(|r| r.len() != n_c) {
            return invalid(format!("every row of T needs {n_c} entries, one per capability"));
        }
        let n_r = self.robots.len();
        if m.a.iter().any(|r| r.len() != n_r) {
            return invalid(format!("every row of A needs {n_r} entries, one per robot"));
        }
        if m.a.iter().flatten().any(|&v| v > 1) {
            return invalid("A is binary");
        }
        let t = DMatrix::from_fn(m.t.len(), n_c, |i, j| m.t[i][j]);
        let a = DMatrix::from_fn(m.a.len(), n_r, |i, j| m.a[i][j] == 1);
        let caps = m
            .hyperedges
            .iter()
            .map(|edges| edges.iter().map(|e| Hyperedge::new(e.features.clone(), e.weight)).collect())
            .collect();
        HeterogeneityModel::new(t, a, caps).map_err(|e| ScenarioError::Invalid(format!("model: {e}")))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>, ScenarioError> {
        self.tasks
            .iter()
            .map(|t| match t {
                TaskEntry::Goto { target } => Ok(TaskSpec::goto(*target)),
                TaskEntry::Trajectory { waypoints: w } => Ok(TaskSpec::trajectory(waypoints(w)?)),
                TaskEntry::CoverageEscort {
                    center,
                    monitor,
                    density,
                    domain,
                } => {
                    let domain = match domain {
                        Some(d) => CoverageDomain {
                            min: d.min,
                            max: d.max,
                            cells: d.cells,
                        },
                        None => match self.sim.bounds {
                            Some(b) => CoverageDomain {
                                min: b.min,
                                max: b.max,
                                ..CoverageDomain::default()
                            },
                            None => CoverageDomain::default(),
                        },
                    };
                    let density = match *density {
                        DensitySpec::Uniform => Density::Uniform,
                        DensitySpec::Ring { gain, radius } => Density::Ring { gain, radius },
                    };
                    TaskSpec::coverage_escort(domain, density, waypoints(center)?, *monitor)
                        .map_err(|e| ScenarioError::Invalid(format!("coverage task: {e}")))
                }
            })
            .collect()
    }

    fn robots_of(&self, f: &FieldSpec) -> Vec<usize> {
        let mut out: Vec<usize> = f.robots.clone();
        for (i, r) in self.robots.iter().enumerate() {
            if f.classes.contains(&r.class) && !out.contains(&i) {
                out.push(i);
            }
        }
        out.sort_unstable();
        out
    }

    /// Builds and validates the simulation scenario.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        if self.robots.is_empty() {
            return invalid("a scenario needs at least one robot");
        }
        let dim = self.robots[0].state.len();
        if self.robots.iter().any(|r| r.state.len() != dim) {
            return invalid("all robots need states of the same dimension");
        }
        let model = self.model()?;
        let tasks = self.tasks()?;
        let (n_t, n_r) = (tasks.len(), self.robots.len());
        let al = &self.allocator;
        let mut params = AllocatorParams::new(n_t, n_r);
        params.c = al.c;
        params.l = al.l;
        params.kappa = al.kappa;
        params.delta_max = al.delta_max;
        params.gamma = ClassK::linear(al.gamma).map_err(|e| ScenarioError::Invalid(format!("gamma: {e}")))?;
        if let Some(v) = &al.n_min {
            params.n_min = v.clone();
        }
        if let Some(v) = &al.n_max {
            params.n_max = v.clone();
        }
        let search = SearchSettings {
            max_nodes: al.max_nodes,
            relaxation: al.relaxation,
            ..SearchSettings::default()
        };
        let events = self
            .events
            .iter()
            .map(|e| {
                let (time, kind) = match *e {
                    EventSpec::FeatureFailure { t, robot, feature } => {
                        (t, DisturbanceKind::FeatureFailure { robot, feature })
                    }
                    EventSpec::WeightChange {
                        t,
                        capability,
                        edge,
                        weight,
                    } => (
                        t,
                        DisturbanceKind::WeightChange {
                            capability,
                            edge,
                            weight,
                        },
                    ),
                };
                DisturbanceEvent::new(time, kind).map_err(|e| ScenarioError::Invalid(format!("event: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fields = self
            .sim
            .fields
            .iter()
            .map(|f| ExogenousField {
                kind: match f.kind {
                    FieldKindSpec::LowFriction => FieldKind::LowFriction,
                    FieldKindSpec::Barrier => FieldKind::Barrier,
                },
                center: f.center,
                radius: f.radius,
                robots: self.robots_of(f),
                mobility: f.mobility,
            })
            .collect();
        let milestones = self
            .sim
            .milestones
            .iter()
            .map(|m| {
                let kind = match (&m.allocation, m.task_done) {
                    (Some(a), None) => MilestoneKind::Allocation(Allocation(a.clone())),
                    (None, Some(task)) => MilestoneKind::TaskDone {
                        task,
                        tol: m.tol,
                        after: tasks.get(task).map_or(0.0, TaskSpec::settles_at),
                    },
                    _ => return invalid(format!("milestone '{}' needs exactly one of allocation or task_done", m.label)),
                };
                Ok(Milestone {
                    label: m.label.clone(),
                    time: m.t,
                    kind,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sc = Scenario {
            name: self.name.clone(),
            model,
            initial: Ensemble::from_robots(&self.robots.iter().map(|r| r.state.clone()).collect::<Vec<_>>()),
            tasks,
            params,
            search,
            events,
            fields,
            dt: self.sim.dt,
            duration: self.sim.duration,
            latency: self.sim.latency,
            beta: self.sim.beta,
            bounds: self.sim.bounds.map(|b| (b.min, b.max)),
            seed: self.sim.seed,
            milestones,
        };
        sc.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(sc)
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    ScenarioFile::load(path)?.build()
}

/// Scenario files shipped with the crate.
pub mod bundled {
    use super::ScenarioFile;

    pub const EXAMPLE1: &str = include_str!("../scenarios/example1.json");
    pub const EXAMPLE1_MIN2: &str = include_str!("../scenarios/example1_min2.json");
    pub const EXAMPLE2: &str = include_str!("../scenarios/example2.json");
    pub const EXAMPLE3: &str = include_str!("../scenarios/example3.json");
    pub const EXPERIMENT: &str = include_str!("../scenarios/experiment.json");
    pub const CONVERGENCE: &str = include_str!("../scenarios/convergence.json");

    pub const ALL: [(&str, &str); 6] = [
        ("example1", EXAMPLE1),
        ("example1_min2", EXAMPLE1_MIN2),
        ("example2", EXAMPLE2),
        ("example3", EXAMPLE3),
        ("experiment", EXPERIMENT),
        ("convergence", CONVERGENCE),
    ];

    pub fn get(name: &str) -> Option<ScenarioFile> {
        ALL.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| ScenarioFile::from_json(text).expect("bundled scenarios parse"))
    }
}
