//! Post-run analysis of a trace directory.
//!
//! Works from the files a run writes. The Lyapunov series and its increase
//! statistics need only `trace.csv`. The settling check, the LMI probe and
//! the staleness bound also need the scenario the run came from.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hetalloc_core::allocator::{AllocationProblem, Allocation};
use hetalloc_core::analysis::{
    build_b_matrices, check_settling, log_grid, lyapunov_value, probe_lmi, settling_hypotheses, staleness_bound_between,
    BoundParameters, LmiProbe, SettlingReport, SettlingSample,
};
use hetalloc_core::dynamics::Dynamics;
use hetalloc_core::model::{HeterogeneityModel, Specialization};
use hetalloc_core::resilience::apply_endogenous;
use hetalloc_core::sim::Scenario;
use serde::Serialize;

use crate::trace::{read_event_log, read_specialization_csv, read_steps_csv, read_trace_csv, LoggedTrace, StepRecord};

/// Decay rate used in the LMI condition when none is given.
pub const DEFAULT_DECAY: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovSummary {
    pub steps: usize,
    pub initial: f64,
    pub last: f64,
    pub max: f64,
    /// Steps at which V went up.
    pub increases: usize,
    pub largest_increase: f64,
    /// Whether V recomputed from the logged states equals the logged column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recomputed_matches: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SettlingSummary {
    Pass { converged_at: usize, alpha_settled_at: usize },
    Fail { step: usize, reason: String },
    NotApplicable { reason: String },
}

impl From<SettlingReport> for SettlingSummary {
    fn from(r: SettlingReport) -> Self {
        match r {
            SettlingReport::Pass {
                converged_at,
                alpha_settled_at,
            } => Self::Pass {
                converged_at,
                alpha_settled_at,
            },
            SettlingReport::Fail { step, reason } => Self::Fail { step, reason },
            SettlingReport::NotApplicable { reason } => Self::NotApplicable { reason },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LmiSummary {
    Feasible { step: usize, c: f64, tau: [f64; 3], min_eigenvalue: f64 },
    /// Nothing on the grid worked. This is not a proof of infeasibility.
    Inconclusive { step: usize, c: f64, best_tau: [f64; 3], best_min_eigenvalue: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StalenessSummary {
    Bound {
        from_step: usize,
        to_step: usize,
        latency: usize,
        bound: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        largest_observed_gap: Option<f64>,
    },
    Skipped { reason: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub trace: PathBuf,
    pub mode: Option<String>,
    pub latency: Option<usize>,
    pub lyapunov: LyapunovSummary,
    pub settling: SettlingSummary,
    pub lmi: LmiSummary,
    pub staleness: StalenessSummary,
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    /// Step at which the LMI probe and the staleness bound are evaluated.
    pub step: usize,
    pub c: f64,
    pub grid_points: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            step: 0,
            c: DEFAULT_DECAY,
            grid_points: 20,
        }
    }
}

/// Everything `analyze` reads from a run directory.
pub struct RunFiles {
    pub trace: LoggedTrace,
    pub steps: Option<Vec<StepRecord>>,
    pub specializations: Option<Vec<Vec<Vec<f64>>>>,
    pub mode: Option<String>,
    pub latency: Option<usize>,
}

impl RunFiles {
    /// Reads `trace.csv` and whatever sidecar files sit next to it.
    pub fn load(trace_path: &Path) -> Result<Self> {
        let open = |p: &Path| -> Result<BufReader<File>> {
            Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
        };
        let trace = read_trace_csv(open(trace_path)?).with_context(|| format!("reading {}", trace_path.display()))?;
        let dir = trace_path.parent().unwrap_or(Path::new("."));
        let steps = match dir.join("steps.csv") {
            p if p.exists() => Some(read_steps_csv(open(&p)?)?),
            _ => None,
        };
        let specializations = match dir.join("specialization.csv") {
            p if p.exists() => Some(read_specialization_csv(open(&p)?)?),
            _ => None,
        };
        let (mode, latency) = match dir.join("events.json") {
            p if p.exists() => {
                let log = read_event_log(&p)?;
                (Some(log.mode), Some(log.latency))
            }
            _ => (None, None),
        };
        Ok(Self {
            trace,
            steps,
            specializations,
            mode,
            latency,
        })
    }
}

fn lyapunov_summary(files: &RunFiles, sc: Option<&Scenario>) -> LyapunovSummary {
    let v: Vec<f64> = files.trace.steps.iter().map(|s| s.v).collect();
    let mut increases = 0;
    let mut largest: f64 = 0.0;
    for w in v.windows(2) {
        if w[1] > w[0] {
            increases += 1;
            largest = largest.max(w[1] - w[0]);
        }
    }
    let recomputed_matches = sc.map(|sc| {
        files
            .trace
            .steps
            .iter()
            .all(|s| lyapunov_value(&sc.tasks, sc.params.gamma, &s.x, s.t, &s.alpha) == s.v)
    });
    LyapunovSummary {
        steps: v.len(),
        initial: v.first().copied().unwrap_or(0.0),
        last: v.last().copied().unwrap_or(0.0),
        max: v.iter().copied().fold(0.0, f64::max),
        increases,
        largest_increase: largest,
        recomputed_matches,
    }
}

fn settling_summary(files: &RunFiles, sc: &Scenario) -> SettlingSummary {
    let Some(first) = files.trace.steps.first() else {
        return SettlingSummary::NotApplicable { reason: "empty trace".into() };
    };
    let specs: Vec<Specialization> = sc.model.specializations().to_vec();
    if let Some(reason) = settling_hypotheses(&sc.tasks, &sc.dynamics(), &first.x, &specs) {
        return SettlingSummary::NotApplicable { reason };
    }
    let Some(steps) = &files.steps else {
        return SettlingSummary::NotApplicable {
            reason: "steps.csv with the allocation cost is missing".into(),
        };
    };
    let mut samples = Vec::with_capacity(steps.len());
    for (rec, logged) in steps.iter().zip(&files.trace.steps) {
        let Some(cost) = rec.cost else {
            return SettlingSummary::NotApplicable {
                reason: format!("no allocation cost at step {}; the check needs a centralized run", rec.step),
            };
        };
        let u_inf = logged.u.iter().flatten().fold(0.0, |a: f64, v| a.max(v.abs()));
        let delta_inf = (0..logged.alpha.n_robots())
            .filter_map(|i| logged.alpha.task_of(i).map(|m| logged.delta[i][m].abs()))
            .fold(0.0, f64::max);
        samples.push(SettlingSample {
            cost,
            u_inf,
            delta_inf,
            alpha: logged.alpha.clone(),
        });
    }
    check_settling(&samples, None).into()
}

/// The model as it stood at time `t`, after the scenario's known events.
pub fn model_at(sc: &Scenario, t: f64) -> Result<HeterogeneityModel> {
    let mut events = sc.events.clone();
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut model = sc.model.clone();
    for ev in events.iter().filter(|e| e.time <= t + 1e-9) {
        model = apply_endogenous(&model, ev).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(model)
}

fn specializations_at(files: &RunFiles, model: &HeterogeneityModel, step: usize) -> Vec<Specialization> {
    files
        .specializations
        .as_ref()
        .and_then(|s| s.get(step))
        .map(|s| s.iter().map(|d| Specialization::new(d.clone())).collect())
        .unwrap_or_else(|| model.specializations().to_vec())
}

fn previous_allocation(files: &RunFiles, step: usize) -> Allocation {
    match step {
        0 => Allocation::idle(files.trace.steps.first().map_or(0, |s| s.alpha.n_robots())),
        k => files.trace.steps[k - 1].alpha.clone(),
    }
}

fn lmi_summary(files: &RunFiles, sc: &Scenario, opts: &AnalyzeOptions) -> Result<LmiSummary> {
    let Some(logged) = files.trace.steps.get(opts.step) else {
        return Ok(LmiSummary::Skipped {
            reason: format!("trace has no step {}", opts.step),
        });
    };
    let model = model_at(sc, logged.t)?;
    let specs = specializations_at(files, &model, opts.step);
    let dynamics = sc.dynamics();
    let problem = AllocationProblem::new(
        &model,
        &specs,
        &sc.tasks,
        &dynamics as &dyn Dynamics,
        &logged.x,
        logged.t,
        &sc.params,
        &previous_allocation(files, opts.step),
    );
    let instance = build_b_matrices(&problem, &logged.alpha, opts.c);
    let grid = log_grid(1e-3, 1e3, opts.grid_points.max(1));
    Ok(match probe_lmi(&instance, &grid) {
        LmiProbe::Feasible { tau, min_eigenvalue } => LmiSummary::Feasible {
            step: opts.step,
            c: opts.c,
            tau,
            min_eigenvalue,
        },
        LmiProbe::InfeasibleOnGrid {
            best_tau,
            best_min_eigenvalue,
        } => LmiSummary::Inconclusive {
            step: opts.step,
            c: opts.c,
            best_tau,
            best_min_eigenvalue,
        },
    })
}

fn staleness_summary(files: &RunFiles, sc: &Scenario, opts: &AnalyzeOptions) -> Result<StalenessSummary> {
    if files.mode.as_deref() != Some("mixed") {
        return Ok(StalenessSummary::Skipped {
            reason: "only mixed runs have stale allocations".into(),
        });
    }
    let latency = files.latency.unwrap_or(sc.latency);
    let (k0, k1) = (opts.step, opts.step + latency);
    let (Some(a), Some(b)) = (files.trace.steps.get(k0), files.trace.steps.get(k1)) else {
        return Ok(StalenessSummary::Skipped {
            reason: format!("trace too short for steps {k0} and {k1}"),
        });
    };
    let dynamics = sc.dynamics();
    let (m0, m1) = (model_at(sc, a.t)?, model_at(sc, b.t)?);
    let (s0, s1) = (specializations_at(files, &m0, k0), specializations_at(files, &m1, k1));
    let p0 = AllocationProblem::new(&m0, &s0, &sc.tasks, &dynamics, &a.x, a.t, &sc.params, &previous_allocation(files, k0));
    let p1 = AllocationProblem::new(&m1, &s1, &sc.tasks, &dynamics, &b.x, b.t, &sc.params, &previous_allocation(files, k1));
    let params = BoundParameters {
        n: latency,
        dt: sc.dt,
        ..BoundParameters::default()
    };
    Ok(match staleness_bound_between(&params, &p0, &p1) {
        Ok(bound) => StalenessSummary::Bound {
            from_step: k0,
            to_step: k1,
            latency,
            bound,
            largest_observed_gap: files
                .steps
                .as_ref()
                .and_then(|s| s.iter().filter_map(|r| r.input_gap).reduce(f64::max)),
        },
        Err(e) => StalenessSummary::Skipped { reason: e.to_string() },
    })
}

/// Runs every check that the available inputs allow.
pub fn analyze(trace_path: &Path, sc: Option<&Scenario>, opts: &AnalyzeOptions) -> Result<(AnalysisReport, RunFiles)> {
    let files = RunFiles::load(trace_path)?;
    let lyapunov = lyapunov_summary(&files, sc);
    let no_scenario = || "needs --scenario".to_string();
    let (settling, lmi, staleness) = match sc {
        Some(sc) => (
            settling_summary(&files, sc),
            lmi_summary(&files, sc, opts)?,
            staleness_summary(&files, sc, opts)?,
        ),
        None => (
            SettlingSummary::NotApplicable { reason: no_scenario() },
            LmiSummary::Skipped { reason: no_scenario() },
            StalenessSummary::Skipped { reason: no_scenario() },
        ),
    };
    let report = AnalysisReport {
        trace: trace_path.to_path_buf(),
        mode: files.mode.clone(),
        latency: files.latency,
        lyapunov,
        settling,
        lmi,
        staleness,
    };
    Ok((report, files))
}

/// `lyapunov.csv` (`t,V`) and `analysis.json` in `dir`.
pub fn write_report(dir: &Path, report: &AnalysisReport, files: &RunFiles) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("lyapunov.csv"))?;
    w.write_record(["t", "V"])?;
    for s in &files.trace.steps {
        w.write_record([format!("{}", s.t), format!("{}", s.v)])?;
    }
    w.flush()?;
    fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
