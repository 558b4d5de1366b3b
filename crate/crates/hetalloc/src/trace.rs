//! Trace files.
//!
//! A run directory holds
//! - `trace.csv`: one row per robot and step,
//!   `t,robot,x1,x2,x3,u1,u2,u3,delta_1..delta_nt,alpha,V`;
//! - `events.json`: run metadata and the event log;
//! - `steps.csv`: one row per step with `V`, the allocation cost, search
//!   nodes, the largest KKT residual, the input gap of compare runs and `h_m`;
//! - `specialization.csv`: `t,robot,s_1..s_nt`.
//!
//! Numbers are written in Rust's shortest round-trip form, so reading a
//! trace back gives bit-identical values. `alpha` is the 0-based task index,
//! empty for an idle robot; missing state or input components are empty.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hetalloc_core::allocator::Allocation;
use hetalloc_core::dynamics::Ensemble;
use hetalloc_core::resilience::DisturbanceKind;
use hetalloc_core::sim::{EventKind, Mode, RunTrace, TraceEvent};
use serde::{Deserialize, Serialize};

const MAX_DIM: usize = 3;

fn num(v: f64) -> String {
    format!("{v}")
}

fn trace_header(n_tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "robot", "x1", "x2", "x3", "u1", "u2", "u3"].map(String::from).to_vec();
    h.extend((1..=n_tasks).map(|m| format!("delta_{m}")));
    h.push("alpha".into());
    h.push("V".into());
    h
}

pub fn write_trace_csv<W: Write>(trace: &RunTrace, n_tasks: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(n_tasks))?;
    for row in &trace.rows {
        for i in 0..row.x.len() {
            let mut rec = vec![num(row.t), i.to_string()];
            let x = row.x.robot(i);
            if x.len() > MAX_DIM {
                bail!("states with more than {MAX_DIM} components do not fit the trace format");
            }
            rec.extend((0..MAX_DIM).map(|k| x.get(k).map_or(String::new(), |&v| num(v))));
            rec.extend((0..MAX_DIM).map(|k| row.u[i].get(k).map_or(String::new(), |&v| num(v))));
            rec.extend(row.delta[i].iter().map(|&v| num(v)));
            rec.push(row.alpha.task_of(i).map_or(String::new(), |m| m.to_string()));
            rec.push(num(row.v));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_steps_csv<W: Write>(trace: &RunTrace, n_tasks: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = ["step", "t", "V", "cost", "nodes", "kkt", "input_gap"].map(String::from).to_vec();
    head.extend((1..=n_tasks).map(|m| format!("h_{m}")));
    w.write_record(&head)?;
    for (row, gap) in trace.rows.iter().zip(trace.input_gap()) {
        let mut rec = vec![
            row.step.to_string(),
            num(row.t),
            num(row.v),
            row.cost.map_or(String::new(), num),
            row.nodes.to_string(),
            num(row.kkt),
            gap.map_or(String::new(), num),
        ];
        rec.extend(row.h.iter().map(|&v| num(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_specialization_csv<W: Write>(trace: &RunTrace, n_tasks: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["t".to_string(), "robot".to_string()];
    head.extend((1..=n_tasks).map(|m| format!("s_{m}")));
    w.write_record(&head)?;
    for row in &trace.rows {
        for (i, s) in row.s.iter().enumerate() {
            let mut rec = vec![num(row.t), i.to_string()];
            rec.extend(s.iter().map(|&v| num(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    FeatureFailure {
        step: usize,
        t: f64,
        robot: usize,
        feature: usize,
    },
    WeightChange {
        step: usize,
        t: f64,
        capability: usize,
        edge: usize,
        weight: f64,
    },
    Reallocation {
        step: usize,
        t: f64,
        from: Vec<Option<usize>>,
        to: Vec<Option<usize>>,
    },
    Impeded {
        step: usize,
        t: f64,
        robot: usize,
    },
    Clamped {
        step: usize,
        t: f64,
        robot: usize,
    },
}

impl From<&TraceEvent> for EventRecord {
    fn from(e: &TraceEvent) -> Self {
        let (step, t) = (e.step, e.t);
        match &e.kind {
            EventKind::Disturbance(DisturbanceKind::FeatureFailure { robot, feature }) => EventRecord::FeatureFailure {
                step,
                t,
                robot: *robot,
                feature: *feature,
            },
            EventKind::Disturbance(DisturbanceKind::WeightChange {
                capability,
                edge,
                weight,
            }) => EventRecord::WeightChange {
                step,
                t,
                capability: *capability,
                edge: *edge,
                weight: *weight,
            },
            EventKind::Reallocation { from, to } => EventRecord::Reallocation {
                step,
                t,
                from: from.0.clone(),
                to: to.0.clone(),
            },
            EventKind::Impeded { robot } => EventRecord::Impeded { step, t, robot: *robot },
            EventKind::Clamped { robot } => EventRecord::Clamped { step, t, robot: *robot },
        }
    }
}

impl EventRecord {
    pub fn time(&self) -> f64 {
        match *self {
            EventRecord::FeatureFailure { t, .. }
            | EventRecord::WeightChange { t, .. }
            | EventRecord::Reallocation { t, .. }
            | EventRecord::Impeded { t, .. }
            | EventRecord::Clamped { t, .. } => t,
        }
    }

    /// Known disturbances and first contact with a field.
    pub fn is_disturbance(&self) -> bool {
        matches!(
            self,
            EventRecord::FeatureFailure { .. } | EventRecord::WeightChange { .. } | EventRecord::Impeded { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub scenario: String,
    pub mode: String,
    pub latency: usize,
    pub seed: u64,
    pub steps: usize,
    pub events: Vec<EventRecord>,
}

impl EventLog {
    pub fn of(trace: &RunTrace) -> Self {
        Self {
            scenario: trace.scenario.clone(),
            mode: match trace.mode {
                Mode::Centralized => "centralized",
                Mode::Mixed => "mixed",
            }
            .into(),
            latency: trace.latency,
            seed: trace.seed,
            steps: trace.rows.len(),
            events: trace.events.iter().map(EventRecord::from).collect(),
        }
    }
}

/// Writes the four trace files into `dir` (created if missing).
pub fn write_run(dir: &Path, trace: &RunTrace, n_tasks: usize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    };
    write_trace_csv(trace, n_tasks, open("trace.csv")?)?;
    write_steps_csv(trace, n_tasks, open("steps.csv")?)?;
    write_specialization_csv(trace, n_tasks, open("specialization.csv")?)?;
    let mut ev = open("events.json")?;
    serde_json::to_writer_pretty(&mut ev, &EventLog::of(trace))?;
    ev.flush()?;
    Ok(())
}

/// One step of a trace read back from `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub t: f64,
    pub x: Ensemble,
    pub u: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub alpha: Allocation,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTrace {
    pub n_tasks: usize,
    pub steps: Vec<LoggedStep>,
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse::<f64>().with_context(|| format!("bad number '{s}'"))?))
    }
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<LoggedTrace> {
    let mut r = csv::Reader::from_reader(input);
    let head = r.headers()?.clone();
    let n_tasks = head.iter().filter(|h| h.starts_with("delta_")).count();
    let expected = trace_header(n_tasks);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        bail!("unexpected trace header; want {}", expected.join(","));
    }
    let mut steps: Vec<LoggedStep> = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    let flush = |steps: &mut Vec<LoggedStep>, states: &mut Vec<Vec<f64>>| {
        if let Some(last) = steps.last_mut() {
            last.x = Ensemble::from_robots(states);
        }
        states.clear();
    };
    for rec in r.records() {
        let rec = rec?;
        let t: f64 = rec[0].parse().context("bad time")?;
        let robot: usize = rec[1].parse().context("bad robot index")?;
        let x: Vec<f64> = (2..5).map(|k| parse_opt(&rec[k])).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        let u: Vec<f64> = (5..8).map(|k| parse_opt(&rec[k])).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        let delta: Vec<f64> = (8..8 + n_tasks).map(|k| rec[k].parse::<f64>().context("bad slack")).collect::<Result<_>>()?;
        let alpha = match &rec[8 + n_tasks] {
            "" => None,
            s => Some(s.parse::<usize>().context("bad task index")?),
        };
        let v: f64 = rec[9 + n_tasks].parse().context("bad V")?;
        if robot == 0 {
            flush(&mut steps, &mut states);
            steps.push(LoggedStep {
                t,
                x: Ensemble::new(x.len(), Vec::new()),
                u: Vec::new(),
                delta: Vec::new(),
                alpha: Allocation(Vec::new()),
                v,
            });
        }
        let Some(step) = steps.last_mut() else {
            bail!("trace must start with robot 0");
        };
        if robot != step.u.len() || step.t != t {
            bail!("trace rows out of order at t = {t}, robot {robot}");
        }
        states.push(x);
        step.u.push(u);
        step.delta.push(delta);
        step.alpha.0.push(alpha);
    }
    flush(&mut steps, &mut states);
    Ok(LoggedTrace { n_tasks, steps })
}

/// One row of `steps.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub v: f64,
    pub cost: Option<f64>,
    pub nodes: usize,
    pub kkt: f64,
    pub input_gap: Option<f64>,
    pub h: Vec<f64>,
}

pub fn read_steps_csv<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let n_h = r.headers()?.iter().filter(|h| h.starts_with("h_")).count();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(StepRecord {
                step: rec[0].parse().context("bad step")?,
                t: rec[1].parse().context("bad time")?,
                v: rec[2].parse().context("bad V")?,
                cost: parse_opt(&rec[3])?,
                nodes: rec[4].parse().context("bad node count")?,
                kkt: rec[5].parse().context("bad KKT residual")?,
                input_gap: parse_opt(&rec[6])?,
                h: (7..7 + n_h).map(|k| rec[k].parse::<f64>().context("bad h")).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// `specialization.csv` as `[step][robot][task]`.
pub fn read_specialization_csv<R: Read>(input: R) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let robot: usize = rec[1].parse().context("bad robot index")?;
        let s: Vec<f64> = (2..rec.len()).map(|k| rec[k].parse::<f64>().context("bad specialization")).collect::<Result<_>>()?;
        if robot == 0 {
            out.push(Vec::new());
        }
        match out.last_mut() {
            Some(step) if step.len() == robot => step.push(s),
            _ => bail!("specialization rows out of order"),
        }
    }
    Ok(out)
}

pub fn read_event_log(path: &Path) -> Result<EventLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;
    use hetalloc_core::sim::run_centralized;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut file = bundled::get("example3").unwrap();
        file.sim.duration = 1.5;
        let sc = file.build().unwrap();
        let trace = run_centralized(&sc).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, sc.n_tasks(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,robot,x1,x2,x3,u1,u2,u3,delta_1,delta_2,alpha,V\n"));
        let back = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(back.n_tasks, 2);
        assert_eq!(back.steps.len(), trace.rows.len());
        for (a, b) in trace.rows.iter().zip(&back.steps) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.x, b.x);
            assert_eq!(a.u, b.u);
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.v, b.v);
        }
    }

    #[test]
    fn event_log_lists_disturbances() {
        let mut file = bundled::get("example3").unwrap();
        file.sim.duration = 1.5;
        let trace = run_centralized(&file.build().unwrap()).unwrap();
        let log = EventLog::of(&trace);
        let text = serde_json::to_string(&log).unwrap();
        let back: EventLog = serde_json::from_str(&text).unwrap();
        assert_eq!(back, log);
        assert!(log.events.iter().any(|e| matches!(e, EventRecord::FeatureFailure { robot: 0, feature: 2, .. })));
        assert!(log.events.iter().any(|e| matches!(e, EventRecord::Reallocation { .. })));
    }

    #[test]
    fn step_and_specialization_files_read_back() {
        let mut file = bundled::get("example2").unwrap();
        file.sim.duration = 0.5;
        let sc = file.build().unwrap();
        let trace = run_centralized(&sc).unwrap();
        let mut buf = Vec::new();
        write_steps_csv(&trace, sc.n_tasks(), &mut buf).unwrap();
        let steps = read_steps_csv(buf.as_slice()).unwrap();
        assert_eq!(steps.len(), trace.rows.len());
        for (a, b) in steps.iter().zip(&trace.rows) {
            assert_eq!((a.step, a.t, a.v, a.cost, a.nodes, a.kkt), (b.step, b.t, b.v, b.cost, b.nodes, b.kkt));
            assert_eq!(a.h, b.h);
            assert_eq!(a.input_gap, None);
        }
        let mut buf = Vec::new();
        write_specialization_csv(&trace, sc.n_tasks(), &mut buf).unwrap();
        let s = read_specialization_csv(buf.as_slice()).unwrap();
        assert_eq!(s, trace.rows.iter().map(|r| r.s.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn malformed_traces_are_rejected() {
        assert!(read_trace_csv("a,b\n1,2\n".as_bytes()).is_err());
        let text = "t,robot,x1,x2,x3,u1,u2,u3,delta_1,alpha,V\n0,1,0,0,,0,0,,0,,0\n";
        assert!(read_trace_csv(text.as_bytes()).is_err());
    }
}
