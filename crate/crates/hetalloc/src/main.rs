use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hetalloc::report::{analyze, write_report, AnalyzeOptions};
use hetalloc::runner::run_threaded;
use hetalloc::trace::write_run;
use hetalloc::{load_scenario, plots};
use hetalloc_core::sim::{check_milestones, run_centralized, MixedOptions, RunTrace, Scenario, SimError, Simulation, MILESTONE_TOL};

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_MILESTONE: u8 = 3;

#[derive(Parser)]
#[command(name = "hetalloc", version, about = "Task allocation and execution for heterogeneous robot teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Centralized,
    Mixed,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace files.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "centralized")]
        mode: RunMode,
        #[arg(long)]
        out: PathBuf,
        /// Recorded in the trace; the simulation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// Allocation latency in steps for mixed runs; defaults to the scenario's.
        #[arg(long)]
        latency: Option<usize>,
        /// Also write SVG charts.
        #[arg(long)]
        plots: bool,
    },
    /// Mixed run alongside an allocation solved at every step.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        latency: Option<usize>,
        #[arg(long)]
        plots: bool,
    },
    /// Lyapunov trace and diagnostics of a written run.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario of the run; needed for everything beyond the Lyapunov trace.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Step for the LMI probe and the staleness bound.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Where to write the report; defaults to the trace's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the initial allocation and print it as JSON.
    Allocate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

/// Failures that map to dedicated exit codes.
enum Outcome {
    Done,
    MilestonesMissed(usize),
}

fn load(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading {}", path.display()))
}

fn finish_run(sc: &Scenario, trace: &RunTrace, out: &Path, plot: bool) -> Result<Outcome> {
    write_run(out, trace, sc.n_tasks())?;
    if plot {
        plots::write_plots(out, trace)?;
    }
    let results = check_milestones(&sc.milestones, trace, MILESTONE_TOL);
    let mut missed = 0;
    for r in &results {
        let seen = r.observed.map_or("never".to_string(), |t| format!("{t:.3} s"));
        let mark = if r.passed { "ok" } else { "MISSED" };
        println!("{mark:>6}  {}: expected {:.3} s, seen {seen}", r.label, r.expected);
        missed += usize::from(!r.passed);
    }
    let kkt = trace.rows.iter().map(|r| r.kkt).fold(0.0, f64::max);
    println!("{} steps written to {}; largest KKT residual {kkt:.2e}", trace.rows.len(), out.display());
    Ok(if missed > 0 { Outcome::MilestonesMissed(missed) } else { Outcome::Done })
}

fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Run {
            scenario,
            mode,
            out,
            seed,
            latency,
            plots,
        } => {
            let mut sc = load(&scenario)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let trace = match mode {
                RunMode::Centralized => run_centralized(&sc)?,
                RunMode::Mixed => run_threaded(
                    &sc,
                    &MixedOptions {
                        latency: latency.unwrap_or(sc.latency),
                        compare: false,
                    },
                )?,
            };
            finish_run(&sc, &trace, &out, plots)
        }
        Command::Compare {
            scenario,
            out,
            latency,
            plots,
        } => {
            let sc = load(&scenario)?;
            let opts = MixedOptions {
                latency: latency.unwrap_or(sc.latency),
                compare: true,
            };
            let trace = run_threaded(&sc, &opts)?;
            let outcome = finish_run(&sc, &trace, &out, plots)?;
            let mut w = csv::Writer::from_path(out.join("input_gap.csv"))?;
            w.write_record(["t", "gap"])?;
            for (r, g) in trace.rows.iter().zip(trace.input_gap()) {
                w.write_record([format!("{}", r.t), g.map_or(String::new(), |g| format!("{g}"))])?;
            }
            w.flush()?;
            let worst = trace.input_gap().into_iter().flatten().fold(0.0, f64::max);
            println!("largest input gap {worst:.3e}");
            Ok(outcome)
        }
        Command::Analyze {
            trace,
            scenario,
            step,
            out,
        } => {
            let sc = scenario.as_deref().map(load).transpose()?;
            let opts = AnalyzeOptions {
                step,
                ..AnalyzeOptions::default()
            };
            let (report, files) = analyze(&trace, sc.as_ref(), &opts)?;
            let dir = out.unwrap_or_else(|| trace.parent().unwrap_or(Path::new(".")).to_path_buf());
            write_report(&dir, &report, &files)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(Outcome::Done)
        }
        Command::Allocate { scenario } => {
            let sc = load(&scenario)?;
            let mut sim = Simulation::new(&sc)?;
            let view = sim.prepare(0)?;
            let sol = sim.allocate(&view, None)?;
            let alpha: Vec<Option<usize>> = (0..sc.n_robots()).map(|i| sol.alpha.task_of(i)).collect();
            let json = serde_json::json!({
                "alpha": alpha,
                "objective": sol.objective,
                "nodes": sol.nodes,
                "optimal": sol.optimal,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
            Ok(Outcome::Done)
        }
    }
}

/// The error chain, leaving out causes the outer messages already quote.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::MilestonesMissed(n)) => {
            eprintln!("{n} milestone(s) missed");
            ExitCode::from(EXIT_MILESTONE)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let infeasible = e.downcast_ref::<SimError>().is_some_and(SimError::is_infeasible);
            ExitCode::from(if infeasible { EXIT_INFEASIBLE } else { 1 })
        }
    }
}
