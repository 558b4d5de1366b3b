//! Mixed runs with the allocator on its own thread.
//!
//! The driver owns the world and steps it. Allocation jobs go to a worker
//! through a single-slot mailbox where a newer job replaces an unsolved one.
//! Results come back through a second slot. An allocation started at step
//! `k` is published at step `k + latency`; if the worker is late, the driver
//! waits for it, which keeps runs reproducible and equal to
//! [`run_mixed`](hetalloc_core::sim::run_mixed).

use std::sync::{Condvar, Mutex};
use std::thread;

use hetalloc_core::allocator::{Allocation, AllocationSolution};
use hetalloc_core::sim::{AllocationJob, MixedOptions, Mode, RunTrace, Scenario, SimError, Simulation};

/// Latest-wins single-slot mailbox.
#[derive(Debug)]
pub struct Mailbox<T> {
    slot: Mutex<(Option<T>, bool)>,
    ready: Condvar,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self {
            slot: Mutex::new((None, false)),
            ready: Condvar::new(),
        }
    }
}

impl<T> Mailbox<T> {
    /// Stores `item`, dropping any value nobody took yet. Returns whether one was dropped.
    pub fn put(&self, item: T) -> bool {
        let mut g = self.slot.lock().expect("mailbox poisoned");
        let replaced = g.0.replace(item).is_some();
        self.ready.notify_all();
        replaced
    }

    /// Blocks until a value arrives; `None` once closed and empty.
    pub fn take(&self) -> Option<T> {
        let mut g = self.slot.lock().expect("mailbox poisoned");
        loop {
            if let Some(v) = g.0.take() {
                return Some(v);
            }
            if g.1 {
                return None;
            }
            g = self.ready.wait(g).expect("mailbox poisoned");
        }
    }

    pub fn try_take(&self) -> Option<T> {
        self.slot.lock().expect("mailbox poisoned").0.take()
    }

    pub fn close(&self) {
        self.slot.lock().expect("mailbox poisoned").1 = true;
        self.ready.notify_all();
    }
}

type Solved = (usize, Result<AllocationSolution, SimError>);

fn worker(jobs: &Mailbox<AllocationJob>, results: &Mailbox<Solved>) {
    while let Some(job) = jobs.take() {
        let out = job.solve();
        results.put((job.step, out));
    }
    results.close();
}

/// Mixed run with the allocator on a worker thread.
///
/// With latency 0 there is nothing to overlap and the run is serial.
pub fn run_threaded(sc: &Scenario, opts: &MixedOptions) -> Result<RunTrace, SimError> {
    if opts.latency == 0 {
        return hetalloc_core::sim::run_mixed(sc, opts);
    }
    let jobs = Mailbox::<AllocationJob>::default();
    let results = Mailbox::<Solved>::default();
    thread::scope(|s| {
        s.spawn(|| worker(&jobs, &results));
        let out = drive(sc, opts, &jobs, &results);
        jobs.close();
        out
    })
}

fn drive(
    sc: &Scenario,
    opts: &MixedOptions,
    jobs: &Mailbox<AllocationJob>,
    results: &Mailbox<Solved>,
) -> Result<RunTrace, SimError> {
    let mut sim = Simulation::new(sc)?;
    let mut published = Allocation::idle(sc.n_robots());
    // (publish step, job step); the bootstrap solution is its own first job.
    let mut pending: Option<(usize, usize)> = None;
    let mut bootstrap: Option<AllocationSolution> = None;
    let mut stats: Vec<(usize, f64, usize)> = Vec::new();
    for step in 0..sc.steps() {
        let view = sim.prepare(step)?;
        let mut fresh: Option<AllocationSolution> = None;
        if step == 0 {
            let sol = sim.allocate(&view, Some(&published))?;
            published = sol.alpha.clone();
            stats.push((0, sol.objective, sol.nodes));
            bootstrap = Some(sol.clone());
            fresh = Some(sol);
            pending = Some((opts.latency, 0));
        } else if let Some((_, job_step)) = pending.filter(|(due, _)| *due == step) {
            let sol = if job_step == 0 && bootstrap.is_some() {
                bootstrap.take().expect("checked")
            } else {
                let (done, out) = results.take().ok_or_else(|| SimError::InvalidScenario("allocator thread stopped".into()))?;
                debug_assert_eq!(done, job_step);
                let sol = out?;
                stats.push((job_step, sol.objective, sol.nodes));
                sol
            };
            published = sol.alpha;
            jobs.put(sim.job(&view, Some(&published)));
            pending = Some((step + opts.latency, step));
        }
        let inputs = sim.execute(&view, &published);
        let u_ref = if opts.compare {
            let sol = match fresh.take() {
                Some(s) => s,
                None => sim.allocate(&view, Some(&published))?,
            };
            Some(sol.u)
        } else {
            None
        };
        sim.commit(&view, published.clone(), inputs, u_ref, None);
    }
    // The last job is never published, but its cost belongs in the trace.
    if let Some((_, job_step)) = pending.filter(|(_, k)| *k > 0 || bootstrap.is_none()) {
        if let Some((_, Ok(sol))) = results.take() {
            stats.push((job_step, sol.objective, sol.nodes));
        }
    }
    let mut trace = sim.finish(Mode::Mixed, opts.latency);
    for (k, cost, nodes) in stats {
        if let Some(row) = trace.rows.get_mut(k) {
            row.cost = Some(cost);
            row.nodes = nodes;
        }
    }
    Ok(trace)
}
