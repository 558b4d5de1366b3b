//! Capability-aware task allocation and execution for heterogeneous robot teams.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the feature and
//! capability model, barrier-function task encodings, a dense active-set QP
//! solver, the mixed-integer allocator, the per-robot executor, the
//! specialization update laws, a handful of convergence diagnostics and a
//! deterministic single-threaded simulation loop.
//!
//! File formats, threading, plotting and the command-line tool live in the
//! `hetalloc` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod allocator;
pub mod analysis;
pub mod dynamics;
pub mod executor;
pub mod model;
pub mod qp;
pub mod resilience;
pub mod sim;
pub mod tasks;

pub use allocator::{
    brute_force_allocation, build_priority_constraints, solve_allocation, Allocation,
    AllocationProblem, AllocationSolution, AllocatorParams, AllocError, PriorityConstraintSet,
};
pub use dynamics::{Dynamics, Ensemble, SingleIntegrator};
pub use executor::{execute_step, ExecutionInput, ExecutionOutput};
pub use model::{HeterogeneityModel, Hyperedge, ModelError, Specialization};
pub use qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
pub use tasks::{ClassK, TaskSpec};
pub use sim::{run_centralized, run_mixed, MixedOptions, RunTrace, Scenario, SimError, Simulation};
