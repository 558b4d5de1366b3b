//! Scenario files, trace IO, plots, a threaded runner and the command-line
//! front end for `hetalloc-core`.

pub mod plots;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod trace;

pub use scenario::{load_scenario, ScenarioFile};
