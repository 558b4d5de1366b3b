use std::fs::File;
use std::io::BufReader;

use hetalloc::scenario::{bundled, ScenarioFile};
use hetalloc::trace::{read_event_log, read_specialization_csv, read_steps_csv, read_trace_csv, write_run, EventLog};
use hetalloc_core::sim::{run_centralized, run_mixed, MixedOptions};
use proptest::prelude::*;

#[test]
fn every_bundled_scenario_survives_a_json_round_trip() {
    for (name, _) in bundled::ALL {
        let file = bundled::get(name).unwrap();
        let again = ScenarioFile::from_json(&file.to_json()).unwrap();
        assert_eq!(again.build().unwrap(), file.build().unwrap(), "{name}");
    }
}

#[test]
fn written_runs_read_back_bit_for_bit() {
    let mut file = bundled::get("experiment").unwrap();
    file.sim.duration = 0.5;
    let sc = file.build().unwrap();
    let trace = run_mixed(&sc, &MixedOptions { latency: 4, compare: true }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &trace, sc.n_tasks()).unwrap();
    let open = |f: &str| BufReader::new(File::open(dir.path().join(f)).unwrap());

    let logged = read_trace_csv(open("trace.csv")).unwrap();
    assert_eq!(logged.n_tasks, sc.n_tasks());
    assert_eq!(logged.steps.len(), trace.rows.len());
    for (a, b) in logged.steps.iter().zip(&trace.rows) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.x, b.x);
        assert_eq!(a.u, b.u);
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.v, b.v);
    }
    let steps = read_steps_csv(open("steps.csv")).unwrap();
    for (a, b) in steps.iter().zip(&trace.rows) {
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.kkt, b.kkt);
        assert_eq!(a.h, b.h);
    }
    assert_eq!(steps.iter().map(|s| s.input_gap).collect::<Vec<_>>(), trace.input_gap());
    let spec = read_specialization_csv(open("specialization.csv")).unwrap();
    assert_eq!(spec, trace.rows.iter().map(|r| r.s.clone()).collect::<Vec<_>>());
    assert_eq!(read_event_log(&dir.path().join("events.json")).unwrap(), EventLog::of(&trace));
}

#[test]
fn scenario_errors_name_the_problem() {
    let mut file = bundled::get("example1").unwrap();
    file.robots.pop();
    let err = file.build().unwrap_err().to_string();
    assert!(err.contains("robot") || err.contains("column"), "{err}");
    assert!(ScenarioFile::from_json("{\"name\": \"x\"}").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Starting positions anywhere in the arena give a run whose files read back.
    #[test]
    fn shifted_starts_round_trip(dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
        let mut file = bundled::get("example1").unwrap();
        file.sim.duration = 0.2;
        for r in &mut file.robots {
            r.state[0] += dx;
            r.state[1] += dy;
        }
        let sc = file.build().unwrap();
        let trace = run_centralized(&sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &trace, sc.n_tasks()).unwrap();
        let logged = read_trace_csv(BufReader::new(File::open(dir.path().join("trace.csv")).unwrap())).unwrap();
        for (a, b) in logged.steps.iter().zip(&trace.rows) {
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(a.v, b.v);
        }
    }
}
