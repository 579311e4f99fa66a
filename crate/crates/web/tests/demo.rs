use mana_sim_web::{checkpoint_restart, explore_scenario, run, scenario_names};

const SPEC: &str = r#"{"name":"iter-allreduce","world_size":4,"steps":3,"payload_bytes":8,"seed":0}"#;

#[test]
fn run_returns_metrics_and_a_capped_trace() {
    let v = run(SPEC, "binomial", 2, None).unwrap();
    assert_eq!(v["status"], "completed");
    assert_eq!(v["metrics"]["collectives"], v["metrics"]["extra-barriers"]);
    assert!(v["trace"].as_array().unwrap().len() <= mana_sim_web::TRACE_LIMIT);
    let with_ckpt = run(SPEC, "binomial", 2, Some(20)).unwrap();
    assert_eq!(with_ckpt["digest"], v["digest"]);
    assert!(with_ckpt["metrics"]["ctl-messages"].as_u64().unwrap() > 0);
}

#[test]
fn restart_under_the_other_engine_matches() {
    let v = checkpoint_restart(SPEC, "linear", 1, 30, "binomial").unwrap();
    assert_eq!(v["equal"], true);
    assert_eq!(v["images"].as_array().unwrap().len(), 4);
}

#[test]
fn explore_reports_mutant_violations() {
    assert!(scenario_names().contains(&"single-allreduce-2".to_string()));
    let clean = explore_scenario("single-allreduce-2", "linear", "none").unwrap();
    assert_eq!(clean["violation_count"], 0);
    let bad = explore_scenario("single-allreduce-2", "linear", "no-phase-gate").unwrap();
    assert!(bad["violation_count"].as_u64().unwrap() > 0);
}

#[test]
fn bad_input_is_an_error_not_a_panic() {
    assert!(run("{}", "linear", 0, None).is_err());
    assert!(run(SPEC, "ring", 0, None).is_err());
    assert!(explore_scenario("overlapping-subcomms-3", "linear", "none").is_err());
    assert!(explore_scenario("single-allreduce-2", "linear", "bogus").is_err());
}
