//! Browser bindings for the simulator. Each export takes and returns JSON
//! strings; the plain functions are usable without a browser.

use mana_sim::ckptstore::encode_image;
use mana_sim::engine::EngineId;
use mana_sim::explore::{self, ExploreConfig};
use mana_sim::harness::{self, RunOptions};
use mana_sim::runtime::Mutations;
use mana_sim::workload::WorkloadSpec;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Trace records returned to the page are capped to keep the DOM small.
pub const TRACE_LIMIT: usize = 400;

fn engine(name: &str) -> Result<EngineId, String> {
    match name {
        "linear" => Ok(EngineId::LINEAR),
        "binomial" => Ok(EngineId::BINOMIAL),
        other => Err(format!("unknown engine `{other}`")),
    }
}

fn spec(json: &str) -> Result<WorkloadSpec, String> {
    let s: WorkloadSpec = serde_json::from_str(json).map_err(|e| e.to_string())?;
    s.validate().map_err(|e| e.to_string())?;
    if s.world_size > 16 || s.steps > 200 {
        return Err("demo limits: at most 16 ranks and 200 steps".into());
    }
    Ok(s)
}

/// Runs a workload, optionally checkpointing at one event count.
pub fn run(spec_json: &str, engine_name: &str, seed: u64, ckpt_at: Option<u64>) -> Result<Value, String> {
    let spec = spec(spec_json)?;
    let opts = RunOptions::new(engine(engine_name)?, seed);
    let out = harness::run_with_checkpoints(&spec, &opts, ckpt_at.as_slice()).map_err(|e| e.to_string())?;
    Ok(json!({
        "status": out.status,
        "digest": out.digest,
        "events": out.events,
        "metrics": harness::metrics(&out.trace),
        "violations": out.violations,
        "trace_len": out.trace.len(),
        "trace": &out.trace[..out.trace.len().min(TRACE_LIMIT)],
    }))
}

/// Checkpoints at `at`, then restarts the image set under `restart_engine`
/// and compares digests with an uninterrupted run.
pub fn checkpoint_restart(spec_json: &str, engine_name: &str, seed: u64, at: u64, restart_engine: &str) -> Result<Value, String> {
    let spec = spec(spec_json)?;
    let opts = RunOptions::new(engine(engine_name)?, seed);
    let native = harness::run(&spec, &opts).map_err(|e| e.to_string())?;
    let ckpt = harness::run_with_checkpoints(&spec, &opts, &[at]).map_err(|e| e.to_string())?;
    let set = ckpt.image_sets.first().ok_or("checkpoint did not complete")?;
    let images: Vec<Value> = set
        .states
        .iter()
        .map(|s| {
            let bytes = encode_image(s).map_err(|e| e.to_string())?;
            Ok(json!({"rank": s.rank, "pc": s.pc, "bytes": bytes.len(), "drained": s.drained.len()}))
        })
        .collect::<Result<_, String>>()?;
    let restarted = harness::restart(set, &RunOptions::new(engine(restart_engine)?, seed)).map_err(|e| e.to_string())?;
    Ok(json!({
        "created_at_event": set.manifest.created_at_event,
        "images": images,
        "native_digest": native.digest,
        "restarted_digest": restarted.digest,
        "restart_status": restarted.status,
        "equal": native.digest == restarted.digest,
    }))
}

/// Exhaustively explores one built-in scenario, optionally with a mutant.
pub fn explore_scenario(name: &str, engine_name: &str, mutant: &str) -> Result<Value, String> {
    let n: u32 = name.rsplit('-').next().and_then(|s| s.parse().ok()).ok_or("scenario name must end in its world size")?;
    if n != 2 {
        return Err("the browser demo explores two-rank scenarios only".into());
    }
    let (_, programs) = explore::scenarios(n).into_iter().find(|(s, _)| s == name).ok_or(format!("unknown scenario `{name}`"))?;
    let mut m = Mutations::NONE;
    match mutant {
        "" | "none" => {}
        "skip-extra-iteration" => m.skip_extra_iteration = true,
        "no-phase-gate" => m.no_phase_gate = true,
        "drop-drained" => m.drop_drained = true,
        other => return Err(format!("unknown mutant `{other}`")),
    }
    let mut cfg = ExploreConfig::new(name, engine(engine_name)?, programs).with_mutations(m);
    cfg.parallel = false;
    let report = explore::explore(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_value(report).map_err(|e| e.to_string())
}

/// Names of the scenarios `explore` accepts.
pub fn scenario_names() -> Vec<String> {
    explore::scenarios(2).into_iter().map(|(s, _)| s).collect()
}

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = runWorkload)]
pub fn run_workload_js(spec_json: &str, engine: &str, seed: u64, ckpt_at: Option<u64>) -> Result<String, JsError> {
    js(run(spec_json, engine, seed, ckpt_at))
}

#[wasm_bindgen(js_name = checkpointRestart)]
pub fn checkpoint_restart_js(spec_json: &str, engine: &str, seed: u64, at: u64, restart_engine: &str) -> Result<String, JsError> {
    js(checkpoint_restart(spec_json, engine, seed, at, restart_engine))
}

#[wasm_bindgen(js_name = exploreScenario)]
pub fn explore_scenario_js(name: &str, engine: &str, mutant: &str) -> Result<String, JsError> {
    js(explore_scenario(name, engine, mutant))
}

#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names_js() -> String {
    Value::from(scenario_names()).to_string()
}
