//! Browser bindings: floorplan explorer, utilization sweep and a
//! step-by-step in-array tournament. Every export takes plain values and
//! returns a JSON string.

use fbsim_core::baseline::BaselineKind;
use fbsim_core::config::HardwareConfig;
use fbsim_core::crossbar::CrossbarState;
use fbsim_core::datamap::{map_inputs, plan_tournament, Feed};
use fbsim_core::floorplan::Placement;
use fbsim_core::logic::{run_tournament, TournamentMode};
use fbsim_core::model::{benchmarks, ModelGraph};
use fbsim_core::plan::{build_plan, PlanOptions};
use fbsim_core::session::{baseline_run, compare, reconfig_run};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn model(name: &str) -> Result<ModelGraph, String> {
    benchmarks::load(name).ok_or_else(|| format!("unknown model `{name}`"))
}

/// Blocks of every array of the plan for `name` on a `side × side` array.
pub fn floorplan_json(name: &str, side: usize, canonical: bool) -> Result<String, String> {
    let g = model(name)?;
    let plan = build_plan(
        &g,
        (side, side),
        PlanOptions {
            canonical,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let cells = (side * side) as f64;
    let imas: Vec<Value> = plan
        .imas
        .iter()
        .map(|ima| {
            let fbs: Vec<Value> = ima
                .fbs
                .iter()
                .map(|f| {
                    json!({
                        "fb_id": f.fb_id,
                        "op": f.op_kind.name(),
                        "layer": f.layer,
                        "origin": [f.origin.0, f.origin.1],
                        "extent": [f.extent.0, f.extent.1],
                        "tile": [f.bx, f.by],
                        "dataflow": f.dataflow.name(),
                        "mapped_cells": f.mapped_cells(),
                    })
                })
                .collect();
            let layers: Vec<u32> = plan.groups[ima.group]
                .layers
                .iter()
                .map(|&i| g.layers[i].id)
                .collect();
            json!({
                "ima": ima.ima,
                "group": ima.group,
                "layers": layers,
                "spatial": ima.mapped_cells() as f64 / cells,
                "fbs": fbs,
            })
        })
        .collect();
    Ok(json!({ "model": g.name, "array": side, "imas": imas }).to_string())
}

/// Mean spatial utilization of the static mappings and of the
/// reconfigurable plan per array size, plus the 512 comparison.
pub fn utilization_json(name: &str) -> Result<String, String> {
    let g = model(name)?;
    let cfg = HardwareConfig::reference();
    let mut rows = Vec::new();
    for side in [128usize, 256, 512] {
        let fixed =
            baseline_run(&g, &cfg, &BaselineKind::Static(side)).map_err(|e| e.to_string())?;
        let sized = HardwareConfig {
            array_rows: side,
            array_cols: side,
            ..cfg.clone()
        };
        let reconfig = reconfig_run(&g, &sized, PlanOptions::default())
            .ok()
            .map(|r| r.mean_spatial);
        rows.push(json!({ "array": side, "static": fixed.mean_spatial, "reconfig": reconfig }));
    }
    let report = compare(
        &g,
        &cfg,
        PlanOptions::default(),
        &[BaselineKind::Static(512), BaselineKind::MultiSize],
    )
    .map_err(|e| e.to_string())?;
    let runs: Vec<Value> = report
        .runs
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "cycles": r.total_cycles,
                "mean_spatial": r.mean_spatial,
                "mean_temporal": r.mean_temporal,
                "spatial_stddev": r.spatial_stddev,
            })
        })
        .collect();
    Ok(json!({ "model": g.name, "sweep": rows, "runs": runs, "speedup_vs_static_512": report.relative[0].speedup }).to_string())
}

/// Play a max tournament over `codes` in a crossbar tile and return every
/// level's slot contents, as the stepper shows them.
pub fn tournament_json(codes: &[u32], bits: usize) -> Result<String, String> {
    if codes.is_empty() || codes.len() > 64 || !(1..=8).contains(&bits) {
        return Err("need 1 to 64 elements of 1 to 8 bits".into());
    }
    if let Some(c) = codes.iter().find(|&&c| c >= 1 << bits) {
        return Err(format!("{c} does not fit in {bits} bits"));
    }
    let layout = plan_tournament(codes.len(), bits);
    let tile = Placement {
        fb_id: 1,
        origin: (0, 0),
        extent: (layout.rows(), layout.leaf_columns),
    };
    let mut state = CrossbarState::new(tile.extent.0, tile.extent.1, 9);
    state.cells = map_inputs(&layout, codes).map_err(|e| e.to_string())?;
    let cost = HardwareConfig::reference().logic_cost();
    let out = run_tournament(&mut state, tile, &layout, TournamentMode::Max, cost)
        .map_err(|e| e.to_string())?;
    let read = |level: usize, index: usize| {
        let (r, c) = layout.slot_cell(level, index);
        (0..bits).fold(0u32, |acc, k| acc << 1 | state.cells.get(r, c + k) as u32)
    };
    let levels: Vec<Value> = (0..=layout.levels)
        .map(|level| {
            let slots: Vec<Value> = (0..layout.slots[level])
                .map(|i| {
                    let feed = match level {
                        0 => json!("leaf"),
                        _ => match layout.feed(level, i) {
                            Feed::Match(a, b) => json!([a, b]),
                            Feed::Bye(a) => json!(a),
                        },
                    };
                    json!({ "value": read(level, i), "from": feed })
                })
                .collect();
            json!({ "level": level, "slots": slots })
        })
        .collect();
    Ok(json!({
        "winner": out.winner,
        "cycles": out.cycles,
        "cycles_per_match": cost.per_match(bits),
        "matches": layout.matches(),
        "nor_gates": out.gates,
        "tile": [layout.rows(), layout.leaf_columns],
        "levels": levels,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn floorplan(name: &str, side: usize, canonical: bool) -> Result<String, JsError> {
    floorplan_json(name, side, canonical).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn utilization(name: &str) -> Result<String, JsError> {
    utilization_json(name).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tournament(codes: Vec<u32>, bits: usize) -> Result<String, JsError> {
    tournament_json(&codes, bits).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn models() -> String {
    json!(benchmarks::NAMES).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_floorplan_has_two_blocks() {
        let v: Value =
            serde_json::from_str(&floorplan_json("toy-conv-relu-max", 512, false).unwrap())
                .unwrap();
        assert_eq!(v["imas"][0]["fbs"].as_array().unwrap().len(), 2);
        assert!(floorplan_json("nope", 512, false).is_err());
    }

    #[test]
    fn tournament_levels_end_in_the_maximum() {
        let v: Value = serde_json::from_str(&tournament_json(&[1, 3, 2], 2).unwrap()).unwrap();
        assert_eq!(v["winner"], 3);
        let levels = v["levels"].as_array().unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[2]["slots"][0]["value"], 3);
        assert_eq!(v["cycles"], 2 * 16);
        assert!(tournament_json(&[4], 2).is_err());
    }

    #[test]
    fn sweep_covers_three_sizes() {
        let v: Value =
            serde_json::from_str(&utilization_json("toy-conv-relu-max").unwrap()).unwrap();
        assert_eq!(v["sweep"].as_array().unwrap().len(), 3);
    }
}
