//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every entry point takes plain text from the page's inputs and returns a JSON
//! string, so the functions are equally usable from native tests.

use serde_json::json;
use toolselect::baselines::{train_records, BaselineConfig, Router, RouterKind};
use toolselect::evalharness::{compare, PanelSize};
use toolselect::objective::{compsum_loss, compsum_weights, PanelCosts};
use toolselect::selector::{SelectionDistribution, SelectorConfig};
use toolselect::simworld::{generate_world, Split, WorldConfig};
use toolselect::trainer::{fit, TrainConfig};
use wasm_bindgen::prelude::*;

fn numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect()
}

/// `1`/`0` (or `true`/`false`) flags; an empty string means every slot is valid.
fn flags(s: &str, n: usize) -> Result<Vec<bool>, String> {
    if s.trim().is_empty() {
        return Ok(vec![true; n]);
    }
    let v: Vec<bool> = s
        .split(',')
        .map(str::trim)
        .map(|t| match t {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(format!("mask entry {t:?} is not 0 or 1")),
        })
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("{} mask entries for {n} scores", v.len()));
    }
    Ok(v)
}

fn distribution(scores: &str, mask: &str) -> Result<SelectionDistribution, String> {
    let r = numbers(scores)?;
    let m = flags(mask, r.len())?;
    SelectionDistribution::from_scores(r, m).map_err(|e| e.to_string())
}

/// Masked softmax over comma-separated scores.
#[wasm_bindgen]
pub fn masked_softmax(scores: &str, mask: &str) -> Result<String, String> {
    let d = distribution(scores, mask)?;
    Ok(json!({ "probs": d.probs, "selected": d.selected }).to_string())
}

/// Comp-sum weights and surrogate loss for one panel.
#[wasm_bindgen]
pub fn compsum(costs: &str, scores: &str, mask: &str) -> Result<String, String> {
    let d = distribution(scores, mask)?;
    let c = numbers(costs)?;
    let pc = PanelCosts::new(c, d.mask.clone()).map_err(|e| e.to_string())?;
    let w = compsum_weights(&pc).map_err(|e| e.to_string())?;
    let expected: f64 = d.probs.iter().zip(&pc.costs).zip(&pc.valid).filter(|(_, &v)| v).map(|((p, c), _)| p * c).sum();
    Ok(json!({
        "weights": w,
        "probs": d.probs,
        "loss": compsum_loss(&d, &w, 1e-12),
        "expected_cost": expected,
        "selected_cost": pc.costs[d.selected],
        "oracle_cost": pc.costs[pc.oracle_slot()],
    })
    .to_string())
}

/// Generates a small world, trains a narrow selector for `epochs` epochs and
/// compares it with the baselines on seed-paired test panels.
#[wasm_bindgen]
pub fn tiny_world(seed: u32, epochs: u32) -> Result<String, String> {
    let seed = u64::from(seed);
    let err = |e: toolselect::Error| e.to_string();
    let wc = WorldConfig { n_train: 600, n_val: 100, n_test: 300, ref_size: 6, tools_per_task: 8, ..WorldConfig::default() };
    let world = generate_world(&wc, seed).map_err(err)?;
    let sc = SelectorConfig { hidden: 32, coverage_hidden: 16, ..world.selector_config() };
    let cfg = TrainConfig { lr: 1e-3, max_epochs: epochs.clamp(1, 30) as usize, ..TrainConfig::default() };
    let r = fit(&cfg, &sc, &world, seed, |_| {}).map_err(err)?;
    let recs = train_records(&world, Split::Train).map_err(err)?;
    let gb = Router::fit(RouterKind::GlobalBest, &recs, &BaselineConfig::default(), seed).map_err(err)?;
    let ts = Router::ToolSelect(r.params);
    let routers: Vec<(&str, &Router)> = vec![("Random", &Router::Random), ("Oracle", &Router::Oracle), ("GlobalBest", &gb), ("ToolSelect", &ts)];
    let reps = compare(&routers, &world, Split::Test, PanelSize::Sampled(6), seed + 100).map_err(err)?;
    let rows: Vec<_> = reps.iter().map(|m| json!({ "router": m.router, "mean_cost": m.mean_cost, "gap_closure": m.gap_closure })).collect();
    let log: Vec<String> = r.history.iter().map(|e| e.log_line()).collect();
    Ok(json!({ "routers": rows, "log": log, "best_epoch": r.best_epoch }).to_string())
}
