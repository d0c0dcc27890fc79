//! Flat `section.key = value` run configuration.
//!
//! Every key has a default; a file only lists the keys it overrides. Blank lines
//! and `#` comments are ignored, key order does not matter, unknown or repeated
//! keys are errors. Lists are comma separated; `none` clears optional values.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use toolselect::baselines::BaselineConfig;
use toolselect::selector::SelectorConfig;
use toolselect::simworld::{SimWorld, WorldConfig};
use toolselect::trainer::TrainConfig;
use toolselect::{Error, Result};

/// Selector fields fixed by the world rather than by configuration.
const WORLD_DERIVED: [&str; 6] = ["d_x", "d_q", "slot_width", "eta_dim", "label_rows", "ref_size"];
/// Training fields that form the objective and live under `objective.`.
const OBJECTIVE_KEYS: [&str; 5] = ["task_weights", "entropy_weight", "score_l2", "coverage_weight", "eps"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Panel size, or `full` for the task's whole population.
    pub panel_size: String,
    pub split: String,
    pub routers: Vec<String>,
    /// Fraction of each population replaced by unseen tools before evaluation.
    pub fresh_tools: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            panel_size: "6".into(),
            split: "test".into(),
            routers: ["Random", "Oracle", "GlobalBest", "KNN", "MLPIndex", "ToolSelect"].map(String::from).to_vec(),
            fresh_tools: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub selector: SelectorConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

fn object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config structs are objects"),
    }
}

fn section_of(section: &str, key: &str) -> String {
    if section == "train" && OBJECTIVE_KEYS.contains(&key) {
        "objective".into()
    } else {
        section.into()
    }
}

/// Parses one raw value guided by the JSON type of the key's default.
fn parse_value(raw: &str, default: &Value) -> Value {
    let scalar = |s: &str, hint: Option<&Value>| -> Value {
        match hint {
            Some(Value::String(_)) => Value::String(s.into()),
            Some(Value::Bool(_)) => s.parse().map(Value::Bool).unwrap_or_else(|_| Value::String(s.into())),
            _ => serde_json::from_str::<serde_json::Number>(s).map(Value::Number).unwrap_or_else(|_| Value::String(s.into())),
        }
    };
    if raw == "none" {
        return Value::Null;
    }
    match default {
        Value::Array(items) => {
            Value::Array(raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| scalar(s, items.first())).collect())
        }
        Value::Null if raw.contains(',') => Value::Array(raw.split(',').map(|s| scalar(s.trim(), None)).collect()),
        other => scalar(raw, Some(other)),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    fn sections(&self) -> Vec<(&'static str, Map<String, Value>)> {
        let mut selector = object(&self.selector);
        for k in WORLD_DERIVED {
            selector.remove(k);
        }
        vec![
            ("world", object(&self.world)),
            ("selector", selector),
            ("train", object(&self.train)),
            ("baseline", object(&self.baseline)),
            ("eval", object(&self.eval)),
        ]
    }

    /// Every key with its current value, sorted.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (section, map) in self.sections() {
            for (k, v) in map {
                out.insert(format!("{}.{k}", section_of(section, &k)), render_value(&v));
            }
        }
        out
    }

    /// The configuration as a parseable file.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let defaults = RunConfig::default();
        let mut sections: BTreeMap<&str, Map<String, Value>> = defaults.sections().into_iter().collect();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, raw) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, raw) = (key.trim(), raw.trim());
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(err(format!("key {key} already set on line {prev}")));
            }
            let (section, field) = key.split_once('.').ok_or_else(|| err(format!("unknown key {key}")))?;
            let target = match section {
                "objective" if OBJECTIVE_KEYS.contains(&field) => "train",
                "train" if OBJECTIVE_KEYS.contains(&field) => return Err(err(format!("unknown key {key}; use objective.{field}"))),
                s => s,
            };
            let map = sections.get_mut(target).ok_or_else(|| err(format!("unknown key {key}")))?;
            let default = map.get(field).ok_or_else(|| err(format!("unknown key {key}")))?;
            let v = parse_value(raw, default);
            map.insert(field.to_string(), v);
        }
        fn build<T: DeserializeOwned>(name: &str, map: Map<String, Value>) -> Result<T> {
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{name}: {e}")))
        }
        let mut selector_map = sections.remove("selector").expect("section");
        for (k, v) in object(&defaults.selector) {
            selector_map.entry(k).or_insert(v);
        }
        let cfg = RunConfig {
            world: build("world", sections.remove("world").expect("section"))?,
            selector: build("selector", selector_map)?,
            train: build("train", sections.remove("train").expect("section"))?,
            baseline: build("baseline", sections.remove("baseline").expect("section"))?,
            eval: build("eval", sections.remove("eval").expect("section"))?,
        };
        cfg.world.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Selector shape for `world`: architecture from the config, input widths
    /// and label tables from the world.
    pub fn selector_for(&self, world: &SimWorld) -> SelectorConfig {
        let w = world.selector_config();
        SelectorConfig {
            d_x: w.d_x,
            d_q: w.d_q,
            slot_width: w.slot_width,
            eta_dim: w.eta_dim,
            label_rows: w.label_rows,
            ref_size: w.ref_size,
            ..self.selector.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.render()).unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn overrides_are_order_insensitive() {
        let a = "train.lr = 0.001\nworld.tasks_per_family = 1,0,2,1\n# note\nobjective.task_weights = 0.5,0.5\nworld.p_floor = 0.1\neval.panel_size = full\n";
        let b: String = a.lines().rev().map(|l| format!("{l}\n")).collect();
        let (x, y) = (RunConfig::parse(a).unwrap(), RunConfig::parse(&b).unwrap());
        assert_eq!(x, y);
        assert_eq!(x.train.lr, 0.001);
        assert_eq!(x.world.tasks_per_family, vec![1, 0, 2, 1]);
        assert_eq!(x.train.task_weights, Some(vec![0.5, 0.5]));
        assert_eq!(x.world.p_floor, Some(0.1));
        assert_eq!(x.eval.panel_size, "full");
        assert_eq!(RunConfig::parse(&x.render()).unwrap(), x);
    }

    #[test]
    fn bad_files_are_rejected() {
        for (text, line) in [
            ("world.bogus = 1", Some(1)),
            ("\nbogus = 1", Some(2)),
            ("train.lr = 1\ntrain.lr = 2", Some(2)),
            ("train.entropy_weight = 0.1", Some(1)),
            ("selector.d_x = 4", Some(1)),
            ("no equals sign", Some(1)),
            ("train.max_epochs = 2.5", None),
            ("world.beta = -1", None),
        ] {
            match (RunConfig::parse(text), line) {
                (Err(Error::Parse { line: l, .. }), Some(want)) => assert_eq!(l, want, "{text}"),
                (Err(Error::Config(_)), None) => {}
                (other, _) => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_section_is_covered() {
        let keys = RunConfig::default().entries();
        for k in ["world.d_x", "selector.hidden", "train.lr", "objective.eps", "baseline.knn_k", "eval.routers", "train.val_panel_size"] {
            assert!(keys.contains_key(k), "{k}");
        }
        assert!(!keys.contains_key("selector.d_x"));
    }
}
