// SPDX-License-Identifier: Apache-2.0

//! Layered configuration: defaults, then command-line flags, then a JSON
//! config file whose fields win over both.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces what was there.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `value` with the fields of the JSON document at `file` applied on top.
pub fn overlay<T: Serialize + DeserializeOwned>(value: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(value) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let top: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !top.is_object() {
        anyhow::bail!("config {} must hold a JSON object", path.display());
    }
    let mut base = serde_json::to_value(value)?;
    merge(&mut base, top);
    serde_json::from_value(base).with_context(|| format!("applying config {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_objects_merge_and_scalars_replace() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}, "e": [1, 2]});
        merge(&mut base, json!({"b": {"d": 30}, "e": [9], "f": true}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 30}, "e": [9], "f": true}));
    }

    #[test]
    fn file_fields_win_over_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 7, "hyper": {"hidden": 16}}"#).unwrap();
        let flags = preroute::train::TrainConfig {
            epochs: 3,
            lr: 0.1,
            ..Default::default()
        };
        let out = overlay(flags, Some(&path)).unwrap();
        assert_eq!(out.epochs, 7);
        assert_eq!(out.lr, 0.1);
        assert_eq!(out.hyper.hidden, 16);
        assert_eq!(out.hyper.heads, preroute::nn::params::Hyper::default().heads);
    }

    #[test]
    fn non_object_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "[1, 2]").unwrap();
        assert!(overlay(preroute::train::TrainConfig::default(), Some(&path)).is_err());
    }
}
