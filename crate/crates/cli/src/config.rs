//! JSON configs with dotted `key=value` overrides.
//!
//! Every subcommand owns a config struct whose `Default` serializes to the
//! full key tree. A config file and the overrides may only touch keys that
//! exist in that tree.

use std::path::Path;

use mlb_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Leaf keys of a config tree in dotted form, with their default values.
pub fn leaf_keys(value: &Value) -> Vec<(String, String)> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

/// Recursively overlays `patch` on `base`, rejecting keys `base` lacks.
pub fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (Value::Object(_), _) => Err(Error::Config(format!("config key '{prefix}' expects an object"))),
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(base: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim();
    let mut slot = &mut *base;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    if slot.is_object() {
        return Err(Error::Config(format!("config key '{key}' is a section, not a value")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Defaults, then the optional file, then the overrides in order.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut tree = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        merge(&mut tree, &patch, "")?;
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

/// `--help` footer listing every accepted key.
pub fn keys_help<T: Serialize + Default>() -> String {
    let tree = serde_json::to_value(T::default()).expect("config defaults serialize");
    let mut out = String::from("Config keys (--config FILE, --set key=value):\n");
    for (k, v) in leaf_keys(&tree) {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out
}
