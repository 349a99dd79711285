//! Training configuration: presets, a JSON file with `model` and `train`
//! sections merged over them, then dotted-key overrides.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use ss3d_core::training::TrainConfig;
use ss3d_core::ModelConfig;

use crate::error::{CliError, Result};

pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether the class count was given explicitly rather than taken from
    /// the dataset.
    pub n_classes_set: bool,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `key` (dot-separated) to `value`, parsed as JSON when possible and
/// as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Usage(format!("override {key:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match node {
        Value::Object(m) => {
            m.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(CliError::Usage(format!("override {key:?} descends into a non-object"))),
    }
}

pub fn load_train_file(path: Option<&Path>, overrides: &[String]) -> Result<TrainFile> {
    let mut user = match path {
        Some(p) => {
            let text = fs::read(p)?;
            serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    if !user.is_object() {
        return Err(CliError::Usage("configuration must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    if let Some(k) = user.as_object().and_then(|m| m.keys().find(|k| *k != "model" && *k != "train")) {
        return Err(CliError::Usage(format!("unknown configuration section {k:?}")));
    }
    let n_classes_set = user.pointer("/model/n_classes").is_some();
    let mut full = json!({
        "model": serde_json::to_value(ModelConfig::desk()).map_err(ss3d_core::Error::from)?,
        "train": serde_json::to_value(TrainConfig::default()).map_err(ss3d_core::Error::from)?,
    });
    merge(&mut full, user);
    let model = serde_json::from_value(full["model"].take()).map_err(|e| CliError::Usage(format!("model: {e}")))?;
    let train = serde_json::from_value(full["train"].take()).map_err(|e| CliError::Usage(format!("train: {e}")))?;
    Ok(TrainFile { model, train, n_classes_set })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = json!({"train": {"epochs": 1}});
        apply_override(&mut v, "train.epochs=4").unwrap();
        apply_override(&mut v, "model.bottleneck_kind=tri_oriented").unwrap();
        apply_override(&mut v, "train.lr_max=0.01").unwrap();
        assert_eq!(v, json!({"train": {"epochs": 4, "lr_max": 0.01}, "model": {"bottleneck_kind": "tri_oriented"}}));
        assert!(apply_override(&mut v, "train.epochs").is_err());
        assert!(apply_override(&mut v, "train.epochs.x=1").is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let f = load_train_file(None, &["train.epochs=2".into(), "model.state_dim=8".into()]).unwrap();
        assert_eq!(f.train.epochs, 2);
        assert_eq!(f.model.state_dim, 8);
        assert_eq!(f.model.channel_schedule, ModelConfig::desk().channel_schedule);
        assert!(!f.n_classes_set);
        assert!(load_train_file(None, &["train.epoch=2".into()]).is_err());
        assert!(load_train_file(None, &["optim.lr=2".into()]).is_err());
        assert!(load_train_file(None, &["model.n_classes=6".into()]).unwrap().n_classes_set);
    }
}
