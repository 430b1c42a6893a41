//! Config-file handling: preset expansion, deep merge, and dotted-path
//! overrides. Precedence is CLI override > file value > preset default.

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

use seqnorm_core::attention::Mechanism;
use seqnorm_core::synth::{spec_from_value, SyntheticDatasetSpec};
use seqnorm_core::train::TrainConfig;
use seqnorm_core::vit::ViTConfig;

/// Objects merge per key, everything else is replaced by the overlay.
pub fn deep_merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Applies one `path.to.key=value` override; the value is parsed as JSON
/// when possible and falls back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path {path:?}: {part:?} is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override paths have at least one segment")
}

fn preset_value(name: &str) -> Result<Value> {
    let cfg = match name {
        "vit2d" => ViTConfig::vit_2d(Mechanism::SeqNormFree, 3, 224, 224, 2),
        "vitwsi" => ViTConfig::vit_wsi(Mechanism::SeqNormFree, 768, 2),
        "vit3d" => ViTConfig::vit_3d(Mechanism::SeqNormFree, 1, 32, 256, 256, 2),
        other => bail!("unknown preset {other:?} (expected vit2d, vitwsi or vit3d)"),
    };
    Ok(serde_json::to_value(cfg)?)
}

/// Resolves a model section: `{"preset": "...", ...overrides}` or a full
/// config object. Unknown keys are rejected by the strict deserializer.
pub fn resolve_model_config(section: &Value) -> Result<ViTConfig> {
    let mut value = section.clone();
    if let Some(preset) = section.get("preset") {
        let name = preset
            .as_str()
            .ok_or_else(|| anyhow!("preset must be a string"))?;
        let mut base = preset_value(name)?;
        let mut overlay = section.clone();
        overlay.as_object_mut().unwrap().remove("preset");
        deep_merge(&mut base, &overlay);
        value = base;
    }
    let cfg: ViTConfig =
        serde_json::from_value(value).context("model config did not validate")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_train_config(section: &Value) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        serde_json::from_value(section.clone()).context("train config did not validate")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_data_spec(section: &Value) -> Result<SyntheticDatasetSpec> {
    Ok(spec_from_value(section)?)
}

/// A train-run config file: model + train + data sections.
pub struct RunConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub data: SyntheticDatasetSpec,
}

pub fn load_run_config(path: &std::path::Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut root: Value = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse {}", path.display()))?;
    for assignment in overrides {
        apply_override(&mut root, assignment)?;
    }
    let obj = root
        .as_object()
        .ok_or_else(|| anyhow!("run config must be a JSON object"))?;
    for key in obj.keys() {
        if !["model", "train", "data"].contains(&key.as_str()) {
            bail!("unknown run config section {key:?}");
        }
    }
    let model = resolve_model_config(
        obj.get("model").ok_or_else(|| anyhow!("run config needs a `model` section"))?,
    )?;
    let train = resolve_train_config(
        obj.get("train").ok_or_else(|| anyhow!("run config needs a `train` section"))?,
    )?;
    let data = resolve_data_spec(
        obj.get("data").ok_or_else(|| anyhow!("run config needs a `data` section"))?,
    )?;
    Ok(RunConfig { model, train, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_sets_nested_keys() {
        let mut v = json!({"train": {"epochs": 10}});
        apply_override(&mut v, "train.epochs=3").unwrap();
        apply_override(&mut v, "train.optimizer.kind=sgd").unwrap();
        assert_eq!(v["train"]["epochs"], 3);
        assert_eq!(v["train"]["optimizer"]["kind"], "sgd");
        assert!(apply_override(&mut v, "no-equals-sign").is_err());
    }

    #[test]
    fn preset_expands_and_merges() {
        let section = json!({
            "preset": "vit2d",
            "layers": 2,
            "attention": {"mechanism": "vanilla"}
        });
        let cfg = resolve_model_config(&section).unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.attention.mechanism, Mechanism::Vanilla);
        assert_eq!(cfg.model_dim, 1024);
    }

    #[test]
    fn unknown_model_key_is_rejected() {
        let section = json!({"preset": "vitwsi", "warp_factor": 9});
        assert!(resolve_model_config(&section).is_err());
    }
}
