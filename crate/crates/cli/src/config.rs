use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uniam::trainer::TrainConfig;

/// Training configuration plus optional default paths.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

const TOP_LEVEL: [&str; 3] = ["train", "data", "out"];

/// Splits `--a.b value` pairs (any long flag containing a dot) out of argv.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--").filter(|k| k.contains('.')) else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let value = it.next().ok_or_else(|| format!("override --{key} needs a value"))?;
            overrides.push((key.to_string(), value));
        }
    }
    Ok((rest, overrides))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    if !TOP_LEVEL.contains(&parts[0]) {
        parts.insert(0, "train");
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("cannot set `{key}`: `{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(format!("unknown configuration key `{key}`"));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| format!("unknown configuration key `{key}`"))?;
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("split always yields at least one part")
}

impl RunConfig {
    /// Loads `path` (or defaults) and applies overrides. Override values are
    /// parsed as JSON and fall back to plain strings.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, String> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut value = serde_json::to_value(&base).expect("config serializes");
        for (k, v) in overrides {
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
            set_path(&mut value, k, parsed)?;
        }
        serde_json::from_value(value).map_err(|e| format!("invalid override: {e}"))
    }
}
