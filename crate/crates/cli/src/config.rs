//! Layered run configuration: experiment defaults, then the config file, then `--set`, then flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use phonon_kinetics::{ExperimentConfig, ExperimentKind};
use serde_json::{Map, Value};

/// Recursively overlays `patch` onto `base`. Objects merge key by key; anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Parses `a.b.0=value`. The value is read as JSON when it parses, otherwise as a string.
pub fn parse_assignment(text: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects path=value, got '{text}'"))?;
    let path: Vec<String> = path.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("empty segment in --set path '{text}'");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Writes `value` at `path`, creating objects on the way. Numeric segments index arrays.
pub fn assign(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), value);
                    return Ok(());
                }
                map.entry(seg.clone()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .with_context(|| format!("'{seg}' indexes an array but is not a number"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("index {idx} out of range (length {len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("cannot descend into '{seg}': parent is not an object or array"),
        };
    }
    bail!("empty --set path")
}

/// Everything the user can say about a run.
#[derive(Default)]
pub struct Layers {
    pub experiment: Option<String>,
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Layers {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let file = self.config.as_deref().map(read_json).transpose()?;
        let from_file = file
            .as_ref()
            .and_then(|v| v.get("experiment"))
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| anyhow!("'experiment' must be a string")))
            .transpose()?;
        let name = match (&self.experiment, &from_file) {
            (Some(a), Some(b)) if a != b => bail!("experiment '{a}' conflicts with '{b}' in the config file"),
            (Some(a), _) => a.clone(),
            (None, Some(b)) => b.clone(),
            (None, None) => bail!("name an experiment or give a config file with an 'experiment' field"),
        };
        let kind = ExperimentKind::parse(&name)?;

        let mut value = serde_json::to_value(ExperimentConfig::default_for(kind))?;
        if let Some(file) = file {
            if !file.is_object() {
                bail!("the config file must hold a JSON object");
            }
            merge(&mut value, file);
        }
        for text in &self.set {
            let (path, v) = parse_assignment(text)?;
            assign(&mut value, &path, v)?;
        }
        if let Some(seed) = self.seed {
            value["seed"] = seed.into();
        }
        if let Some(out) = &self.out {
            value["out"] = Value::String(out.to_string_lossy().into_owned());
        }
        if let Some(k) = self.threads {
            value["threads"] = k.into();
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }
}
