//! Run configuration: typed sections addressed by dotted `key=value` pairs.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fringeforge::attack::AttackConfig;
use fringeforge::eval::{BenchSpec, Method, Scanner};
use fringeforge::recognize::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub architecture: Architecture,
    /// Scanner whose clouds the model is trained on.
    pub scanner: Scanner,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub method: Method,
    /// Scenes for `scene`, instances for `attack`.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bench: BenchSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bench: BenchSpec::default(),
            model: ModelSection { architecture: Architecture::PointMlp, scanner: Scanner::MultiStep, seed: 0 },
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            run: RunSection { method: Method::Shifting, count: 40 },
        }
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped; a
/// `[section]` line prefixes the keys that follow it.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", n + 1))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn split_pair(pair: &str) -> Result<(String, String)> {
    let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("override {pair:?} is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| anyhow!("unknown config key `{key}`"))?,
            _ => bail!("unknown config key `{key}`"),
        };
    }
    if node.is_object() {
        bail!("config key `{key}` is a section, not a value");
    }
    *node = match serde_json::from_str::<Value>(raw) {
        Ok(v) if !node.is_string() || v.is_string() => v,
        _ => Value::String(raw.to_string()),
    };
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`, in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            pairs = parse_pairs(&text).with_context(|| format!("parsing config {}", path.display()))?;
        }
        pairs.extend_from_slice(overrides);
        let mut tree = serde_json::to_value(RunConfig::default())?;
        for (k, v) in &pairs {
            set(&mut tree, k, v)?;
        }
        let config: RunConfig = serde_json::from_value(tree).map_err(|e| {
            let keys: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
            anyhow!("invalid config value ({e}); overridden keys: {}", keys.join(", "))
        })?;
        config.bench.validate()?;
        config.attack.validate()?;
        Ok(config)
    }

    /// Every resolved key as `key=value`, one per line, loadable by [`parse_pairs`].
    pub fn echo(&self) -> Result<String> {
        fn walk(v: &Value, prefix: &str, out: &mut String) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(child, &key, out);
                    }
                }
                Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
                other => out.push_str(&format!("{prefix}={other}\n")),
            }
        }
        let mut out = String::new();
        walk(&serde_json::to_value(self)?, "", &mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::resolve(
            None,
            &pairs(&[
                ("attack.margin", "12.5"),
                ("attack.mode", "impersonate"),
                ("attack.target", "3"),
                ("bench.rig.camera_size", "[32, 32]"),
                ("model.architecture", "depthconv"),
                ("run.method", "superposition-no-gamma"),
            ]),
        )
        .unwrap();
        assert_eq!(c.attack.margin, 12.5);
        assert_eq!(c.attack.target, Some(3));
        assert_eq!(c.bench.rig.camera_size, [32, 32]);
        assert_eq!(c.model.architecture, Architecture::DepthConv);
        assert_eq!(c.run.method, Method::SuperpositionNoGamma);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::resolve(None, &pairs(&[("attack.margn", "1")])).unwrap_err();
        assert!(err.to_string().contains("attack.margn"));
        assert!(RunConfig::resolve(None, &pairs(&[("attack", "1")])).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("attack.margin.x", "1")])).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::resolve(None, &pairs(&[("attack.margin", "lots")])).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("attack.search_steps", "0")])).is_err());
    }

    #[test]
    fn echo_reloads_to_the_same_config() {
        let c = RunConfig::resolve(None, &pairs(&[("attack.seed", "99"), ("train.decay_at", "[0.5]")])).unwrap();
        let back = RunConfig::resolve(None, &parse_pairs(&c.echo().unwrap()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_prefix_keys() {
        let p = parse_pairs("# comment\n[attack]\nmargin = 4\n\n[bench]\nseed=2\n").unwrap();
        assert_eq!(p, pairs(&[("attack.margin", "4"), ("bench.seed", "2")]));
        assert!(parse_pairs("nonsense").is_err());
    }
}
