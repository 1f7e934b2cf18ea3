//! The run configuration file and `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sag_core::bench::{BenchmarkSpec, DeskPanel, MethodSpec, Regime, RunMatrix};
use sag_core::credit::{CtdeHyper, GrpoHyper, RewardWeights};
use sag_core::engine::Timing;
use sag_core::model::{DecodingParams, GroupConfig};

/// Where agent backends come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// Rule-based stand-in agents.
    Desk,
    /// Per-agent descriptors in `group.backend_bindings`.
    Bindings,
    /// One chat-completion server for every agent.
    Http { endpoint: String, model_name: String },
}

fn default_method() -> String {
    "SAG".into()
}

fn default_regimes() -> Vec<Regime> {
    vec![Regime::Clean]
}

fn default_decoding() -> Vec<DecodingParams> {
    vec![DecodingParams::default()]
}

fn default_runs() -> u32 {
    5
}

fn default_backend() -> BackendChoice {
    BackendChoice::Desk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub group: GroupConfig,
    pub benchmarks: Vec<BenchmarkSpec>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_decoding")]
    pub decoding_regimes: Vec<DecodingParams>,
    #[serde(default = "default_runs")]
    pub runs_per_cell: u32,
    #[serde(default)]
    pub seed_base: i64,
    #[serde(default = "default_backend")]
    pub backend: BackendChoice,
    #[serde(default)]
    pub desk: DeskPanel,
    /// Passage corpus for knowledge agents (JSONL).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Demographic swap table replacing the bundled one.
    #[serde(default)]
    pub swap_table: Option<PathBuf>,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub grpo: GrpoHyper,
    #[serde(default)]
    pub ctde: CtdeHyper,
}

impl RunConfig {
    /// Reads `path`, applies `overrides` and resolves relative paths against
    /// the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).with_context(|| format!("interpreting {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for b in &mut self.benchmarks {
            fix(&mut b.path);
        }
        for p in [&mut self.corpus, &mut self.prompts_dir, &mut self.swap_table]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// The matrix for a list of methods sharing this file's benchmarks and regimes.
    pub fn matrix(&self, methods: Vec<MethodSpec>) -> RunMatrix {
        RunMatrix {
            methods,
            benchmarks: self.benchmarks.clone(),
            regimes: self.regimes.clone(),
            decoding_regimes: self.decoding_regimes.clone(),
            runs_per_cell: self.runs_per_cell,
            seed_base: self.seed_base,
        }
    }

    pub fn single_method(&self) -> RunMatrix {
        self.matrix(vec![MethodSpec {
            label: self.method.clone(),
            config: self.group.clone(),
        }])
    }
}

/// Sets the value at a dotted `key` path. The value is parsed as JSON and
/// kept as a string when that fails, so `method=SAG-small` works unquoted.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not key=value");
    };
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), parsed);
                    return Ok(());
                }
                map.entry((*part).to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("`{part}` in `{key}` is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} in `{key}` out of range ({len})"))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{key}` descends into a scalar at `{part}`"),
        };
    }
    bail!("empty override key in `{assignment}`")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut v = serde_json::json!({"group": {"max_rounds": 3}, "benchmarks": [{"name": "a"}]});
        apply_override(&mut v, "group.max_rounds=5").unwrap();
        apply_override(&mut v, "benchmarks.0.name=b").unwrap();
        apply_override(&mut v, "desk.accuracy=0.9").unwrap();
        assert_eq!(v["group"]["max_rounds"], 5);
        assert_eq!(v["benchmarks"][0]["name"], "b");
        assert_eq!(v["desk"]["accuracy"], 0.9);
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "group.max_rounds.x=1").is_err());
    }
}
