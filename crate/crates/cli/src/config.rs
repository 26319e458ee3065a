//! JSON run configurations.
//!
//! Unknown keys are rejected everywhere. A seed that the config omits is taken
//! from `REMIX_SEED`; a seed present in the config always wins.

use std::path::Path;

use remix_core::theory::VerifyConfig;
use remix_core::trainer::{TaskSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "REMIX_SEED";

/// Inputs of the collapse simulation. Every field is required.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    pub sigma: f64,
    pub n: usize,
    pub dim: usize,
    pub trials: usize,
    pub deltas: Vec<f64>,
    pub seed: u64,
}

/// Inputs of the estimator checks.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlooCheckConfig {
    pub seed: u64,
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub layers: Vec<usize>,
    pub ms: Vec<usize>,
    pub tolerance: f64,
    pub variance_seeds: Vec<u64>,
    pub variance_ms: Vec<usize>,
    pub variance_trials: usize,
    pub bandit_n: usize,
    pub bandit_k: usize,
}

impl Default for RlooCheckConfig {
    fn default() -> Self {
        RlooCheckConfig {
            seed: 0,
            ns: vec![2, 3],
            ks: vec![1, 2],
            layers: vec![1, 2],
            ms: vec![2, 3],
            tolerance: 1e-10,
            variance_seeds: vec![1, 2, 3, 4, 5],
            variance_ms: vec![2, 4, 16],
            variance_trials: 10_000,
            bandit_n: 8,
            bandit_k: 2,
        }
    }
}

/// Task, training options and an optional evaluation-time `k`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval_k: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.train.validate()?;
        if let Some(k) = self.eval_k {
            let (n, _, _) = self.train.layer_shape();
            if k == 0 || k > n {
                return Err(CliError::Config(format!("eval_k: must lie in [1, {n}], got {k}")));
            }
        }
        Ok(())
    }
}

/// Where a command keeps its seed, and whether one must be supplied.
pub enum SeedRule {
    Required(&'static [&'static str]),
    Optional(&'static [&'static str]),
}

pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: expected a non-negative integer, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn read_value(path: Option<&Path>) -> CliResult<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn fill_seed(value: &mut Value, rule: SeedRule) -> CliResult<()> {
    let (keys, required) = match rule {
        SeedRule::Required(k) => (k, true),
        SeedRule::Optional(k) => (k, false),
    };
    let (last, parents) = keys.split_last().expect("seed path is non-empty");
    let mut node = value;
    for key in parents {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| CliError::Config(format!("{}: expected an object", parents.join("."))))?;
    if obj.contains_key(*last) {
        return Ok(());
    }
    match env_seed()? {
        Some(seed) => {
            obj.insert(last.to_string(), Value::from(seed));
            Ok(())
        }
        None if required => Err(CliError::Config(format!("missing field `{}` (set it in the config or via {SEED_ENV})", keys.join(".")))),
        None => Ok(()),
    }
}

/// Reads, seeds and deserializes a config; a missing file path means `{}`.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, rule: SeedRule) -> CliResult<T> {
    let mut value = read_value(path)?;
    if !value.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    fill_seed(&mut value, rule)?;
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_collapse(path: Option<&Path>) -> CliResult<CollapseConfig> {
    let path = path.ok_or_else(|| CliError::Config("collapse needs --config".into()))?;
    load(Some(path), SeedRule::Required(&["seed"]))
}

pub fn load_verify(path: Option<&Path>) -> CliResult<VerifyConfig> {
    load(path, SeedRule::Optional(&["seed"]))
}

pub fn load_rloo(path: Option<&Path>) -> CliResult<RlooCheckConfig> {
    load(path, SeedRule::Optional(&["seed"]))
}

pub fn load_run(path: Option<&Path>) -> CliResult<RunConfig> {
    let path = path.ok_or_else(|| CliError::Config("this command needs --config".into()))?;
    let cfg: RunConfig = load(Some(path), SeedRule::Required(&["train", "seed"]))?;
    cfg.validate()?;
    Ok(cfg)
}
