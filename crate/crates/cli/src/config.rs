use std::path::{Path, PathBuf};

use commdecode::planner::DistillConfig;
use commdecode::state_decoder::DecoderTrainConfig;
use commdecode::transition::TransitionTrainConfig;
use commdecode::GridConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SEED_VAR: &str = "COMMDECODE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionBlock {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    /// Greedy episodes for the self-rollout accuracy report.
    pub eval_episodes: usize,
}

impl Default for TransitionBlock {
    fn default() -> Self {
        let t = TransitionTrainConfig::default();
        Self {
            hidden: t.hidden,
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            dataset_size: t.dataset_size,
            eval_episodes: 1000,
        }
    }
}

impl TransitionBlock {
    pub fn training(&self) -> TransitionTrainConfig {
        TransitionTrainConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            dataset_size: self.dataset_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemosBlock {
    pub count: usize,
    pub temperature: f64,
}

impl Default for DemosBlock {
    fn default() -> Self {
        Self {
            count: 10_000,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivBlock {
    /// Instance JSON; the built-in 1x3 corridor when absent.
    pub instance: Option<PathBuf>,
    pub cap: u64,
}

impl Default for EquivBlock {
    fn default() -> Self {
        Self {
            instance: None,
            cap: commdecode::equiv::DEFAULT_POLICY_CAP as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: GridConfig,
    pub planner: DistillConfig,
    pub transition: TransitionBlock,
    pub demos: DemosBlock,
    pub decoder: DecoderTrainConfig,
    pub equiv: EquivBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: GridConfig::default(),
            planner: DistillConfig::default(),
            transition: TransitionBlock::default(),
            demos: DemosBlock::default(),
            decoder: DecoderTrainConfig::default(),
            equiv: EquivBlock::default(),
        }
    }
}

/// Where configuration values come from, in increasing precedence after the
/// built-in defaults.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub sets: Vec<String>,
    pub env_seed: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

fn apply_set(value: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let mut slot = &mut *value;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    pub fn load(sources: &Sources) -> CliResult<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        let mut seed_given = false;
        if let Some(path) = &sources.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !file.is_object() {
                return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
            }
            seed_given = file.get("seed").is_some();
            merge(&mut value, file);
        }
        for s in &sources.sets {
            apply_set(&mut value, s)?;
            seed_given |= s.split_once('=').is_some_and(|(k, _)| k == "seed");
        }
        if let Some(raw) = &sources.env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_VAR} must be an unsigned integer, got `{raw}`")))?;
            value["seed"] = seed.into();
            seed_given = true;
        }
        if let Some(seed) = sources.seed {
            value["seed"] = seed.into();
            seed_given = true;
        }
        if let Some(dir) = &sources.output_dir {
            value["output_dir"] = Value::String(dir.display().to_string());
        }
        if !seed_given {
            return Err(CliError::Config(format!(
                "missing key `seed` (set it in the config, with --seed, or via {SEED_VAR})"
            )));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |key: &str, why: String| Err(CliError::Config(format!("`{key}`: {why}")));
        if let Err(e) = self.env.validate() {
            return bad("env", e.to_string());
        }
        if self.env.message_alphabet_size < self.env.num_cells() {
            return bad(
                "env.message_alphabet_size",
                format!(
                    "{} symbols cannot name {} goal cells",
                    self.env.message_alphabet_size,
                    self.env.num_cells()
                ),
            );
        }
        if let Err(e) = self.decoder.schedule.validate() {
            return bad("decoder.schedule", e.to_string());
        }
        let positive = [
            ("planner.max_steps", self.planner.max_steps),
            ("transition.steps", self.transition.steps),
            ("transition.batch_size", self.transition.batch_size),
            ("transition.dataset_size", self.transition.dataset_size),
            ("transition.eval_episodes", self.transition.eval_episodes),
            ("demos.count", self.demos.count),
            ("decoder.hidden", self.decoder.hidden),
            ("decoder.batch_size", self.decoder.batch_size),
            ("decoder.schedule.total_steps", self.decoder.schedule.total_steps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        let rates = [
            ("planner.learning_rate", self.planner.learning_rate),
            ("transition.learning_rate", self.transition.learning_rate),
            ("decoder.learning_rate", self.decoder.learning_rate),
        ];
        for (key, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be a positive finite number, got {v}"));
            }
        }
        if !(self.demos.temperature >= 0.0 && self.demos.temperature.is_finite()) {
            return bad("demos.temperature", format!("must be nonnegative, got {}", self.demos.temperature));
        }
        if self.transition.hidden.contains(&0) || self.planner.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
