use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{sha256_file, RunConfig};
use crate::error::CliResult;

/// Provenance record written next to a stage's outputs. Everything except
/// `created_unix` is a pure function of the config and the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// Upstream artifacts by file name, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

pub fn manifest_path(config: &RunConfig, stage: &str) -> PathBuf {
    config.path("manifests").join(format!("{stage}.json"))
}

pub fn write_manifest(config: &RunConfig, stage: &str, inputs: &[&str], outputs: &[&str]) -> CliResult<Manifest> {
    let hashes = |names: &[&str]| -> CliResult<BTreeMap<String, String>> {
        names
            .iter()
            .map(|n| Ok((n.to_string(), sha256_file(&config.path(n))?)))
            .collect()
    };
    let mut versions = BTreeMap::new();
    versions.insert("commdecode".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert(
        "checkpoint_format".to_string(),
        commdecode::nn::FORMAT_VERSION.to_string(),
    );
    let mut snapshot = serde_json::to_value(config)?;
    snapshot.as_object_mut().expect("object").remove("output_dir");
    let manifest = Manifest {
        stage: stage.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        versions,
        config: snapshot,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = manifest_path(config, stage);
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
