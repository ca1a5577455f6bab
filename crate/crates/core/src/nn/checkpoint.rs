//! Versioned JSON parameter files:
//! `{"format_version":1,"arch":{...},"params":[[...],...]}`, each inner array
//! a row-major parameter matrix in store order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: serde_json::Value,
    pub params: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(arch: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            arch,
            params: store.to_flat(),
        }
    }

    /// Copies the stored values into `store`, whose shapes must already match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} parameter tensors, architecture needs {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, (flat, t)) in self.params.iter().zip(store.tensors_mut()).enumerate() {
            if flat.len() != t.len() {
                return Err(Error::Parse(format!(
                    "parameter {i} has {} values, expected {}",
                    flat.len(),
                    t.len()
                )));
            }
            *t = Array2::from_shape_vec(t.raw_dim(), flat.clone())
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        Ok(())
    }

    pub fn arch_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.arch.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
