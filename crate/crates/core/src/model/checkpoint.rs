use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const CHECKPOINT_FORMAT: &str = "reghorizon-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: parameter name → shape + flat values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub config: ModelConfig,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: Option<String>) -> Self {
        let params = model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, t)| {
                (
                    n.clone(),
                    StoredParam {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash,
            config: model.config().clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unknown checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        let mut model = Model::build(&self.config, &RngStream::new(0, 0))?;
        let mut params = self.params;
        let mut restored = Vec::with_capacity(model.params().len());
        for (name, template) in model.param_names().iter().zip(model.params()) {
            let stored = params
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if stored.shape != template.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    stored.shape,
                    template.shape()
                )));
            }
            restored.push(Tensor::new_finite(stored.shape, stored.values)?);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Data(format!(
                "checkpoint has unknown parameter {extra}"
            )));
        }
        model.set_params(restored)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
