use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reghorizon::data::CorpusSpec;
use reghorizon::horizon::SweepSpec;
use reghorizon::model::ModelConfig;
use reghorizon::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable that replaces every seed in a config.
pub const SEED_ENV: &str = "REGHORIZON_SEED";

/// One experiment: data, model, schedule, optional sweep, and where to write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config, applies `key.path=value` overrides, then an
    /// optional global seed.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Self::from_value(value, overrides, seed)
    }

    pub fn from_value(mut value: Value, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: Self = serde_json::from_value(value).context("invalid config")?;
        if let Some(s) = seed {
            config.set_seed(s);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
        if let Some(sweep) = &mut self.sweep {
            sweep.seeds = vec![seed];
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            bail!(
                "model.vocab_size {} differs from corpus.vocab_size {}",
                self.model.vocab_size,
                self.corpus.vocab_size
            );
        }
        if self.model.frame_dim != self.corpus.frame_dim {
            bail!(
                "model.frame_dim {} differs from corpus.frame_dim {}",
                self.model.frame_dim,
                self.corpus.frame_dim
            );
        }
        Ok(())
    }

    /// Creates the output directory and checks it accepts files.
    pub fn prepare_output(&self) -> Result<&Path> {
        let dir = self.output_dir.as_path();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"").with_context(|| format!("{} is not writable", dir.display()))?;
        fs::remove_file(&probe)?;
        Ok(dir)
    }
}

/// Sets `a.b.c` in a JSON tree. The value is parsed as JSON when possible,
/// otherwise taken as a string; missing objects along the path are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key.path=value");
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override path {path:?} has an empty segment");
    }
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            bail!("override path {path:?}: {key:?} is not inside an object");
        };
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let Value::Object(map) = node else {
        bail!("override path {path:?} does not end in an object field");
    };
    map.insert(keys[keys.len() - 1].to_string(), new);
    Ok(())
}

/// Reads the global seed override from the environment.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            Ok(Some(s.trim().parse().with_context(|| {
                format!("{SEED_ENV}={s:?} is not an integer")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e.into()),
    }
}
