//! Model checkpoints: every parameter and reference map of a [`DraModel`]
//! plus the training configuration that produced it.

use std::path::Path;

use dra_core::protocols::{ProtocolSpec, SynthSpec};
use dra_core::trainer::TrainConfig;
use dra_core::{DraError, DraModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};

pub const KIND: &str = "checkpoint";

/// Where a checkpointed model came from, so that `eval` can rebuild the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub dataset: String,
    pub subset: String,
    pub protocol: ProtocolSpec,
    pub seed: u64,
    pub image_size: Option<usize>,
    /// Generator settings when the data was synthetic.
    pub synth: Option<SynthSpec>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DraModel,
    pub config: TrainConfig,
    pub run: Option<RunInfo>,
}

/// Canonical JSON text of a configuration. This is what checkpoints store.
pub fn config_echo(config: &TrainConfig) -> String {
    serde_json::to_string(config).expect("config serialises")
}

/// Hex SHA-256 of [`config_echo`].
pub fn config_hash(config: &TrainConfig) -> String {
    hex::encode(Sha256::digest(config_echo(config).as_bytes()))
}

pub fn to_container(model: &DraModel, config: &TrainConfig, run: Option<&RunInfo>) -> Result<Container> {
    if model.spec() != &config.model_spec() {
        return Err(Error::Mismatch("model spec differs from the configuration's".into()));
    }
    let mut c = Container::new(KIND, model.to_store());
    c.config = serde_json::from_str(&config_echo(config))?;
    c.meta = serde_json::json!({ "run": run });
    Ok(c)
}

pub fn from_container(c: Container) -> Result<Checkpoint> {
    c.expect_kind(KIND)?;
    let config: TrainConfig = serde_json::from_value(c.config)
        .map_err(|e| DraError::Incompatible(format!("config echo does not parse: {e}")))?;
    let run = match c.meta.get("run") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| DraError::Incompatible(format!("run metadata does not parse: {e}")))?,
        ),
    };
    let model = DraModel::from_store(config.model_spec(), &c.arrays)?;
    Ok(Checkpoint { model, config, run })
}

pub fn checkpoint_save(model: &DraModel, config: &TrainConfig, run: Option<&RunInfo>, path: &Path) -> Result<()> {
    to_container(model, config, run)?.write(path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingModel(format!("no checkpoint at {}", path.display())));
    }
    from_container(Container::read(path)?)
}
