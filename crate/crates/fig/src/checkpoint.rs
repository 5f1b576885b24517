//! Versioned JSON model checkpoints.
//!
//! A checkpoint is one JSON object: the format version, the training config,
//! the feature dimensions the model was built for, and every parameter as a
//! named flat array with its shape, in visit order. Values round-trip
//! exactly: serialization uses the shortest decimal that reparses to the same
//! 64-bit float, so saving and loading reproduces parameters bit for bit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FigError, Result};
use crate::param::ParamSet;
use crate::trainer::{Model, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// One parameter tensor: row-major values plus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// The serialized form of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Node feature width the encoder was built for.
    pub d_x: usize,
    /// Edge feature width, when the dataset has edge features.
    pub d_e: Option<usize>,
    /// Assignment-table capacity (virtual-node variant only).
    pub n_max: Option<usize>,
    /// Every parameter in visit order.
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Result<Self> {
        let mut params = Vec::new();
        let mut bad: Option<String> = None;
        model.visit(&mut |name, p| {
            if bad.is_none() && p.data.iter().any(|v| !v.is_finite()) {
                bad = Some(name.clone());
            }
            params.push(ParamEntry {
                name,
                shape: p.shape.clone(),
                data: p.data.clone(),
            });
        });
        if let Some(name) = bad {
            return Err(FigError::NonFinite {
                context: format!("parameter {name} while checkpointing"),
            });
        }
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            d_x: model.d_x(),
            d_e: model.d_e(),
            n_max: model.n_max(),
            params,
        })
    }

    /// Rebuilds the model: constructs the architecture from the config and
    /// dimensions, then overwrites every parameter from the entries, which
    /// must match in order, name, and shape.
    pub fn into_model(self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(FigError::Checkpoint(format!(
                "format_version {} is not the supported {FORMAT_VERSION}",
                self.format_version
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut model = Model::new(
            self.config.clone(),
            self.d_x,
            self.d_e,
            self.n_max.unwrap_or(1),
            &mut rng,
        )?;

        let entries = self.params;
        let mut cursor = 0;
        let mut failure: Option<FigError> = None;
        model.visit_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(entry) = entries.get(cursor) else {
                failure = Some(FigError::Checkpoint(format!(
                    "parameter {name} missing: file has only {cursor} entries"
                )));
                return;
            };
            cursor += 1;
            if entry.name != name {
                failure = Some(FigError::Checkpoint(format!(
                    "entry {} is named {} where the model expects {name}",
                    cursor - 1,
                    entry.name
                )));
                return;
            }
            if entry.shape != p.shape || entry.data.len() != p.data.len() {
                failure = Some(FigError::Checkpoint(format!(
                    "parameter {name} has shape {:?} with {} values, expected {:?}",
                    entry.shape,
                    entry.data.len(),
                    p.shape
                )));
                return;
            }
            if entry.data.iter().any(|v| !v.is_finite()) {
                failure = Some(FigError::Checkpoint(format!(
                    "parameter {name} contains a non-finite value"
                )));
                return;
            }
            p.data.copy_from_slice(&entry.data);
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if cursor != entries.len() {
            return Err(FigError::Checkpoint(format!(
                "file has {} entries but the model takes {cursor}",
                entries.len()
            )));
        }
        Ok(model)
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let checkpoint = Checkpoint::from_model(model)?;
    let mut json = serde_json::to_string(&checkpoint)
        .map_err(|e| FigError::Checkpoint(format!("serialization failed: {e}")))?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| FigError::io(path.display().to_string(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FigError::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| FigError::Checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint.into_model()
}
