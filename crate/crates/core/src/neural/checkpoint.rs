//! Member checkpoints as JSON.
//!
//! Layout: `{"format": "sphcast-checkpoint/1", "member": {...}, "seed": n,
//! "config": {...}, "tensors": [{"name", "len", "data"}]}` with tensors in
//! [`SlstmParams::tensors`] order. Floats are written in shortest
//! round-trip form, so loading reproduces every weight bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::slstm::{SlstmConfig, SlstmParams};
use crate::ensemble::MemberSpec;
use crate::error::{Error, Result};

pub const FORMAT: &str = "sphcast-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    len: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    member: MemberSpec,
    seed: u64,
    config: SlstmConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub member: MemberSpec,
    pub params: SlstmParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: FORMAT.into(),
            member: self.member.clone(),
            seed: self.member.seed,
            config: self.params.config.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, data)| NamedTensor {
                    name,
                    len: data.len(),
                    data: data.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::json("<checkpoint>", e))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Checkpoint> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        if file.format != FORMAT {
            return Err(Error::Invalid(format!("{}: unknown checkpoint format {}", origin.display(), file.format)));
        }
        file.config.validate()?;
        let mut params = SlstmParams::zeros(file.config);
        let expected: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        if expected.len() != file.tensors.len() {
            return Err(Error::Shape(format!(
                "{}: {} tensors, expected {}",
                origin.display(),
                file.tensors.len(),
                expected.len()
            )));
        }
        for ((slot, (name, len)), t) in params.tensors_mut().into_iter().zip(&expected).zip(&file.tensors) {
            if t.name != *name || t.data.len() != *len || t.len != *len {
                return Err(Error::Shape(format!(
                    "{}: tensor {} ({}) does not match {name} ({len})",
                    origin.display(),
                    t.name,
                    t.data.len()
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(Checkpoint {
            member: file.member,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text, path)
    }
}
