//! Named-tensor checkpoints.
//!
//! Format (JSON, version 1):
//!
//! ```json
//! {"format":"cfgx-tensors","version":1,"kind":"gcn","meta":{...},
//!  "tensors":[{"name":"w1","shape":[64,64],"data":[...]}, ...]}
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a
//! save/load cycle is lossless.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cfgx-tensors";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: [t.rows(), t.cols()],
            data: t.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let nt = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::validation(format!("checkpoint has no tensor `{name}`")))?;
        Tensor::from_vec(nt.shape[0], nt.shape[1], nt.data.clone())
    }

    /// Fetch a tensor and check its shape.
    pub fn get_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != [rows, cols] {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8], kind: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let ck: Checkpoint = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            field: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                field: "format".into(),
                msg: format!(
                    "unsupported checkpoint {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                    ck.format, ck.version
                ),
            });
        }
        if ck.kind != kind {
            return Err(Error::Parse {
                field: "kind".into(),
                msg: format!("expected a `{kind}` checkpoint, found `{}`", ck.kind),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless() {
        let t = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7.0]]).unwrap();
        let mut ck = Checkpoint::new("test");
        ck.push("w", &t);
        ck.meta.insert("seed".into(), 7.into());
        let back = Checkpoint::from_json(ck.to_json().as_bytes(), "test").unwrap();
        assert_eq!(back.get("w").unwrap(), t);
        assert_eq!(back, ck);
        assert!(back.get("missing").is_err());
        assert!(back.get_shaped("w", 3, 2).is_err());
        assert!(Checkpoint::from_json(ck.to_json().as_bytes(), "other").is_err());
    }
}
