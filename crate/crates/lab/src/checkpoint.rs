//! `hra-lab-ckpt-v1`: adapter tensors as JSON, every value a decimal string
//! with 17 significant digits so that reading back is bit-exact.
//!
//! ```json
//! {"format": "hra-lab-ckpt-v1",
//!  "tensors": {"controller/W": {"shape": [4, 8], "data": ["1.2345678901234567e-1", ...]}},
//!  "meta": {...}}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use hra_core::params::ParamSet;
use hra_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

pub const FORMAT: &str = "hra-lab-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointJson {
    format: String,
    tensors: BTreeMap<String, TensorJson>,
    meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub meta: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new(tensors: ParamSet) -> Self {
        Checkpoint {
            tensors,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let doc = CheckpointJson {
            format: FORMAT.into(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    (
                        name.to_string(),
                        TensorJson {
                            shape: t.shape().to_vec(),
                            data: t.to_decimal_strings(),
                        },
                    )
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointJson = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(LabError::Checkpoint(format!(
                "unsupported format `{}`, expected `{FORMAT}`",
                doc.format
            )));
        }
        let mut tensors = ParamSet::new();
        for (name, t) in doc.tensors {
            let data: Vec<&str> = t.data.iter().map(String::as_str).collect();
            let tensor = Tensor::from_decimal_strings(&t.shape, &data)
                .map_err(|e| LabError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, tensor);
        }
        Ok(Checkpoint {
            tensors,
            meta: doc.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(LabError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert(
            "heads/0/M",
            Tensor::new(&[2, 2], vec![0.1, -1.0 / 3.0, 1e-300, -0.0]).unwrap(),
        );
        p.insert("controller/u", Tensor::new(&[1], vec![f64::MIN_POSITIVE]).unwrap());
        let ck = Checkpoint::new(p).with_meta("seed", 7);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        for (name, t) in ck.tensors.iter() {
            let u = back.tensors.get(name).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
        assert_eq!(back.meta["seed"], 7);
        assert_eq!(back.to_json(), ck.to_json());
    }

    #[test]
    fn rejects_other_formats_and_bad_shapes() {
        let bad = r#"{"format":"v0","tensors":{},"meta":{}}"#;
        assert!(Checkpoint::from_json(bad).is_err());
        let bad = r#"{"format":"hra-lab-ckpt-v1","tensors":{"a":{"shape":[2],"data":["1"]}},"meta":{}}"#;
        assert!(Checkpoint::from_json(bad).is_err());
    }
}
