//! Named-tensor archive: magic, manifest length, JSON manifest, then
//! little-endian tensor data in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"VRDCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    /// Training stage that produced the checkpoint.
    pub stage: String,
    pub steps: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub stage: String,
    pub steps: usize,
    pub model: Model<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(stage: impl Into<String>, steps: usize, model: Model<T>) -> Self {
        Self {
            stage: stage.into(),
            steps,
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            dtype: T::DTYPE.name().to_string(),
            stage: self.stage.clone(),
            steps: self.steps,
            model: self.model.config.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.model.params.num_elements() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.model.params.iter() {
            for &v in m.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let dtype = DType::from_name(&manifest.dtype).ok_or_else(|| bad("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored as {}, requested {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        manifest.model.validate()?;
        let size = dtype.size();
        let mut data = &bytes[12 + len..];
        let mut params = ParamSet::new();
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * size {
                return Err(Error::Checkpoint(format!("truncated tensor {}", t.name)));
            }
            let values = data[..n * size].chunks_exact(size).map(T::read_le).collect();
            params.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, values));
            data = &data[n * size..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            stage: manifest.stage,
            steps: manifest.steps,
            model: Model {
                config: manifest.model,
                params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::reldecoder::DecoderConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            text_dim: 8,
            text_seed: 3,
            detector: DetectorConfig {
                image_size: 16,
                patch_size: 8,
                depth: 1,
                width: 8,
                heads: 2,
                ..Default::default()
            },
            decoder: DecoderConfig {
                num_queries: 2,
                layers: 1,
                heads: 2,
                width: 8,
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for seed in 0..3 {
            let c = Checkpoint::new("detector", 7, Model::<f32>::init(tiny(), seed).unwrap());
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.model.config, c.model.config);
            assert_eq!(back.steps, 7);
        }
        let d = Checkpoint::new("decoder", 1, Model::<f64>::init(tiny(), 1).unwrap());
        let bytes = d.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let c = Checkpoint::new("detector", 0, Model::<f32>::init(tiny(), 0).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
        let missing = Checkpoint::<f32>::load(Path::new("/nonexistent/ckpt.bin"));
        assert!(matches!(missing, Err(Error::MissingCheckpoint(_))));
    }
}
