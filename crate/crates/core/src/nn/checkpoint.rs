use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const META_KEY: &str = "ratediff_meta";

/// Named tensors plus a JSON metadata document, stored as a safetensors file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Self {
        Self { tensors, meta }
    }

    /// Writes the file and returns its SHA-256 as lowercase hex.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(info))?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(path, "missing checkpoint metadata"))?;
        let meta: serde_json::Value =
            serde_json::from_str(meta).map_err(|e| Error::format(path, e.to_string()))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_iter()
            .collect();
        Ok(Self { tensors, meta })
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.safetensors");
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::new(&[1.5f32, -2.0], &Device::Cpu).unwrap());
        let ck = Checkpoint::new(tensors, serde_json::json!({"step": 3}));
        let h1 = ck.save(&path).unwrap();
        assert_eq!(h1, file_sha256(&path).unwrap());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta["step"], 3);
        assert_eq!(back.tensors["w"].to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
        assert_eq!(ck.save(&path).unwrap(), h1);
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
