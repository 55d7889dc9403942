//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"MLCK" | u32 version | u32 config length | config JSON | f32 × param_count
//! ```
//!
//! Tensors follow the slot order of [`ModelConfig::param_shapes`].

use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let json = serde_json::to_string(&serde_json::to_value(&self.config)?)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 12 {
            return Err(fmt("file shorter than its header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + json_len)
            .ok_or_else(|| fmt("truncated config"))?;
        let config: ModelConfig = serde_json::from_slice(json)
            .map_err(|e| fmt(&format!("config does not parse: {e}")))?;
        config
            .validate()
            .map_err(|e| fmt(&format!("invalid config: {e}")))?;
        let payload = &bytes[12 + json_len..];
        let expect = 4 * config.param_count();
        if payload.len() != expect {
            return Err(fmt(&format!(
                "payload is {} bytes, config needs {expect}",
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut tensors = Vec::new();
        for (_, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(&shape, values.by_ref().take(n).collect())?);
        }
        Ok(Self { config, tensors })
    }
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, params.to_bytes()?).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    ModelParams::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.config, q.config);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            let (a, b): (Vec<u32>, Vec<u32>) = (
                a.data().iter().map(|v| v.to_bits()).collect(),
                b.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
    }

    #[test]
    fn payload_length_matches_count() {
        let cfg = ModelConfig::default();
        let bytes = ModelParams::<f32>::init(&cfg, 0).unwrap().to_bytes().unwrap();
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 12 - json_len, 4 * 250_325);
        assert_eq!(&bytes[..4], b"MLCK");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let json = std::str::from_utf8(&bytes[12..12 + json_len]).unwrap();
        assert!(json.starts_with("{\"alphabet_size\":37,"));
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let cfg = ModelConfig::default();
        let bytes = ModelParams::<f32>::init(&cfg, 0).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 11, 40, bytes.len() - 1] {
            assert!(matches!(ModelParams::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ModelParams::from_bytes(&long), Err(Error::Format(_))));
    }
}
