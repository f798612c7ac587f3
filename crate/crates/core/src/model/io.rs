use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelError, ModelWeights};
use crate::format::{write_atomic, Container, Dtype, FormatError, TensorRecord, FORMAT_VERSION};
use crate::tensor::Tensor;

/// Scheme byte of an unquantized float32 weights file.
pub const SCHEME_FLOAT32: u8 = 0;

pub fn weights_to_bytes(w: &ModelWeights) -> Vec<u8> {
    let tensors = w
        .iter()
        .map(|(name, t)| TensorRecord {
            name: name.to_string(),
            dtype: Dtype::F32,
            shape: t.shape().to_vec(),
            quant: None,
            payload: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
        .collect();
    Container {
        version: FORMAT_VERSION,
        scheme: SCHEME_FLOAT32,
        config: w.config,
        tensors,
        calibration: Vec::new(),
    }
    .encode()
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelWeights, ModelError> {
    let c = Container::decode(bytes)?;
    if c.scheme != SCHEME_FLOAT32 {
        return Err(ModelError::Other(format!(
            "file holds a quantized model (scheme byte {}), not float weights",
            c.scheme
        )));
    }
    let mut map = IndexMap::with_capacity(c.tensors.len());
    for rec in c.tensors {
        let data: Vec<f32> = match rec.dtype {
            Dtype::F32 => rec
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F64 => rec
                .payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
                .collect(),
            other => {
                return Err(FormatError::UnknownDtype {
                    name: rec.name,
                    tag: other as u8,
                }
                .into())
            }
        };
        map.insert(rec.name, Tensor::new(rec.shape, data)?);
    }
    let mut w = ModelWeights::from_tensors(c.config, map)?;
    w.format_version = c.version;
    Ok(w)
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    write_atomic(path, &weights_to_bytes(w)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, ModelError> {
    let bytes = fs::read(path).map_err(FormatError::from)?;
    weights_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, UNetConfig};

    fn tiny() -> UNetConfig {
        UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 2,
            regression_hidden: 4,
            regression_dim: 3,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let w = build(&tiny(), 17).unwrap();
        let bytes = weights_to_bytes(&w);
        assert_eq!(&bytes[..5], b"VEINW");
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        for ((_, a), (_, b)) in w.iter().zip(back.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.veinw");
        let w = build(&tiny(), 2).unwrap();
        save_weights(&w, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), w);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = weights_to_bytes(&build(&tiny(), 0).unwrap());
        bytes[0] = b'X';
        let err = weights_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("not a weights file"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = weights_to_bytes(&build(&tiny(), 0).unwrap());
        bytes[5] = 99;
        assert!(matches!(
            weights_from_bytes(&bytes),
            Err(ModelError::Format(FormatError::UnsupportedVersion(99)))
        ));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let bytes = weights_to_bytes(&build(&tiny(), 0).unwrap());
        let cut = &bytes[..bytes.len() - 20];
        let err = weights_from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains("unexpected end of file"), "{err}");
        assert!(err.contains("fossa.fc2"), "{err}");
    }
}
