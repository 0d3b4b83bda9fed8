//! Named-tensor weight archives in the safetensors layout: a JSON manifest
//! (name, dtype, shape, byte offsets) followed by little-endian tensor bytes.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::Real;

/// Metadata key holding caller-supplied JSON (network config, provenance).
pub const METADATA_KEY: &str = "wssis";

pub fn to_bytes(store: &ParamStore, metadata: Option<&str>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = store
        .iter()
        .map(|p| {
            let raw = p
                .value
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>();
            (p.name.clone(), raw, p.value.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| NnError::Archive(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    // A single metadata entry keeps the header byte-stable.
    let info = metadata.map(|m| HashMap::from([(METADATA_KEY.to_string(), m.to_string())]));
    safetensors::tensor::serialize(views, info).map_err(|e| NnError::Archive(e.to_string()))
}

pub fn save(store: &ParamStore, metadata: Option<&str>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store, metadata)?)?;
    Ok(())
}

/// Overwrites every parameter of `store` from `bytes`, checking names and
/// shapes. Returns the archive metadata string, if any.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<Option<String>> {
    let archive = SafeTensors::deserialize(bytes).map_err(|e| NnError::Archive(e.to_string()))?;
    if archive.len() != store.len() {
        return Err(NnError::Archive(format!(
            "archive holds {} tensors, model expects {}",
            archive.len(),
            store.len()
        )));
    }
    for p in store.iter_mut() {
        let view = archive
            .tensor(&p.name)
            .map_err(|_| NnError::MissingParam(p.name.clone()))?;
        if view.dtype() != Dtype::F64 {
            return Err(NnError::Archive(format!("{}: expected F64, got {:?}", p.name, view.dtype())));
        }
        if view.shape() != p.value.shape() {
            return Err(NnError::Shape(format!(
                "{}: archive shape {:?}, model shape {:?}",
                p.name,
                view.shape(),
                p.value.shape()
            )));
        }
        let data: Vec<Real> = view
            .data()
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        p.value = Tensor::from_vec(view.shape(), data)?;
    }
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| NnError::Archive(e.to_string()))?;
    Ok(meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned()))
}

/// Reads only the metadata string of an archive.
pub fn read_metadata(bytes: &[u8]) -> Result<Option<String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| NnError::Archive(e.to_string()))?;
    Ok(meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned()))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<Option<String>> {
    let bytes = std::fs::read(path)?;
    load_into(store, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 1e-300, -7.5, 2.0]).unwrap());
        s.add("a.bias", Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_exact_and_bytes_are_stable() {
        let store = sample_store();
        let bytes = to_bytes(&store, Some("{\"k\":1}")).unwrap();
        assert_eq!(bytes, to_bytes(&store, Some("{\"k\":1}")).unwrap());
        let mut other = sample_store();
        other.iter_mut().for_each(|p| p.value.fill(9.0));
        let meta = load_into(&mut other, &bytes).unwrap();
        assert!(other.values_equal(&store));
        assert_eq!(meta.as_deref(), Some("{\"k\":1}"));
    }

    #[test]
    fn manifest_lists_names_shapes_and_offsets() {
        let bytes = to_bytes(&sample_store(), None).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        assert!(header.contains("\"a.weight\""));
        assert!(header.contains("\"F64\""));
        assert!(header.contains("\"shape\":[2,3]"));
        assert!(header.contains("data_offsets"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bytes = to_bytes(&sample_store(), None).unwrap();
        let mut wrong = ParamStore::new();
        wrong.add("a.weight", Tensor::zeros(&[3, 2]));
        wrong.add("a.bias", Tensor::zeros(&[2]));
        assert!(matches!(load_into(&mut wrong, &bytes), Err(NnError::Shape(_))));
    }
}
