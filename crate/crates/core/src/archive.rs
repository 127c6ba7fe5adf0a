//! Flat key -> tensor archives stored in the safetensors layout.
//!
//! Writing always uses little-endian `F64`. Reading accepts `F32` and `F64`
//! so that weights exported from other frameworks can be imported without
//! conversion.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Archive(format!("tensor `{name}` is not 2-D")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k.clone(), v.shape().to_vec(), bytes)
            })
            .collect();
        let mut views = Vec::with_capacity(buffers.len());
        for (k, shape, bytes) in &buffers {
            let view = TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map_err(|e| Error::Archive(format!("{k}: {e}")))?;
            views.push((k.as_str(), view));
        }
        let meta: Option<HashMap<String, String>> = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::tensor::serialize(views, &meta).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let mut out = TensorArchive::new();
        if let Some(meta) = header.metadata() {
            out.metadata = meta.clone().into_iter().collect();
        }
        for (name, view) in st.tensors() {
            let data = decode(&name, &view)?;
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
            out.tensors.insert(name, arr);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode(name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let raw = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()),
        Dtype::F32 => Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()),
        other => Err(Error::Archive(format!(
            "tensor `{name}` has unsupported dtype {other:?}"
        ))),
    }
}
