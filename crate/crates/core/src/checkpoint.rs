//! Single-file checkpoints: agent parameters, optimizer moments and run metadata in
//! one safetensors archive. Metadata lives under the `sketchcomm` header key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentConfig;
use crate::encoders::{EncoderSpec, WeightSource};
use crate::error::{Error, Result};
use crate::game::GameConfig;
use crate::optim::AdamConfig;
use crate::raster::RasterConfig;

pub const FORMAT: &str = "sketchcomm-checkpoint/1";
const META_KEY: &str = "sketchcomm";
const PARAM_PREFIX: &str = "param.";
const ADAM_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub spec: EncoderSpec,
    pub source: WeightSource,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: u64,
    pub seed: u64,
    pub config: GameConfig,
    pub config_hash: String,
    pub encoder: EncoderRecord,
    pub raster: RasterConfig,
    pub agent: AgentConfig,
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
}

fn f32_bytes(t: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
    let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((t.dims().to_vec(), values.iter().flat_map(|v| v.to_le_bytes()).collect()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for (name, t) in &self.params {
            raw.insert(format!("{PARAM_PREFIX}{name}"), f32_bytes(t)?);
        }
        for (name, t) in &self.optimizer {
            raw.insert(format!("{ADAM_PREFIX}{name}"), f32_bytes(t)?);
        }
        let views = raw
            .iter()
            .map(|(n, (shape, bytes))| Ok((n.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        Ok(safetensors::serialize(views, Some(info))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no run metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?} (expected {FORMAT})",
                meta.format
            )));
        }
        let st = SafeTensors::deserialize(bytes)?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_PREFIX) {
                optimizer.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        crate::data::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(format!("checkpoint {} not found", path.display())));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
