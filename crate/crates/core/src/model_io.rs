//! Versioned binary model files.
//!
//! Layout (little-endian): magic "CFMD", u32 version=1, u32 JSON header
//! length, the JSON header (strategy, model config, training config), u32
//! parameter count; per parameter: u16 name length, UTF-8 name, u32 rank,
//! u32 dims, raw f64 data. Parameters are stored in registration order and
//! restored by name, so files survive refactors that only reorder fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineModel};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::train::{MultimodalClassifier, TrainConfig};

const MODEL_MAGIC: &[u8; 4] = b"CFMD";
const MODEL_VERSION: u32 = 1;

/// Either fusion architecture behind one trainable interface.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Caps(FusionModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn strategy_name(&self) -> &'static str {
        match self {
            AnyModel::Caps(_) => "capsnet",
            AnyModel::Baseline(b) => b.config().strategy.name(),
        }
    }

    pub fn as_caps(&self) -> Option<&FusionModel> {
        match self {
            AnyModel::Caps(m) => Some(m),
            AnyModel::Baseline(_) => None,
        }
    }
}

impl MultimodalClassifier for AnyModel {
    fn params(&self) -> &ParamSet {
        match self {
            AnyModel::Caps(m) => m.params(),
            AnyModel::Baseline(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            AnyModel::Caps(m) => m.params_mut(),
            AnyModel::Baseline(m) => m.params_mut(),
        }
    }

    fn n_classes(&self) -> usize {
        match self {
            AnyModel::Caps(m) => m.config().n_classes,
            AnyModel::Baseline(m) => m.config().n_classes,
        }
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &crate::data::Batch,
        override_param: Option<(crate::numerics::ParamId, Var)>,
    ) -> Result<Var> {
        match self {
            AnyModel::Caps(m) => Ok(m.forward_on_tape(tape, batch, override_param)?.logits),
            AnyModel::Baseline(m) => m.logits_on_tape(tape, batch, override_param),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<BaselineConfig>,
    train: TrainConfig,
}

/// A model plus the training config it was produced with; the config's seed
/// and split fractions let evaluation reconstruct the exact data split.
#[derive(Debug, Clone)]
pub struct StoredModel {
    pub model: AnyModel,
    pub train: TrainConfig,
}

pub fn model_to_bytes(model: &AnyModel, train: &TrainConfig) -> Result<Vec<u8>> {
    let header = ModelHeader {
        strategy: model.strategy_name().to_string(),
        fusion: model.as_caps().map(|m| m.config().clone()),
        baseline: match model {
            AnyModel::Baseline(b) => Some(b.config().clone()),
            AnyModel::Caps(_) => None,
        },
        train: train.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for entry in params.entries() {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in entry.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_model(path: &Path, model: &AnyModel, train: &TrainConfig) -> Result<()> {
    write_atomic(path, &model_to_bytes(model, train)?)
}

pub fn read_model(path: &Path) -> Result<StoredModel> {
    let bytes = fs::read(path).map_err(|source| Error::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_bytes(&bytes, path)
}

fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<StoredModel> {
    let corrupt = |message: String| Error::Corruption {
        path: path.to_path_buf(),
        message,
    };
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };

    let magic = take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic {magic:?}, expected {MODEL_MAGIC:?}"),
        });
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported version {version}"),
        });
    }
    let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(take(header_len, "header")?)?;

    // Rebuild the architecture from its config (seed irrelevant, every
    // parameter is overwritten), then load parameters by name.
    let mut model = match (&header.fusion, &header.baseline) {
        (Some(cfg), None) => AnyModel::Caps(FusionModel::new(cfg.clone(), 0)?),
        (None, Some(cfg)) => AnyModel::Baseline(BaselineModel::new(cfg.clone(), 0)?),
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "header must carry exactly one architecture config".into(),
            })
        }
    };

    let n_params = u32::from_le_bytes(take(4, "parameter count")?.try_into().unwrap()) as usize;
    if n_params != model.params().len() {
        return Err(corrupt(format!(
            "file has {n_params} parameters, architecture expects {}",
            model.params().len()
        )));
    }
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let name_len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, "parameter name")?.to_vec())
            .map_err(|_| corrupt(format!("parameter {i} name is not UTF-8")))?;
        let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 8, "parameter data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }

    let params = model.params_mut();
    for (name, tensor) in loaded {
        let id = params
            .entries()
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("unknown parameter {name:?}")))?;
        let id = params.ids().nth(id).expect("index in range");
        if params.get(id).shape() != tensor.shape() {
            return Err(corrupt(format!(
                "parameter {name:?} has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = tensor.with_requires_grad(true);
    }

    Ok(StoredModel {
        model,
        train: header.train,
    })
}
