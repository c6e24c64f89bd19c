//! Dataset model and file formats.
//!
//! A dataset is `n` samples of four concatenated modality vectors (two text
//! embedding channels, one image embedding channel, raw numeric features)
//! plus a binary label. On disk it lives either in a compact little-endian
//! binary format (f32 payload) or in a human-editable CSV used for hand
//! fixtures.

mod categories;
mod synthetic;

pub use categories::{
    aggregate_sentiment, cosine_matrix, rank_categories, select_categories, CategoryRanking,
    SelectionRule, SentimentTable, SimilarityMatrix,
};
pub use synthetic::{gen_synthetic, ModalityDims, SynthMode, SynthSpec};

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DATASET_MAGIC: &[u8; 4] = b"CFDS";
const DATASET_VERSION: u32 = 1;

/// The four modality slots every dataset must fill exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TextA,
    TextB,
    Image,
    Numeric,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::TextA, Role::TextB, Role::Image, Role::Numeric];

    pub fn code(self) -> u8 {
        match self {
            Role::TextA => 0,
            Role::TextB => 1,
            Role::Image => 2,
            Role::Numeric => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::TextA),
            1 => Some(Role::TextB),
            2 => Some(Role::Image),
            3 => Some(Role::Numeric),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::TextA => "text_a",
            Role::TextB => "text_b",
            Role::Image => "image",
            Role::Numeric => "numeric",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Role> {
        match s {
            "text_a" => Ok(Role::TextA),
            "text_b" => Ok(Role::TextB),
            "image" => Ok(Role::Image),
            "numeric" => Ok(Role::Numeric),
            other => Err(Error::Validation(format!(
                "unknown modality role {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub role: Role,
    pub dim: usize,
}

/// One mini-batch materialized as per-modality tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub text_a: Tensor,
    pub text_b: Tensor,
    pub image: Tensor,
    pub numeric: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality(&self, role: Role) -> &Tensor {
        match role {
            Role::TextA => &self.text_a,
            Role::TextB => &self.text_b,
            Role::Image => &self.image,
            Role::Numeric => &self.numeric,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    modalities: Vec<ModalitySpec>,
    /// Row-major `n x total_dim`, modalities concatenated in `modalities` order.
    values: Vec<f64>,
    labels: Vec<u8>,
}

impl MultimodalDataset {
    pub fn new(modalities: Vec<ModalitySpec>, values: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation(
                "dataset must have at least one sample".into(),
            ));
        }
        for role in Role::ALL {
            let count = modalities.iter().filter(|m| m.role == role).count();
            if count != 1 {
                return Err(Error::Validation(format!(
                    "role {role} must appear exactly once, found {count}"
                )));
            }
        }
        if modalities.iter().any(|m| m.dim == 0) {
            return Err(Error::Validation("modality dims must be positive".into()));
        }
        if modalities
            .iter()
            .any(|m| m.name.contains(',') || m.name.contains(':'))
        {
            return Err(Error::Validation(
                "modality names must not contain ',' or ':'".into(),
            ));
        }
        let total: usize = modalities.iter().map(|m| m.dim).sum();
        if values.len() != total * labels.len() {
            return Err(Error::Validation(format!(
                "expected {} values for {} samples of width {total}, found {}",
                total * labels.len(),
                labels.len(),
                values.len()
            )));
        }
        for (i, chunk) in values.chunks(total).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite value in sample {i}")));
            }
            if labels[i] > 1 {
                return Err(Error::Validation(format!(
                    "label {} out of range at sample {i}",
                    labels[i]
                )));
            }
        }
        Ok(MultimodalDataset {
            modalities,
            values,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn total_dim(&self) -> usize {
        self.modalities.iter().map(|m| m.dim).sum()
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn modality(&self, role: Role) -> &ModalitySpec {
        self.modalities
            .iter()
            .find(|m| m.role == role)
            .expect("constructor guarantees every role")
    }

    pub fn dim(&self, role: Role) -> usize {
        self.modality(role).dim
    }

    fn offset_of(&self, role: Role) -> usize {
        let mut offset = 0;
        for m in &self.modalities {
            if m.role == role {
                return offset;
            }
            offset += m.dim;
        }
        unreachable!("constructor guarantees every role")
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample_values(&self, i: usize) -> &[f64] {
        let width = self.total_dim();
        &self.values[i * width..(i + 1) * width]
    }

    /// Extract the modality block of selected samples as a `[B, dim]` tensor.
    pub fn modality_rows(&self, role: Role, indices: &[usize]) -> Tensor {
        let offset = self.offset_of(role);
        let dim = self.dim(role);
        let width = self.total_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&self.values[i * width + offset..i * width + offset + dim]);
        }
        Tensor::new(vec![indices.len(), dim], data).expect("block sizes agree")
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            text_a: self.modality_rows(Role::TextA, indices),
            text_b: self.modality_rows(Role::TextB, indices),
            image: self.modality_rows(Role::Image, indices),
            numeric: self.modality_rows(Role::Numeric, indices),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    // ── binary format ───────────────────────────────────────────────────
    //
    // Little-endian: magic "CFDS", u32 version=1, u32 n_samples,
    // u32 n_modalities; per modality: u16 name length, UTF-8 name, u8 role
    // code, u32 dim; then per sample: f32 values for each modality in header
    // order, then u8 label.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_samples() as u32).to_le_bytes());
        out.extend_from_slice(&(self.modalities.len() as u32).to_le_bytes());
        for m in &self.modalities {
            let name = m.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(m.role.code());
            out.extend_from_slice(&(m.dim as u32).to_le_bytes());
        }
        let width = self.total_dim();
        for i in 0..self.n_samples() {
            for v in &self.values[i * width..(i + 1) * width] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.push(self.labels[i]);
        }
        out
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = ByteReader::new(bytes, path);
        let magic = reader.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
            });
        }
        let version = reader.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported version {version}"),
            });
        }
        let n_samples = reader.u32("sample count")? as usize;
        let n_modalities = reader.u32("modality count")? as usize;
        if n_modalities != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected 4 modalities, header says {n_modalities}"),
            });
        }
        let mut modalities = Vec::with_capacity(n_modalities);
        for _ in 0..n_modalities {
            let name_len = reader.u16("name length")? as usize;
            let name_bytes = reader.take(name_len, "modality name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: "modality name is not UTF-8".into(),
            })?;
            let code = reader.u8("role code")?;
            let role = Role::from_code(code).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("unknown role code {code}"),
            })?;
            let dim = reader.u32("modality dim")? as usize;
            modalities.push(ModalitySpec { name, role, dim });
        }
        let width: usize = modalities.iter().map(|m| m.dim).sum();
        let mut values = Vec::with_capacity(n_samples * width);
        let mut labels = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            for _ in 0..width {
                let v = reader.f32(&format!("sample {i} values"))? as f64;
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite value in sample {i} of {}",
                        path.display()
                    )));
                }
                values.push(v);
            }
            labels.push(reader.u8(&format!("sample {i} label"))?);
        }
        if !reader.is_exhausted() {
            return Err(Error::Corruption {
                path: path.to_path_buf(),
                message: format!("{} trailing bytes after payload", reader.remaining()),
            });
        }
        MultimodalDataset::new(modalities, values, labels)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    // ── CSV format ──────────────────────────────────────────────────────
    //
    // Header `label,<role>:<dim_index>,...`; one sample per row. Modality
    // names in CSV are the role names, so fixtures stay self-describing.

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("label");
        for m in &self.modalities {
            for i in 0..m.dim {
                out.push_str(&format!(",{}:{i}", m.role.name()));
            }
        }
        out.push('\n');
        let width = self.total_dim();
        for i in 0..self.n_samples() {
            out.push_str(&self.labels[i].to_string());
            for v in &self.values[i * width..(i + 1) * width] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "empty file".into(),
        })?;
        let mut cols = header.split(',');
        if cols.next() != Some("label") {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "first header column must be 'label'".into(),
            });
        }
        let mut modalities: Vec<ModalitySpec> = Vec::new();
        for col in cols {
            let (name, idx) = col.split_once(':').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("header column {col:?} is not '<role>:<index>'"),
            })?;
            let role = Role::from_str(name)?;
            let idx: usize = idx.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("bad dimension index in column {col:?}"),
            })?;
            match modalities.last_mut() {
                Some(last) if last.role == role => {
                    if idx != last.dim {
                        return Err(Error::Format {
                            path: path.to_path_buf(),
                            message: format!("non-contiguous index in column {col:?}"),
                        });
                    }
                    last.dim += 1;
                }
                _ => {
                    if idx != 0 {
                        return Err(Error::Format {
                            path: path.to_path_buf(),
                            message: format!("modality {name} must start at index 0"),
                        });
                    }
                    modalities.push(ModalitySpec {
                        name: name.to_string(),
                        role,
                        dim: 1,
                    });
                }
            }
        }
        let width: usize = modalities.iter().map(|m| m.dim).sum();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row_idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width + 1 {
                return Err(Error::Validation(format!(
                    "row {} has {} values, header promises {}",
                    row_idx + 1,
                    fields.len().saturating_sub(1),
                    width
                )));
            }
            let label: u8 = fields[0].parse().map_err(|_| {
                Error::Validation(format!("row {}: bad label {:?}", row_idx + 1, fields[0]))
            })?;
            labels.push(label);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| {
                    Error::Validation(format!("row {}: bad value {f:?}", row_idx + 1))
                })?;
                values.push(v);
            }
        }
        MultimodalDataset::new(modalities, values, labels)
    }
}

/// Whole-file atomic write: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "out".into());
        name.push(format!(".tmp-{}", std::process::id()));
        match dir {
            Some(d) => d.join(name),
            None => PathBuf::from(name),
        }
    };
    let mut file = fs::File::create(&tmp).map_err(|source| Error::IoAt {
        path: tmp.clone(),
        source,
    })?;
    file.write_all(bytes).map_err(|source| Error::IoAt {
        path: tmp.clone(),
        source,
    })?;
    file.sync_all().ok();
    drop(file);
    fs::rename(&tmp, path).map_err(|source| Error::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
