//! On-disk formats: the `S5TN` binary tensor container, JSON-lines manifests
//! and the `S5CK` checkpoint container.
//!
//! `S5TN` layout (all integers little-endian):
//!
//! ```text
//! magic "S5TN" | version u8 = 1 | dtype u8 | rank u8 | reserved u8 = 0
//! dims: rank × u64 | payload: row-major values
//! ```
//!
//! dtype 0 = f32, 1 = f64, 2 = u16 (label maps).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"S5TN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S5CK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U16(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(dtype: u8) -> Option<usize> {
        match dtype {
            0 => Some(4),
            1 => Some(8),
            2 => Some(2),
            _ => None,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U16(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// One tensor as stored in an `S5TN` file.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl BinaryTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Validation(format!("rank {} too large", dims.len())));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "binary_tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(BinaryTensor { dims, data })
    }

    pub fn from_tensor_f64(t: &Tensor) -> Self {
        BinaryTensor {
            dims: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn from_tensor_f32(t: &Tensor) -> Self {
        BinaryTensor {
            dims: t.shape().to_vec(),
            data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.clone(), self.data.to_f64()).expect("validated on construction")
    }

    pub fn encode(&self) -> Vec<u8> {
        let elem = TensorData::elem_size(self.data.dtype()).unwrap();
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + elem * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decode one record from the front of `bytes`; returns the tensor and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        if bytes.len() < 8 {
            return Err("truncated header".into());
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err("bad magic".into());
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let dtype = bytes[5];
        let elem = TensorData::elem_size(dtype).ok_or_else(|| format!("unknown dtype {dtype}"))?;
        let rank = bytes[6] as usize;
        let mut pos = 8;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| "truncated dims".to_string())?;
            let d = u64::from_le_bytes(raw.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| "dimension overflow".to_string())?);
            pos += 8;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| "element count overflow".to_string())?;
        let payload_len = numel
            .checked_mul(elem)
            .ok_or_else(|| "payload overflow".to_string())?;
        let payload = bytes
            .get(pos..pos + payload_len)
            .ok_or_else(|| "truncated payload".to_string())?;
        let data = match dtype {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((BinaryTensor { dims, data }, pos + payload_len))
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - used));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|r| Error::format(path, r))
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: Option<String>,
    pub dataset: String,
    pub split: String,
}

/// A JSON-lines manifest. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Manifest {
            root: root.into(),
            records,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, records };
        m.check_unique()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_jsonl().as_bytes())
    }

    /// Write with every relative path rewritten to resolve from the directory
    /// of `path`, so the manifest can live anywhere.
    pub fn write_relocated(&self, path: &Path) -> Result<()> {
        let here = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let dir = here(parent.unwrap_or(Path::new(".")))?;
        let rebase = |rel: &str| -> Result<String> {
            let target = here(&self.resolve(rel))?;
            let r = pathdiff::diff_paths(&target, &dir).unwrap_or(target);
            Ok(r.to_string_lossy().into_owned())
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(ManifestRecord {
                    image: rebase(&r.image)?,
                    mask: r.mask.as_deref().map(rebase).transpose()?,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Manifest { root: dir, records }.write(path)
    }

    pub fn filter(&self, mut keep: impl FnMut(&ManifestRecord) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

/// `S5CK` container: magic, version, 3 reserved bytes, u64 header length, JSON
/// header, then one `S5TN` record per tensor in header order.
pub fn encode_checkpoint(header: &serde_json::Value, tensors: &[(String, BinaryTensor)]) -> Vec<u8> {
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    let full = serde_json::json!({ "meta": header, "tensors": names });
    let json = serde_json::to_vec(&full).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        out.extend_from_slice(&t.encode());
    }
    out
}

pub type CheckpointContents = (serde_json::Value, Vec<(String, BinaryTensor)>);

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<CheckpointContents, String> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err("not a checkpoint".into());
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| "truncated header".to_string())?;
    let header: serde_json::Value = serde_json::from_slice(json).map_err(|e| e.to_string())?;
    let names: Vec<String> = serde_json::from_value(header["tensors"].clone())
        .map_err(|e| format!("tensor list: {e}"))?;
    let mut pos = 16 + hlen;
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let (t, used) = BinaryTensor::decode_prefix(&bytes[pos..]).map_err(|e| format!("{name}: {e}"))?;
        pos += used;
        tensors.push((name, t));
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok((header["meta"].clone(), tensors))
}
