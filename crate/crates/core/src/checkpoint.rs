//! Binary tensor container and training checkpoints.
//!
//! Container layout: magic `UDML`, format version u32, entry count u32, then
//! per entry a length-prefixed UTF-8 name, a dtype tag, rank, u64 extents,
//! and a little-endian payload. A SHA-256 digest of everything preceding it
//! closes the file; loads verify the digest before parsing, so a truncated or
//! damaged file never yields partial state. Writes go to a temp file and
//! rename into place.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::{AdamState, EpochMetrics};

pub const MAGIC: &[u8; 4] = b"UDML";
pub const FORMAT_VERSION: u32 = 1;

const TAG_BYTES: u8 = 0;
const TAG_U64: u8 = 3;
const DIGEST_LEN: usize = 32;

/// One named payload in the container.
#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    Bytes(Vec<u8>),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64(Vec<u64>),
}

pub fn write_container(path: &Path, entries: &[(String, EntryData)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, data) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match data {
            EntryData::Bytes(bytes) => {
                buf.push(TAG_BYTES);
                write_extents(&mut buf, &[bytes.len()]);
                buf.extend_from_slice(bytes);
            }
            EntryData::F32(t) => {
                buf.push(Dtype::F32.tag());
                write_extents(&mut buf, t.shape());
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
            }
            EntryData::F64(t) => {
                buf.push(Dtype::F64.tag());
                write_extents(&mut buf, t.shape());
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
            }
            EntryData::U64(vals) => {
                buf.push(TAG_U64);
                write_extents(&mut buf, &[vals.len()]);
                for &v in vals {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_extents(buf: &mut Vec<u8>, extents: &[usize]) {
    buf.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for &e in extents {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(overrun)?;
        if end > self.bytes.len() {
            return Err(overrun());
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn overrun() -> Error {
    Error::Corruption("container payload overruns file".into())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, EntryData)>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Corruption(format!(
            "{}: {} bytes is too short for a container",
            path.display(),
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corruption(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    let mut r = Reader { bytes: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a tensor container",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {version} is not supported; this reader handles version {FORMAT_VERSION}",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corruption("entry name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u64()? as usize);
        }
        let numel: usize = extents.iter().product();
        let data = match tag {
            TAG_BYTES => EntryData::Bytes(r.take(numel)?.to_vec()),
            t if t == Dtype::F32.tag() => {
                let raw = r.take(numel * 4)?;
                let vals: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
                EntryData::F32(Tensor::new(extents, vals)?)
            }
            t if t == Dtype::F64.tag() => {
                let raw = r.take(numel * 8)?;
                let vals: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
                EntryData::F64(Tensor::new(extents, vals)?)
            }
            TAG_U64 => {
                let raw = r.take(numel * 8)?;
                EntryData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown dtype tag {other} for entry {name:?}"
                )))
            }
        };
        entries.push((name, data));
    }
    if r.at != body.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.at
        )));
    }
    Ok(entries)
}

fn tensor_entry<T: Scalar>(t: &Tensor<T>) -> EntryData {
    match T::DTYPE {
        Dtype::F32 => EntryData::F32(
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| v.to_f64() as f32).collect(),
            )
            .expect("same shape"),
        ),
        Dtype::F64 => EntryData::F64(
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| v.to_f64()).collect(),
            )
            .expect("same shape"),
        ),
    }
}

fn entry_tensor<T: Scalar>(name: &str, data: &EntryData) -> Result<Tensor<T>> {
    match (T::DTYPE, data) {
        (Dtype::F32, EntryData::F32(t)) => {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
        }
        (Dtype::F64, EntryData::F64(t)) => {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::from_f64(v)).collect())
        }
        _ => Err(Error::Format(format!(
            "entry {name:?} has a different element width than the requested model"
        ))),
    }
}

/// Everything needed to resume: resolved config, parameters, optimizer
/// moments, and the metric history of completed epochs.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: serde_json::Value,
    /// Completed epochs; equals `history.len()`.
    pub epoch: usize,
    pub model: ModelParams<T>,
    pub adam: AdamState<T>,
    pub history: Vec<EpochMetrics>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    config: serde_json::Value,
    epoch: usize,
    adam_t: u64,
    history: Vec<EpochMetrics>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_t: self.adam.t,
            history: self.history.clone(),
        };
        let mut entries: Vec<(String, EntryData)> = vec![(
            "meta".to_string(),
            EntryData::Bytes(serde_json::to_vec(&meta).expect("meta serializes")),
        )];
        let named = self.model.named_tensors();
        let mut sorted: BTreeMap<String, EntryData> = BTreeMap::new();
        for (i, (name, tensor)) in named.iter().enumerate() {
            sorted.insert(format!("param.{name}"), tensor_entry(tensor));
            sorted.insert(format!("adam.m.{name}"), tensor_entry(&self.adam.m[i]));
            sorted.insert(format!("adam.v.{name}"), tensor_entry(&self.adam.v[i]));
        }
        entries.extend(sorted);
        write_container(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_container(path)?;
        let map: BTreeMap<String, EntryData> = entries.into_iter().collect();
        let meta_bytes = match map.get("meta") {
            Some(EntryData::Bytes(b)) => b,
            _ => return Err(Error::Format("checkpoint has no meta entry".into())),
        };
        let meta: Meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Corruption(format!("meta entry is not valid JSON: {e}")))?;
        let cfg = ExperimentConfig::from_json(&meta.config)?;
        let spec = cfg.backbone_spec()?;
        let mut model: ModelParams<T> = crate::model::init_params(&spec, cfg.d_embed, 0)?;
        let mut adam = AdamState::new(&model);
        adam.t = meta.adam_t;
        {
            let named = model.named_tensors_mut();
            for (i, (name, tensor)) in named.into_iter().enumerate() {
                let expected = tensor.shape().to_vec();
                let fetch = |prefix: &str| -> Result<Tensor<T>> {
                    let key = format!("{prefix}.{name}");
                    let entry = map
                        .get(&key)
                        .ok_or_else(|| Error::Format(format!("checkpoint missing entry {key:?}")))?;
                    let loaded = entry_tensor::<T>(&key, entry)?;
                    if loaded.shape() != expected {
                        return Err(Error::Format(format!(
                            "entry {key:?} has shape {:?}, model expects {:?}",
                            loaded.shape(),
                            expected
                        )));
                    }
                    Ok(loaded)
                };
                *tensor = fetch("param")?;
                adam.m[i] = fetch("adam.m")?;
                adam.v[i] = fetch("adam.v")?;
            }
        }
        if meta.history.len() != meta.epoch {
            return Err(Error::Corruption(format!(
                "checkpoint claims {} epochs but carries {} history rows",
                meta.epoch,
                meta.history.len()
            )));
        }
        Ok(Checkpoint {
            config: meta.config,
            epoch: meta.epoch,
            model,
            adam,
            history: meta.history,
        })
    }
}
