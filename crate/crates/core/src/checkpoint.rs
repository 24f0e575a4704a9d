//! Binary checkpoints.
//!
//! Layout: the magic `LSHG`, a version byte, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then zero padding so that every tensor
//! starts on a 64-byte boundary. The manifest holds the configuration as
//! key/value text and the tensors sorted by name with shape, dtype and
//! offset (relative to the start of the data section). Tensor data is
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hourglass::{build_network, NetworkConfig, StackedHourglass, NETWORK_KEYS};
use crate::tensor::{DType, Scalar, Shape};

pub const MAGIC: &[u8; 4] = b"LSHG";
pub const VERSION: u8 = 1;
const ALIGN: usize = 64;
const HEADER: usize = 4 + 1 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes every registry tensor (learnable parameters and running statistics).
pub fn checkpoint_bytes<T: Scalar>(net: &StackedHourglass<T>) -> Vec<u8> {
    let mut config: BTreeMap<String, String> = net
        .config()
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    config.insert("seed".into(), net.seed().to_string());

    let mut params: Vec<_> = net.graph().params().iter().collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().dims(),
            dtype: T::DTYPE.name().to_string(),
            offset: offset as u64,
        });
        offset = align(offset + p.value.len() * T::DTYPE.size_bytes());
    }
    let manifest = serde_json::to_vec(&Manifest { config, tensors }).expect("manifest serializes");

    let data_start = align(HEADER + manifest.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for p in &params {
        out.resize(align(out.len()), 0);
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out.resize(data_start + offset, 0);
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &StackedHourglass<T>) -> Result<()> {
    fs::write(path, checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

/// A parsed checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an LSHG checkpoint".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[5..HEADER].try_into().expect("8 bytes")) as usize;
        let manifest_end = HEADER
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..manifest_end])
            .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        let data_start = align(manifest_end);
        let data = bytes.get(data_start..).unwrap_or_default().to_vec();
        for t in &manifest.tensors {
            let dtype = DType::parse(&t.dtype)
                .ok_or_else(|| Error::Format(format!("unknown dtype `{}` for {}", t.dtype, t.name)))?;
            let end = t.offset as usize + t.shape.iter().product::<usize>() * dtype.size_bytes();
            if end > data.len() {
                return Err(Error::Format(format!("tensor {} runs past the end of the file", t.name)));
            }
        }
        Ok(Checkpoint { manifest, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Network configuration and initialization seed recorded in the file.
    pub fn network_config(&self) -> Result<(NetworkConfig, u64)> {
        let mut config = NetworkConfig::default();
        for key in NETWORK_KEYS {
            let value = self
                .manifest
                .config
                .get(key)
                .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))?;
            config.set(key, value)?;
        }
        let seed = self
            .manifest
            .config
            .get("seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok((config, seed))
    }

    fn values<T: Scalar>(&self, entry: &TensorEntry) -> Vec<T> {
        let dtype = DType::parse(&entry.dtype).expect("dtype checked on read");
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let size = dtype.size_bytes();
        (0..n)
            .map(|i| {
                let b = &self.data[start + i * size..start + (i + 1) * size];
                match dtype {
                    DType::F32 => T::of(f32::read_le(b) as f64),
                    DType::F64 => T::of(f64::read_le(b)),
                }
            })
            .collect()
    }

    /// Copies every tensor into `net`, which must have the same configuration.
    pub fn restore<T: Scalar>(&self, net: &mut StackedHourglass<T>) -> Result<()> {
        for (key, expected) in net.config().to_pairs() {
            let found = self.manifest.config.get(key).cloned().unwrap_or_else(|| "absent".into());
            if found != expected {
                return Err(Error::Compatibility {
                    key: key.to_string(),
                    expected,
                    found,
                });
            }
        }
        if self.manifest.tensors.len() != net.graph().params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network has {}",
                self.manifest.tensors.len(),
                net.graph().params().len()
            )));
        }
        for entry in &self.manifest.tensors {
            let values = self.values::<T>(entry);
            let param = net
                .graph_mut()
                .param_mut(&entry.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {}", entry.name)))?;
            if param.value.shape() != Shape::from(entry.shape) {
                return Err(Error::Compatibility {
                    key: entry.name.clone(),
                    expected: param.value.shape().to_string(),
                    found: Shape::from(entry.shape).to_string(),
                });
            }
            param.value.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// Rebuilds the recorded network and restores its tensors.
    pub fn into_network<T: Scalar>(&self) -> Result<StackedHourglass<T>> {
        let (config, seed) = self.network_config()?;
        let mut net = build_network(&config, seed)?;
        self.restore(&mut net)?;
        Ok(net)
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<StackedHourglass<T>> {
    Checkpoint::read(path)?.into_network()
}
