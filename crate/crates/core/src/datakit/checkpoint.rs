//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian, every variable-length field
//! length-prefixed with a `u32`):
//!
//! ```text
//! u8   version
//! u8   component tag
//! u32  metadata entry count, then (key, value) string pairs
//! u32  tensor count, then per tensor: name, u32 rank, u64 dims.., f64 values..
//! u8   selector present flag, then the selector snapshot when set
//! [32] SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, DenseNetwork, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentTag {
    Gan,
    Miner,
    Family,
    Conditional,
}

impl ComponentTag {
    fn to_byte(self) -> u8 {
        match self {
            ComponentTag::Gan => 1,
            ComponentTag::Miner => 2,
            ComponentTag::Family => 3,
            ComponentTag::Conditional => 4,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => ComponentTag::Gan,
            2 => ComponentTag::Miner,
            3 => ComponentTag::Family,
            4 => ComponentTag::Conditional,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentTag::Gan => "gan",
            ComponentTag::Miner => "miner",
            ComponentTag::Family => "family",
            ComponentTag::Conditional => "conditional",
        }
    }
}

/// Selector window and sealed probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSnapshot {
    pub capacity: usize,
    pub generators: usize,
    pub window: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub sealed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u8,
    pub tag: ComponentTag,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub selector: Option<SelectorSnapshot>,
}

impl Checkpoint {
    pub fn new(tag: ComponentTag) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            tag,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
            selector: None,
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("metadata `{key}` = `{raw}` is malformed")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))
    }

    /// Stores every layer of `net` under `prefix`.
    pub fn put_network(&mut self, prefix: &str, net: &DenseNetwork) {
        let acts: Vec<String> = net
            .layers()
            .iter()
            .map(|l| l.activation.tag().to_string())
            .collect();
        self.set_meta(format!("{prefix}.activations"), acts.join(","));
        self.set_meta(format!("{prefix}.frozen"), net.frozen);
        for (name, p) in net.param_names(prefix).into_iter().zip(net.params()) {
            self.push_tensor(name, p.clone());
        }
    }

    pub fn network(&self, prefix: &str) -> Result<DenseNetwork> {
        let acts = self.meta(&format!("{prefix}.activations"))?;
        let layers = acts
            .split(',')
            .enumerate()
            .map(|(i, tag)| {
                let act = tag
                    .parse::<u8>()
                    .ok()
                    .and_then(Activation::from_tag)
                    .ok_or_else(|| Error::Integrity(format!("bad activation tag `{tag}`")))?;
                Layer::new(
                    self.tensor(&format!("{prefix}.{i}.weight"))?.clone(),
                    self.tensor(&format!("{prefix}.{i}.bias"))?.clone(),
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = DenseNetwork::from_layers(layers)?;
        net.frozen = self.meta_parse(&format!("{prefix}.frozen"))?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.version, self.tag.to_byte()];
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.selector {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                put_u32(&mut out, s.capacity);
                put_u32(&mut out, s.generators);
                put_u32(&mut out, s.window.len());
                for row in &s.window {
                    for v in row {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                for v in &s.probabilities {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(s.sealed as u8);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Format {
                offset: 0,
                message: "empty checkpoint".into(),
            });
        }
        if bytes[0] != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: bytes[0],
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 34 {
            return Err(Error::Format {
                offset: bytes.len(),
                message: "checkpoint shorter than header plus digest".into(),
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("content hash mismatch".into()));
        }

        let mut r = Reader { bytes: body, pos: 1 };
        let tag_byte = r.u8()?;
        let tag = ComponentTag::from_byte(tag_byte).ok_or_else(|| Error::Format {
            offset: 1,
            message: format!("unknown component tag {tag_byte}"),
        })?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors.min(1 << 16));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let selector = match r.u8()? {
            0 => None,
            1 => {
                let capacity = r.u32()?;
                let generators = r.u32()?;
                let rows = r.u32()?;
                let window = (0..rows)
                    .map(|_| (0..generators).map(|_| r.f64()).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let probabilities = (0..generators).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let sealed = r.u8()? != 0;
                Some(SelectorSnapshot {
                    capacity,
                    generators,
                    window,
                    probabilities,
                    sealed,
                })
            }
            other => {
                return Err(Error::Format {
                    offset: r.pos - 1,
                    message: format!("bad selector flag {other}"),
                })
            }
        };
        if r.pos != body.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", body.len() - r.pos),
            });
        }
        Ok(Self {
            version: bytes[0],
            tag,
            metadata,
            tensors,
            selector,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "string is not utf-8".into(),
        })
    }
}
