//! `DKD1` checkpoint files.
//!
//! ```text
//! offset 0   "DKD1"
//! offset 4   u64 LE: header length H
//! offset 12  H bytes of UTF-8 JSON header
//!            zero bytes up to the next multiple of 64
//! payload    f32 LE tensors in index order, each starting at a multiple
//!            of 64 from the payload start, zero-filled gaps, no trailing
//!            padding after the last tensor
//! ```
//!
//! Header fields: `format_version`, `encoder`, `distill`,
//! `train_config_digest`, `log_digest`, `frozen`, and `tensors`, a list of
//! `{name, dtype, shape, offset, length}` sorted by name with offsets and
//! lengths in bytes relative to the payload start. The JSON is written
//! compactly with fields in that order, so saving a loaded checkpoint
//! reproduces the original bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lwkd_core::distill::DistillSpec;
use lwkd_core::{Encoder, EncoderConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DKD1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub distill: Option<DistillSpec>,
    pub train_config_digest: Option<String>,
    pub log_digest: Option<String>,
    pub frozen: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: Encoder<f32>,
    pub distill: Option<DistillSpec>,
    pub train_config_digest: Option<String>,
    pub log_digest: Option<String>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn new(encoder: Encoder<f32>) -> Self {
        Self {
            encoder,
            distill: None,
            train_config_digest: None,
            log_digest: None,
        }
    }

    pub fn header(&self) -> Header {
        let mut offset = 0usize;
        let tensors = self
            .encoder
            .params()
            .iter()
            .map(|(name, t)| {
                offset = align_up(offset);
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    length: (t.len() * 4) as u64,
                };
                offset += t.len() * 4;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            encoder: self.encoder.config().clone(),
            distill: self.distill.clone(),
            train_config_digest: self.train_config_digest.clone(),
            log_digest: self.log_digest.clone(),
            frozen: self.encoder.is_frozen(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let json = serde_json::to_vec(&header).map_err(Error::json("checkpoint header"))?;
        let payload_start = align_up(PREAMBLE + json.len());
        let payload_len = header
            .tensors
            .last()
            .map_or(0, |e| (e.offset + e.length) as usize);
        let mut out = Vec::with_capacity(payload_start + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (e, t) in header.tensors.iter().zip(self.encoder.params().values()) {
            out.resize(payload_start + e.offset as usize, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            let got = bytes.get(..4).map(String::from_utf8_lossy).unwrap_or_default();
            return Err(Error::Format(format!("expected magic \"DKD1\", found {got:?}")));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(PREAMBLE..PREAMBLE.saturating_add(hlen))
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let value: serde_json::Value = serde_json::from_slice(json).map_err(Error::json("checkpoint header"))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("header has no format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found,
                supported: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(value).map_err(Error::json("checkpoint header"))?;
        let payload_start = align_up(PREAMBLE + hlen);
        let payload = bytes.get(payload_start..).unwrap_or(&[]);

        let mut params = BTreeMap::new();
        let mut end = 0u64;
        for e in &header.tensors {
            let bad = |detail: String| Error::Integrity {
                tensor: e.name.clone(),
                detail,
            };
            if e.dtype != "f32" {
                return Err(bad(format!("unsupported dtype {:?}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.length != (n * 4) as u64 {
                return Err(bad(format!("length {} does not match shape {:?}", e.length, e.shape)));
            }
            if e.offset % ALIGN as u64 != 0 || e.offset < end {
                return Err(bad(format!("offset {} is misaligned or overlaps the previous tensor", e.offset)));
            }
            let stop = e.offset.checked_add(e.length).filter(|&s| s <= payload.len() as u64);
            let Some(stop) = stop else {
                return Err(bad(format!(
                    "bytes {}..{} lie outside the {}-byte payload (file truncated?)",
                    e.offset,
                    e.offset + e.length,
                    payload.len()
                )));
            };
            let data = payload[e.offset as usize..stop as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            end = stop;
        }
        if end != payload.len() as u64 {
            let last = header.tensors.last().map_or("<none>".to_string(), |e| e.name.clone());
            return Err(Error::Integrity {
                tensor: last,
                detail: format!("{} unexpected bytes after the last tensor", payload.len() as u64 - end),
            });
        }
        let mut encoder = Encoder::from_params(header.encoder, params)?;
        encoder.set_frozen(header.frozen);
        Ok(Self {
            encoder,
            distill: header.distill,
            train_config_digest: header.train_config_digest,
            log_digest: header.log_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}
