//! Binary checkpoints: magic, JSON metadata, then named little-endian f64
//! tensors in name order. Save -> load -> save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::error::{Result, TdmError};
use crate::model::{Detector, FeatureKind};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"TDMCKPT\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum CheckpointMeta {
    Detector { arch: ArchConfig, kind: FeatureKind },
    Classifier { arch: ArchConfig, num_classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len());
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rank());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let n = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?).map_err(|e| r.err(&e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| r.err("parameter name is not UTF-8"))?.to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as Real)
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| TdmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| TdmError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_detector(det: &Detector) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta::Detector {
                arch: det.arch.clone(),
                kind: det.kind.clone(),
            },
            params: det.params.clone(),
        }
    }

    pub fn into_detector(self) -> Result<Detector> {
        match self.meta {
            CheckpointMeta::Detector { arch, kind } => Ok(Detector {
                arch,
                kind,
                params: self.params,
            }),
            CheckpointMeta::Classifier { .. } => Err(TdmError::Invalid(
                "expected a detection checkpoint, found a classification checkpoint".into(),
            )),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, m: &str) -> TdmError {
        TdmError::Parse {
            path: self.path.to_string(),
            line: 0,
            column: self.pos,
            message: m.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
