//! Binary checkpoint: `"FOVD"`, u32 version, length-prefixed JSON metadata,
//! then named f32 tensors. All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiT, DiTConfig};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tensor};
use crate::tokenizer::LatentNorm;

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"FOVD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: DiTConfig,
    pub norm: LatentNorm,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    /// Adam first/second moments, one per parameter, when saved for resuming.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DiT<f32>> {
        DiT::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn adam(&self, config: AdamConfig) -> Adam<f32> {
        let mut adam = Adam::new(config, &self.params);
        if let Some((m, v)) = &self.moments {
            adam.m = m.clone();
            adam.v = v.clone();
            adam.step = self.meta.step;
        }
        adam
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        if let Some((m, v)) = &self.moments {
            for (p, t) in self.params.iter().zip(m) {
                tensors.push((format!("adam.m.{}", p.name), t));
            }
            for (p, t) in self.params.iter().zip(v) {
                tensors.push((format!("adam.v.{}", p.name), t));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let json_len = read_u32(&mut r)? as usize;
        let json = take(&mut r, json_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(json)?;
        let count = read_u32(&mut r)? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            named.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, t) in named {
            if name.starts_with("adam.m.") {
                m.push(t);
            } else if name.starts_with("adam.v.") {
                v.push(t);
            } else {
                params.add(name, t);
            }
        }
        let moments = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(Error::Format("optimizer moments do not match parameters".into())),
        };
        let ck = Self { meta, params, moments };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
