//! Binary checkpoint: `MOHD`, u32 version, u64-prefixed JSON header, tensor table.
//!
//! Each tensor is stored as u32 name length, UTF-8 name, u32 rank, u64 dims
//! and little-endian f64 values. Optimizer moments are tensors named
//! `adam.m.<param>` and `adam.v.<param>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{MohdError, Result};
use crate::model::Model;
use crate::numerics::Tensor;

use super::data::DataState;
use super::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"MOHD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: usize,
    data: DataState,
    adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: usize,
    /// Data-stream position; with the config seed this fixes all remaining randomness.
    pub data: DataState,
    pub adam_t: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> MohdError {
    MohdError::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Model, opt: &AdamW, step: usize, data: DataState) -> Self {
        let store = &model.store;
        let mut tensors: Vec<(String, Tensor)> = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone().with_requires_grad(false)))
            .collect();
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for (id, mom) in store.ids().zip(moments) {
                let t = Tensor::new(store.get(id).shape(), mom.clone()).expect("moment matches parameter");
                tensors.push((format!("{prefix}{}", store.name(id)), t));
            }
        }
        Self {
            config: config.clone(),
            step,
            data,
            adam_t: opt.t,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; every parameter must be present with its configured shape.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.mohd(), self.config.train.seed).map_err(|e| bad(e.to_string()))?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = self.tensor(&name).ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.set(&name, t.data().to_vec())?;
        }
        Ok(model)
    }

    /// Optimizer state for `model`, restored from the stored moments.
    pub fn optimizer(&self, model: &Model) -> Result<AdamW> {
        let mut opt = AdamW::new(&model.store, &self.config.train);
        opt.t = self.adam_t;
        for (k, id) in model.store.ids().enumerate() {
            for (prefix, dst) in [("adam.m.", &mut opt.m[k]), ("adam.v.", &mut opt.v[k])] {
                let name = format!("{prefix}{}", model.store.name(id));
                let t = self.tensor(&name).ok_or_else(|| bad(format!("missing optimizer tensor `{name}`")))?;
                if t.numel() != dst.len() {
                    return Err(bad(format!("optimizer tensor `{name}` has the wrong size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(opt)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            data: self.data,
            adam_t: self.adam_t,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        if read_exact(&mut r, 4)? != MAGIC {
            return Err(bad("not a MOHD checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let header: Header =
            serde_json::from_slice(&read_exact(&mut r, len)?).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate().map_err(|e| bad(format!("stored config: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_exact(&mut r, name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_exact(&mut r, numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            data: header.data,
            adam_t: header.adam_t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MohdError::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| MohdError::io(path, e))?;
        self.write(std::io::BufWriter::new(file)).map_err(|e| MohdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| MohdError::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}
