//! Checkpoint files.
//!
//! Layout: 8-byte magic `CROCOCKP`, u64 LE header length, JSON header,
//! zero padding to a 64-byte boundary, then the little-endian f32 payload.
//! Every tensor starts at an absolute file offset that is a multiple of 64;
//! the header lists name, shape and offset of each.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CroCo, ModelConfig};
use crate::optim::{AdamWConfig, OptimState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CROCOCKP";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    optim: Option<OptimMeta>,
    /// Extra heads stored alongside the backbone (e.g. `"flow"`).
    heads: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: backbone config, named tensors, optional optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub optim: Option<OptimMeta>,
    pub heads: Vec<String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn from_model(model: &CroCo<f32>, optim: Option<&OptimState<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let mut meta = None;
        if let Some(st) = optim {
            for (k, (_, p)) in model.params.iter().enumerate() {
                tensors.push((format!("{M_PREFIX}{}", p.name), st.first[k].clone()));
                tensors.push((format!("{V_PREFIX}{}", p.name), st.second[k].clone()));
            }
            meta = Some(OptimMeta {
                config: st.config.clone(),
                step: st.step,
            });
        }
        Checkpoint {
            config: model.cfg().clone(),
            step: optim.map_or(0, |s| s.step),
            optim: meta,
            heads: Vec::new(),
            tensors,
        }
    }

    /// Appends a head's parameters under `"{head}."` names.
    pub fn add_head(&mut self, head: &str, params: &ParamSet<f32>) {
        self.heads.push(head.to_string());
        for (_, p) in params.iter() {
            self.tensors.push((format!("{head}.{}", p.name), p.value.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `params` by name (`prefix` + parameter name).
    pub fn fill_params(&self, params: &mut ParamSet<f32>, prefix: &str) -> Result<()> {
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let full = format!("{prefix}{name}");
            let t = self.get(&full).ok_or_else(|| Error::Checkpoint {
                name: full.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            params.set_value(id, t.clone()).map_err(|e| match e {
                Error::Checkpoint { detail, .. } => Error::Checkpoint {
                    name: full.clone(),
                    detail,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn restore_model(&self) -> Result<CroCo<f32>> {
        let mut model = CroCo::new(self.config.clone(), 0)?;
        self.fill_params(&mut model.params, "")?;
        Ok(model)
    }

    /// Restores a model after checking it against an expected configuration.
    pub fn restore_model_as(&self, expected: &ModelConfig) -> Result<CroCo<f32>> {
        if &self.config != expected {
            return Err(Error::Checkpoint {
                name: "<config>".into(),
                detail: format!(
                    "checkpoint config {:?} differs from requested {:?}",
                    self.config, expected
                ),
            });
        }
        self.restore_model()
    }

    pub fn restore_optim(&self, model: &CroCo<f32>) -> Result<Option<OptimState<f32>>> {
        let Some(meta) = &self.optim else {
            return Ok(None);
        };
        let mut st = OptimState::new(meta.config.clone(), &model.params);
        st.step = meta.step;
        for (k, (_, p)) in model.params.iter().enumerate() {
            for (prefix, dst) in [(M_PREFIX, &mut st.first[k]), (V_PREFIX, &mut st.second[k])] {
                let name = format!("{prefix}{}", p.name);
                let t = self.get(&name).ok_or_else(|| Error::Checkpoint {
                    name: name.clone(),
                    detail: "missing optimizer moment".into(),
                })?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint {
                        name,
                        detail: format!("shape {:?} does not match {:?}", t.shape(), p.value.shape()),
                    });
                }
                *dst = t.clone();
            }
        }
        Ok(Some(st))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        // offsets depend on the header length, which depends on the offsets;
        // iterate until the header size is stable
        let mut header_len = 0usize;
        loop {
            let mut offset = align(16 + header_len);
            let entries: Vec<TensorEntry> = self
                .tensors
                .iter()
                .map(|(name, t)| {
                    let e = TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        offset: offset as u64,
                    };
                    offset = align(offset + t.len() * 4);
                    e
                })
                .collect();
            let header = Header {
                version: VERSION,
                config: self.config.clone(),
                step: self.step,
                optim: self.optim.clone(),
                heads: self.heads.clone(),
                tensors: entries,
            };
            let json = serde_json::to_vec(&header)?;
            if json.len() != header_len {
                header_len = json.len();
                continue;
            }
            let mut out = Vec::with_capacity(offset);
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            for ((_, t), e) in self.tensors.iter().zip(&header.tensors) {
                out.resize(e.offset as usize, 0);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.resize(align(out.len()), 0);
            return Ok(out);
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic at byte 0)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format(format!("checkpoint header truncated at byte {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != VERSION {
            return Err(Error::Checkpoint {
                name: "<header>".into(),
                detail: format!("format version {} (expected {VERSION})", header.version),
            });
        }
        header.config.validate()?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if !start.is_multiple_of(ALIGN) {
                return Err(Error::Checkpoint {
                    name: e.name.clone(),
                    detail: format!("offset {start} is not {ALIGN}-byte aligned"),
                });
            }
            let raw = bytes.get(start..start + 4 * n).ok_or_else(|| Error::Checkpoint {
                name: e.name.clone(),
                detail: format!(
                    "payload [{start}, {}) past end of file ({} bytes)",
                    start + 4 * n,
                    bytes.len()
                ),
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            optim: header.optim,
            heads: header.heads,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
