//! Checkpoints: a text manifest followed by a little-endian `f32` blob.
//!
//! ```text
//! VLAD-CHECKPOINT
//! version 1
//! config_hash <sha256 of the config text>
//! config <key> = <value>          (one line per config key)
//! optim_step <n>                  (only with optimizer state)
//! tensor <name> <d0>x<d1>.. <offset> <bytes>
//! blob_bytes <n>
//! end
//! <blob>
//! ```
//! Adam moments are stored as tensors named `adam.m:<param>` / `adam.v:<param>`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Vlad;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const HEADER: &str = "VLAD-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("bad manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config hash mismatch: manifest says {stored}, config hashes to {computed}")]
    Hash { stored: String, computed: String },
    #[error("parameter {name}: stored shape {stored:?}, model expects {expected:?}")]
    Shape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint holds unknown parameter {0}")]
    Unexpected(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Named parameters in model order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimState>,
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, store: &ParamStore, optim: Option<OptimState>) -> Self {
        Checkpoint {
            config: config.clone(),
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            optim,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(o) = &self.optim {
            for ((name, _), m) in self.params.iter().zip(&o.m) {
                tensors.push((format!("adam.m:{name}"), m));
            }
            for ((name, _), v) in self.params.iter().zip(&o.v) {
                tensors.push((format!("adam.v:{name}"), v));
            }
        }
        let mut man = String::new();
        let _ = writeln!(man, "{HEADER}");
        let _ = writeln!(man, "version {FORMAT_VERSION}");
        let _ = writeln!(man, "config_hash {}", self.config.hash());
        for line in self.config.to_text().lines() {
            let _ = writeln!(man, "config {line}");
        }
        if let Some(o) = &self.optim {
            let _ = writeln!(man, "optim_step {}", o.step);
        }
        let mut offset = 0usize;
        for (name, t) in &tensors {
            let bytes = t.len() * 4;
            let _ = writeln!(man, "tensor {name} {} {offset} {bytes}", shape_text(t.shape()));
            offset += bytes;
        }
        let _ = writeln!(man, "blob_bytes {offset}");
        let _ = writeln!(man, "end");
        let mut out = man.into_bytes();
        out.reserve(offset);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let end_marker = b"\nend\n";
        let split = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| CheckpointError::Corrupt("manifest terminator not found".into()))?;
        let manifest = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| CheckpointError::Corrupt("manifest is not UTF-8".into()))?;
        let blob = &bytes[split + end_marker.len()..];

        let bad = |line: usize, detail: &str| CheckpointError::Manifest {
            line,
            detail: detail.to_string(),
        };
        let mut lines = manifest.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(CheckpointError::Corrupt("missing checkpoint header".into()).into()),
        }
        let mut config_text = String::new();
        let mut stored_hash = None;
        let mut version = None;
        let mut optim_step = None;
        let mut blob_bytes = None;
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for (no, line) in lines {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(no, "expected `<tag> <value>`"))?;
            match tag {
                "version" => {
                    let v: u32 = rest.parse().map_err(|_| bad(no, "bad version"))?;
                    if v != FORMAT_VERSION {
                        return Err(CheckpointError::Version(v).into());
                    }
                    version = Some(v);
                }
                "config_hash" => stored_hash = Some(rest.to_string()),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "optim_step" => optim_step = Some(rest.parse::<u64>().map_err(|_| bad(no, "bad optim_step"))?),
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(no, "expected `tensor <name> <shape> <offset> <bytes>`").into());
                    }
                    let shape: Vec<usize> = f[1]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(no, "bad shape"))?;
                    let offset: usize = f[2].parse().map_err(|_| bad(no, "bad offset"))?;
                    let len: usize = f[3].parse().map_err(|_| bad(no, "bad byte count"))?;
                    if shape.contains(&0) || shape.iter().product::<usize>() * 4 != len {
                        return Err(bad(no, "shape disagrees with byte count").into());
                    }
                    entries.push((f[0].to_string(), shape, offset, len));
                }
                "blob_bytes" => blob_bytes = Some(rest.parse::<usize>().map_err(|_| bad(no, "bad blob_bytes"))?),
                _ => return Err(bad(no, "unknown tag").into()),
            }
        }
        if version.is_none() {
            return Err(CheckpointError::Corrupt("missing version".into()).into());
        }
        let blob_bytes = blob_bytes.ok_or_else(|| CheckpointError::Corrupt("missing blob_bytes".into()))?;
        if blob.len() != blob_bytes {
            return Err(CheckpointError::Corrupt(format!("blob holds {} bytes, manifest says {blob_bytes}", blob.len())).into());
        }
        let config = RunConfig::parse(&config_text)?;
        let computed = config.hash();
        let stored = stored_hash.ok_or_else(|| CheckpointError::Corrupt("missing config_hash".into()))?;
        if stored != computed {
            return Err(CheckpointError::Hash { stored, computed }.into());
        }

        let mut expected_offset = 0;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape, offset, len) in entries {
            if offset != expected_offset || offset + len > blob.len() {
                return Err(CheckpointError::Corrupt(format!("tensor {name} at bad offset {offset}")).into());
            }
            expected_offset += len;
            let data: Vec<f32> = blob[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix("adam.m:") {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.v:") {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if expected_offset != blob.len() {
            return Err(CheckpointError::Corrupt("blob has unclaimed bytes".into()).into());
        }
        let optim = match optim_step {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Corrupt("moments without optim_step".into()).into()),
            Some(step) => {
                let names_match = |xs: &[(String, Tensor<f32>)]| {
                    xs.len() == params.len() && xs.iter().zip(&params).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape())
                };
                if !names_match(&m) || !names_match(&v) {
                    return Err(CheckpointError::Corrupt("optimizer moments do not mirror parameters".into()).into());
                }
                Some(OptimState {
                    step,
                    m: m.into_iter().map(|x| x.1).collect(),
                    v: v.into_iter().map(|x| x.1).collect(),
                })
            }
        };
        Ok(Checkpoint { config, params, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model from the stored config and fills in every parameter.
    pub fn restore(&self) -> Result<(Vlad, ParamStore)> {
        let (model, mut store) = Vlad::build(&self.config);
        load_into(&mut store, &self.params, true)?;
        Ok((model, store))
    }
}

/// Copies named tensors into `store`. With `strict`, names must match exactly;
/// otherwise parameters absent from `params` keep their values and extra
/// entries are ignored.
pub fn load_into(store: &mut ParamStore, params: &[(String, Tensor<f32>)], strict: bool) -> Result<()> {
    for (name, t) in params {
        match store.index_of(name) {
            Some(id) => {
                let expected = store.value(id).shape().to_vec();
                if t.shape() != expected {
                    return Err(CheckpointError::Shape {
                        name: name.clone(),
                        stored: t.shape().to_vec(),
                        expected,
                    }
                    .into());
                }
                *store.value_mut(id) = t.clone();
            }
            None if strict => return Err(CheckpointError::Unexpected(name.clone()).into()),
            None => {}
        }
    }
    if strict {
        if let Some(p) = store.iter().find(|p| !params.iter().any(|(n, _)| *n == p.name)) {
            return Err(CheckpointError::Missing(p.name.clone()).into());
        }
    }
    Ok(())
}
