//! The DUOC checkpoint container: a config snapshot plus named tensors for
//! every component (base predictor + in-band denoiser, autoencoder, latent
//! denoiser), optimizer moments, and the epoch counter.
//!
//! Layout: magic "DUOC" | version u16 | config block (u32 length, UTF-8) |
//! tensor records: name length u16, name bytes, rank u8, dims u32 each,
//! payload of little-endian f32. Integers little-endian throughout.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::ParamSet;
use crate::optim::Adam;

const DUOC_MAGIC: &[u8; 4] = b"DUOC";
const DUOC_VERSION: u16 = 1;

/// In-memory image of a checkpoint file. Tensor order is the file order, so
/// an immediate re-save is byte-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn new(config: RunConfig) -> Self {
        Checkpoint {
            config,
            tensors: Vec::new(),
        }
    }

    /// Adds every tensor of a component set under `prefix.name`.
    pub fn push_component(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for (_, t) in params.iter() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}.{}", t.name),
                dims: t.dims.clone(),
                values: t.values.clone(),
            });
        }
    }

    /// Adds an optimizer's moment buffers as `opt.m.prefix.name` and
    /// `opt.v.prefix.name`, plus its step counter.
    pub fn push_optimizer(&mut self, prefix: &str, params: &ParamSet<f32>, opt: &Adam<f32>) {
        let (m, v) = opt.moments();
        for ((_, t), (mb, vb)) in params.iter().zip(m.iter().zip(v.iter())) {
            self.tensors.push(NamedTensor {
                name: format!("opt.m.{prefix}.{}", t.name),
                dims: t.dims.clone(),
                values: mb.clone(),
            });
            self.tensors.push(NamedTensor {
                name: format!("opt.v.{prefix}.{}", t.name),
                dims: t.dims.clone(),
                values: vb.clone(),
            });
        }
        self.tensors.push(NamedTensor {
            name: format!("opt.step.{prefix}"),
            dims: vec![1],
            values: vec![opt.step_count() as f32],
        });
    }

    pub fn push_counter(&mut self, name: &str, value: u64) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            dims: vec![1],
            values: vec![value as f32],
        });
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.find(name).map(|t| t.values[0] as u64)
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Restores a component set registered under `prefix`; tensor shapes
    /// must match the freshly initialized set.
    pub fn restore_component(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = format!("{prefix}.{}", params.get(id).name);
            let stored = self
                .find(&name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks tensor '{name}'")))?;
            if stored.dims != params.get(id).dims {
                return Err(Error::config(format!(
                    "checkpoint tensor '{name}' has dims {:?}, expected {:?}",
                    stored.dims,
                    params.get(id).dims
                )));
            }
            params.get_mut(id).values = stored.values.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DUOC_MAGIC);
        buf.extend_from_slice(&DUOC_VERSION.to_le_bytes());
        let config_text = self.config.to_text();
        buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_text.as_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
                return Err(Error::format(0, format!("tensor '{}' overflows the record header", t.name)));
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                if d > u32::MAX as usize {
                    return Err(Error::format(0, format!("tensor '{}' dim overflow", t.name)));
                }
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            debug_assert_eq!(t.dims.iter().product::<usize>(), t.values.len());
            for &v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("truncated checkpoint: needed {n} bytes at offset {off}"),
                ));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };

        if take(&mut off, 4)? != DUOC_MAGIC {
            return Err(Error::format(0, "bad magic, expected DUOC"));
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != DUOC_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let cfg_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let cfg_off = off as u64;
        let cfg_text = std::str::from_utf8(take(&mut off, cfg_len)?)
            .map_err(|_| Error::format(cfg_off, "config block is not UTF-8"))?
            .to_string();
        let mut config = RunConfig::default();
        config
            .apply_text(&cfg_text)
            .map_err(|e| Error::format(cfg_off, format!("config block: {e}")))?;

        let mut tensors = Vec::new();
        while off < bytes.len() {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name_off = off as u64;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|_| Error::format(name_off, "tensor name is not UTF-8"))?
                .to_string();
            let rank = take(&mut off, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let payload = take(&mut off, len * 4)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        Ok(Checkpoint { config, tensors })
    }
}
