//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "HCONTACT"
//! version   u32
//! meta_len  u32, then meta_len bytes of JSON (the HeadConfig)
//! count     u32
//! count × { name_len u32, name utf-8, ndims u32, dims u64×ndims, data f64×numel }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{ContactModel, HeadConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HCONTACT";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::Checkpoint(format!("{what} too large ({len})")))
}

pub fn encode(model: &ContactModel) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 8 * model.store().num_values());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let meta = serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, len_u32(meta.len(), "metadata")?);
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, len_u32(model.store().len(), "tensor count")?);
    for (_, p) in model.store().iter() {
        let name = p.name().as_bytes();
        put_u32(&mut buf, len_u32(name.len(), "tensor name")?);
        buf.extend_from_slice(name);
        let t = p.value();
        put_u32(&mut buf, len_u32(t.ndim(), "rank")?);
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(path: &Path, model: &ContactModel) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("file truncated while reading {context}"))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: HeadConfig,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let config: HeadConfig = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32(&format!("name of tensor #{i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor #{i}"))?)
            .map_err(|_| Error::Checkpoint(format!("tensor #{i} has a non-UTF-8 name")))?
            .to_string();
        let ctx = format!("tensor `{name}`");
        let ndims = r.u32(&ctx)? as usize;
        let shape = (0..ndims)
            .map(|_| r.u64(&ctx).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Checkpoint(format!("{ctx}: shape overflows")))?;
        let bytes = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{ctx}: shape overflows")))?,
            &ctx,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{ctx}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, tensors })
}

/// Copies the checkpoint's tensors into `model`. Every model parameter must
/// be present with the same shape; tensors the model lacks are ignored.
pub fn load_into(ckpt: &Checkpoint, model: &mut ContactModel) -> Result<()> {
    let store = model.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name().to_string();
        let (_, t) = ckpt
            .tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let p = store.get_mut(id);
        if p.value().shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        *p.value_mut() = t.clone();
    }
    for (name, _) in &ckpt.tensors {
        if store.id(name).is_none() {
            log::info!("checkpoint tensor `{name}` not used by this model");
        }
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Rebuilds the model described by the checkpoint metadata.
pub fn load(path: &Path) -> Result<ContactModel> {
    let ckpt = read(path)?;
    let mut model = ContactModel::new(ckpt.config.clone())?;
    load_into(&ckpt, &mut model)?;
    Ok(model)
}
