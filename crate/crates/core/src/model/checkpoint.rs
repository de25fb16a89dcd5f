use std::fs;
use std::path::Path;

use super::{ForkNet, ForkNetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"FNCK";
pub const CKPT_VERSION: u32 = 1;

/// Writes the configuration and every parameter and buffer. The file is
/// written beside its destination and renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, net: &ForkNet<f32>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode(net)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ForkNet<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode(net: &ForkNet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    put_str(&mut out, &net.config().to_toml());
    for p in net.params.iter() {
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.bytes.len() as u64, format!("truncated {what} starting at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ForkNet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FNCK\""));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let config_at = r.pos as u64;
    let text = r.string("config blob")?;
    let config = ForkNetConfig::from_toml(&text).map_err(|e| Error::format(config_at, format!("config blob: {e}")))?;

    let mut blocks = Vec::new();
    while !r.done() {
        let name = r.string("block name")?;
        let rank = r.u32("block rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("block extents")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.push((name, shape, data));
    }

    let mut net = ForkNet::<f32>::new(config, 0)?;
    if blocks.len() > net.params.len() {
        let extra = blocks
            .iter()
            .find(|(name, _, _)| net.params.id(name).is_none())
            .map(|(n, _, _)| n.clone())
            .unwrap_or_default();
        return Err(Error::Checkpoint {
            block: extra,
            message: "not part of the configured model".into(),
        });
    }
    let mut seen = vec![false; net.params.len()];
    for (name, shape, data) in blocks {
        let id = net.params.id(&name).ok_or_else(|| Error::Checkpoint {
            block: name.clone(),
            message: "not part of the configured model".into(),
        })?;
        let p = net.params.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint {
                block: name,
                message: format!("stored shape {shape:?} but the config needs {:?}", p.value.shape()),
            });
        }
        p.value = Tensor::from_vec(&shape, data)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = net.params.iter().zip(&seen).find(|(_, &s)| !s) {
        return Err(Error::Checkpoint {
            block: missing.0.name.clone(),
            message: "missing".into(),
        });
    }
    Ok(net)
}
