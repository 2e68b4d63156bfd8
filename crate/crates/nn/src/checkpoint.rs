//! Weight container: a little-endian binary file holding a JSON manifest
//! followed by named f32 parameter blobs.
//!
//! Layout: magic `TLCK`, u32 version, u32 manifest length, manifest bytes,
//! u32 blob count, then per blob: u32 name length, name, u8 trainable,
//! u32 rank, u64 extents, f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::{NnError, ParamStore, Result, Tensor};

const MAGIC: &[u8; 4] = b"TLCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, manifest: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let m = serde_json::to_vec(manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
    buf.extend_from_slice(&m);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.trainable as u8);
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = c.u32()? as usize;
    let manifest =
        serde_json::from_slice(c.take(mlen)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.add(name, Tensor::new(shape, values)?, trainable);
    }
    if c.pos != data.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { manifest, params })
}
