//! Flat name → array checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SCCKPT\0\0"
//! version    u32      currently 1
//! meta_len   u32      length of the metadata block
//! meta       bytes    UTF-8 JSON (model kind, configuration, vocabularies)
//! count      u32      number of entries
//! entry*     name_len u32, name bytes, rank u32, rank × dim u64,
//!            data as IEEE-754 f64 bit patterns
//! ```
//!
//! Values are stored as raw bits, so a save/load round trip is bitwise exact.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::autodiff::{Array, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            params.insert(name, Array::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            rows in 1usize..4,
            cols in 1usize..5,
            seed in any::<u64>(),
            special in prop::sample::select(vec![0.0, -0.0, 1e-310, f64::MAX, -1.5]),
        ) {
            let mut params = ParamStore::new();
            let data: Vec<f64> = (0..rows * cols)
                .map(|k| f64::from_bits(seed.rotate_left(k as u32) >> 2))
                .collect();
            params.insert("w", Array::matrix(rows, cols, data).unwrap());
            params.insert("s", Array::scalar(special));
            let ck = Checkpoint { meta: serde_json::json!({"kind": "test", "n": rows}), params };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.meta, ck.meta.clone());
            for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
                prop_assert_eq!(a.shape(), b.shape());
                let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint {
            meta: Value::Null,
            params: ParamStore::new(),
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.truncate(10);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
