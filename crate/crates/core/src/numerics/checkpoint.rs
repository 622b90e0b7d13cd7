//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MLWACKPT"
//! version  u32      1
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), rank u8, dims u64 × rank,
//!          bits u8 (32 | 64), trainable u8, values (bits/8 × numel)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MLWACKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * (T::BITS as usize / 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::BITS);
        out.push(tensor.requires_grad as u8);
        for &x in tensor.data() {
            x.write_le(&mut out);
        }
    }
    out
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if the widths
/// differ.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bits = r.u8()?;
        let trainable = r.u8()? != 0;
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match bits {
            32 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            64 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
            other => return Err(Error::Checkpoint(format!("{name}: bad width flag {other}"))),
        };
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = trainable;
        store.insert(name, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..20), frozen in any::<bool>()) {
            let mut store = ParamStore::new();
            let mut t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            t.requires_grad = !frozen;
            store.insert("a.b", t).unwrap();
            store.insert("m", Tensor::new(vec![1, 1], vec![values[0]]).unwrap()).unwrap();
            let back: ParamStore<f64> = decode(&encode(&store)).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn header_is_checked() {
        let mut bytes = encode(&ParamStore::<f32>::new());
        assert_eq!(&bytes[..8], MAGIC);
        assert!(decode::<f32>(&bytes).unwrap().is_empty());
        bytes[8] = 9;
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f32>(b"nope").is_err());
    }

    #[test]
    fn widths_convert_on_load() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![2], vec![0.5f32, -2.0]).unwrap())
            .unwrap();
        let bytes = encode(&store);
        // 8 magic + 4 version + 4 count + 4 len + 1 name + 1 rank + 8 dim
        assert_eq!(bytes[30], 32);
        let wide: ParamStore<f64> = decode(&bytes).unwrap();
        assert_eq!(wide.by_name("w").unwrap().data(), &[0.5, -2.0]);
    }
}
