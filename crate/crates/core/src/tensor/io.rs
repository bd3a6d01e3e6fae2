//! Named-tensor binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DVSM" | u32 version (=1) | u32 metadata length | metadata JSON (UTF-8)
//! repeated until EOF:
//!   u32 name length | name (UTF-8) | u8 rank | rank × u64 extents | f32 payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVSM";
pub const VERSION: u32 = 1;

/// Metadata plus named `f32` tensors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Array<f32>)>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Container {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(12 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, arr) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "tensor name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(arr.rank())
                .map_err(|_| Error::Format(format!("tensor {name} has rank {} > 255", arr.rank())))?;
            out.push(rank);
            for &e in arr.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in arr.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a DVSM container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Array::new(&shape, data)?));
        }
        Ok(Container { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} longer than u32::MAX")))
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
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let c = Container::new(serde_json::json!({"a": 1}));
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"DVSM");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]) as usize, b.len() - 12);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut c = Container::new(serde_json::json!({}));
        c.tensors.push(("w".into(), Array::from_f64(&[2], &[1.0, 2.0]).unwrap()));
        let mut b = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            tensors in prop::collection::vec(
                (
                    "[a-z.]{1,12}",
                    prop::collection::vec(1usize..4, 0..4),
                    any::<u32>(),
                ),
                0..5,
            )
        ) {
            let mut c = Container::new(serde_json::json!({"model": {"dim": 8}}));
            for (name, shape, seed) in tensors {
                let n: usize = shape.iter().product();
                // Arbitrary bit patterns, including NaN payloads and subnormals.
                let data: Vec<f32> = (0..n as u32).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i))).collect();
                c.tensors.push((name, Array::new(&shape, data).unwrap()));
            }
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.tensors.len(), c.tensors.len());
        }
    }
}
