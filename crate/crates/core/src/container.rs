//! Binary tensor files and tagged tensor archives.
//!
//! A tensor block is `"LFFT"`, a little-endian `u32` format version, four
//! `u64` extents `(n, c, h, w)` and then the values as little-endian `f64`.
//!
//! An archive is `"LFFC"` + `u32` version, a metadata section
//! (`u32` count, then length-prefixed key/value UTF-8 pairs), the tensor
//! records (`u32` tag length, tag, tensor block) and finally an index footer:
//! `u64` count, per record the tag and its `u64` byte offset, then the `u64`
//! offset of the index itself and the closing magic `"LFFI"`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"LFFT";
pub const TENSOR_VERSION: u32 = 1;
pub const ARCHIVE_MAGIC: &[u8; 4] = b"LFFC";
pub const ARCHIVE_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 4] = b"LFFI";

fn bad(message: impl Into<String>) -> Error {
    Error::parse(None, message)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    for d in t.shape().dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 32 + t.len() * 8);
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated input: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8, _>(r)?))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic = read_exact::<4, _>(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = usize::try_from(read_u64(r)?).map_err(|_| bad("tensor extent overflows usize"))?;
    }
    let shape = Shape::from(dims);
    shape.validate()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("tensor size overflows"))?;
    let mut raw = vec![0u8; numel.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?];
    r.read_exact(&mut raw)
        .map_err(|e| bad(format!("truncated tensor data: {e}")))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    let t = read_tensor(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes after tensor", bytes.len())));
    }
    Ok(t)
}

/// Ordered collection of tagged tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if r.len() < len {
        return Err(bad("truncated string"));
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    String::from_utf8(head.to_vec()).map_err(|_| bad("string is not UTF-8"))
}

impl TensorArchive {
    pub fn get(&self, tag: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(t, _)| t == tag).map(|(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        let mut index = Vec::with_capacity(self.tensors.len());
        for (tag, t) in &self.tensors {
            index.push((tag.as_str(), out.len() as u64));
            write_str(&mut out, tag);
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        let index_offset = out.len() as u64;
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        for (tag, offset) in index {
            write_str(&mut out, tag);
            out.extend_from_slice(&offset.to_le_bytes());
        }
        out.extend_from_slice(&index_offset.to_le_bytes());
        out.extend_from_slice(INDEX_MAGIC);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = read_exact::<4, _>(&mut r)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad(format!("bad archive magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        if bytes.len() < 12 || &bytes[bytes.len() - 4..] != INDEX_MAGIC {
            return Err(bad("missing archive index footer"));
        }
        let index_offset = u64::from_le_bytes(bytes[bytes.len() - 12..bytes.len() - 4].try_into().unwrap()) as usize;
        if index_offset > bytes.len() - 12 {
            return Err(bad("archive index offset out of range"));
        }

        let mut metadata = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            metadata.insert(k, v);
        }

        let mut idx = &bytes[index_offset..bytes.len() - 12];
        let count = read_u64(&mut idx)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let tag = read_str(&mut idx)?;
            let offset = read_u64(&mut idx)? as usize;
            if offset >= index_offset {
                return Err(bad(format!("record '{tag}' offset out of range")));
            }
            let mut rec = &bytes[offset..index_offset];
            let stored = read_str(&mut rec)?;
            if stored != tag {
                return Err(bad(format!("index tag '{tag}' does not match record '{stored}'")));
            }
            tensors.push((tag, read_tensor(&mut rec)?));
        }
        if !idx.is_empty() {
            return Err(bad("trailing bytes in archive index"));
        }
        Ok(Self { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_exact() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.5]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[0..4], b"LFFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[40..48].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 56);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let t = Tensor::filled([1, 2, 2, 2], 3.0);
        let mut b = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&b[..b.len() - 1]).is_err());
        b[4] = 9;
        assert!(matches!(tensor_from_bytes(&b), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn archive_roundtrip_and_stable_bytes() {
        let mut a = TensorArchive::default();
        a.metadata.insert("iteration".into(), "12".into());
        a.tensors.push(("w".into(), Tensor::filled([1, 2, 3, 1], 0.25)));
        a.tensors.push(("b".into(), Tensor::filled([1, 1, 1, 4], -1.0)));
        let bytes = a.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("b").unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_bit_exact(
            dims in (1usize..3, 0usize..4, 1usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let shape = Shape::new(dims.0, dims.1, dims.2, dims.3);
            let data: Vec<f64> = (0..shape.numel())
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 2))
                .collect();
            let t = Tensor::from_vec(shape, data).unwrap();
            let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
