//! Versioned binary container shared by backbone files, adapter files,
//! datasets and round messages.
//!
//! Layout (all integers and doubles little-endian):
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `b"FMMA"`                              |
//! | 4      | 2    | format version (`1`)                         |
//! | 6      | 1    | kind (see [`Kind`])                          |
//! | 7      | 1    | flags; bit 0 = SHA-256 trailer present       |
//! | 8      | 4    | `meta_len`, bytes of kind-specific metadata  |
//! | 12     | 8    | `value_count`, number of f64 values          |
//! | 20     | ...  | metadata, then `value_count * 8` value bytes |
//! | end    | 32   | optional SHA-256 of every preceding byte     |

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FMMA";
pub const VERSION: u16 = 1;
pub const FIXED_HEADER_BYTES: usize = 20;
const FLAG_DIGEST: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Backbone = 0,
    AdapterFull = 1,
    AdapterShared = 2,
    Dataset = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::Backbone,
            1 => Kind::AdapterFull,
            2 => Kind::AdapterShared,
            3 => Kind::Dataset,
            other => return Err(Error::Format(format!("unknown container kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: Vec<u8>,
    pub values: Vec<f64>,
}

impl Container {
    pub fn encoded_len(&self, with_digest: bool) -> usize {
        FIXED_HEADER_BYTES + self.meta.len() + self.values.len() * 8 + if with_digest { 32 } else { 0 }
    }

    pub fn encode(&self, with_digest: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len(with_digest));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(if with_digest { FLAG_DIGEST } else { 0 });
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.meta);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if with_digest {
            let d = Sha256::digest(&out);
            out.extend_from_slice(&d);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_HEADER_BYTES {
            return Err(Error::Format(format!("container truncated at {} bytes", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = Kind::from_u8(bytes[6])?;
        let flags = bytes[7];
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_end = FIXED_HEADER_BYTES + meta_len + count * 8;
        let expected = body_end + if flags & FLAG_DIGEST != 0 { 32 } else { 0 };
        if bytes.len() != expected {
            return Err(Error::Format(format!("container length {} does not match header ({expected})", bytes.len())));
        }
        if flags & FLAG_DIGEST != 0 {
            let d = Sha256::digest(&bytes[..body_end]);
            if d.as_slice() != &bytes[body_end..] {
                return Err(Error::Format("content digest mismatch".into()));
            }
        }
        let meta = bytes[FIXED_HEADER_BYTES..FIXED_HEADER_BYTES + meta_len].to_vec();
        let values = bytes[FIXED_HEADER_BYTES + meta_len..body_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { kind, meta, values })
    }
}

/// Little-endian metadata builder.
#[derive(Default)]
pub struct MetaWriter(Vec<u8>);

impl MetaWriter {
    pub fn new() -> Self {
        Self(Vec::new())
    }
    pub fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(mut self, v: f64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub struct MetaReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> MetaReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("metadata record truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..64), digest: bool, meta in proptest::collection::vec(any::<u8>(), 0..16)) {
            let c = Container { kind: Kind::AdapterFull, meta, values };
            let bytes = c.encode(digest);
            prop_assert_eq!(bytes.len(), c.encoded_len(digest));
            prop_assert_eq!(Container::decode(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn corruption_detected() {
        let c = Container { kind: Kind::Backbone, meta: vec![1, 2, 3], values: vec![1.5, -2.0] };
        let mut bytes = c.encode(true);
        bytes[FIXED_HEADER_BYTES + 4] ^= 0x40;
        assert!(matches!(Container::decode(&bytes), Err(Error::Format(_))));
        let mut bad_magic = c.encode(false);
        bad_magic[0] = b'X';
        assert!(Container::decode(&bad_magic).is_err());
    }
}
