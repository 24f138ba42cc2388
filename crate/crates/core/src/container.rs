//! Binary container for datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TAKD" | version u16 | record count u32 |
//!   per record: name len u16 | name (UTF-8) | dtype u8 | ndim u8 |
//!               dims u32 × ndim | payload | crc32(payload) u32
//! ```
//!
//! Dtype tags: 0 = f64, 1 = f32, 2 = i64. Writing is append-order
//! deterministic, so identical inputs produce bit-identical files. Reading
//! is strict: wrong magic, unsupported version, malformed names, bad dtype
//! tags, truncation, checksum mismatches and trailing bytes are all
//! rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TAKD";
pub const VERSION: u16 = 1;

/// CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    const TABLE: [u32; 256] = {
        let mut table = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut k = 0;
            while k < 8 {
                c = if c & 1 != 0 {
                    0xEDB8_8320 ^ (c >> 1)
                } else {
                    c >> 1
                };
                k += 1;
            }
            table[i] = c;
            i += 1;
        }
        table
    };
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Typed payload of one record.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::F32(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }

    fn elem_size(tag: u8) -> Option<usize> {
        match tag {
            0 | 2 => Some(8),
            1 => Some(4),
            _ => None,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(tag: u8, bytes: &[u8]) -> Option<Self> {
        match tag {
            0 => Some(ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            1 => Some(ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            2 => Some(ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            _ => None,
        }
    }
}

/// One named n-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

/// Ordered collection of records; order is part of the byte format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub records: Vec<Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "{name} dims");
        self.records.push(Record {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: ArrayData::F64(data),
        });
    }

    pub fn push_i64(&mut self, name: &str, dims: &[usize], data: Vec<i64>) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "{name} dims");
        self.records.push(Record {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: ArrayData::I64(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Record names in storage order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    /// Fetches a required f64 record.
    pub fn f64_record(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Record {
                dims,
                data: ArrayData::F64(v),
                ..
            }) => Ok((dims, v)),
            Some(_) => Err(Error::BadContainer(format!("record {name} is not f64"))),
            None => Err(Error::MissingRecord(name.to_string())),
        }
    }

    /// Fetches a required i64 scalar record.
    pub fn i64_scalar(&self, name: &str) -> Result<i64> {
        match self.get(name) {
            Some(Record {
                data: ArrayData::I64(v),
                ..
            }) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(Error::BadContainer(format!(
                "record {name} is not a single i64"
            ))),
            None => Err(Error::MissingRecord(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            assert!(name.len() <= u16::MAX as usize, "record name too long");
            assert!(r.dims.len() <= u8::MAX as usize, "too many dims");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.data.dtype_tag());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let payload = r.data.to_le_bytes();
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32(&payload).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::BadContainer(format!(
                    "truncated at byte {} (needed {} more)",
                    *off, n
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };

        if take(&mut off, 4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());

        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::BadContainer("record name is not UTF-8".into()))?;
            let dtype = take(&mut off, 1)?[0];
            let elem = ArrayData::elem_size(dtype)
                .ok_or_else(|| Error::BadContainer(format!("unknown dtype tag {dtype}")))?;
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let n_elems: usize = dims.iter().product();
            let payload = take(&mut off, n_elems * elem)?;
            let stored = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
            if crc32(payload) != stored {
                return Err(Error::ChecksumMismatch { name });
            }
            let data = ArrayData::from_le_bytes(dtype, payload).expect("dtype checked");
            records.push(Record { name, dims, data });
        }
        if off != bytes.len() {
            return Err(Error::BadContainer(format!(
                "{} trailing bytes after last record",
                bytes.len() - off
            )));
        }
        Ok(Self { records })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_check_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn roundtrip_all_dtypes() {
        let mut c = Container::new();
        c.push_f64("alpha", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e300, -1e-300]);
        c.records.push(Record {
            name: "beta".into(),
            dims: vec![4],
            data: ArrayData::F32(vec![1.0, 2.0, -0.5, 3.25]),
        });
        c.push_i64("gamma", &[1], vec![-42]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_container_roundtrips() {
        let c = Container::new();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), 10);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn writing_is_bit_deterministic() {
        let build = || {
            let mut c = Container::new();
            c.push_f64("x", &[3], vec![0.1, 0.2, 0.3]);
            c.push_i64("n", &[1], vec![7]);
            c.to_bytes()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let mut c = Container::new();
        c.push_f64("x", &[2], vec![1.0, 2.0]);
        let mut bytes = c.to_bytes();
        // Flip a byte inside the payload (header is 10 + 2+1 name + 1 dtype
        // + 1 ndim + 4 dims = 19 bytes).
        bytes[22] ^= 0xFF;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::ChecksumMismatch { name }) if name == "x"
        ));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let mut c = Container::new();
        c.push_f64("x", &[2], vec![1.0, 2.0]);
        let good = c.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bad_magic),
            Err(Error::BadMagic)
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bad_version),
            Err(Error::BadVersion(9))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            Container::from_bytes(truncated),
            Err(Error::BadContainer(_))
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            Container::from_bytes(&trailing),
            Err(Error::BadContainer(_))
        ));
    }

    #[test]
    fn missing_record_is_reported_by_name() {
        let c = Container::new();
        assert!(matches!(
            c.f64_record("absent"),
            Err(Error::MissingRecord(n)) if n == "absent"
        ));
    }
}
