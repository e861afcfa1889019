//! `MFCK` named-tensor container.
//!
//! Layout (little-endian): magic `MFCK`, `u16` version, then records of
//! `u32` name length, UTF-8 name, `u32` rank, `u64` × rank dims, `u8` dtype
//! tag and the raw elements. Records keep their insertion order, so writing
//! the same content twice yields identical bytes.

use std::path::Path;

use super::real::{DType, Real};
use super::tensor::{numel, Tensor};
use crate::binio::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Raw little-endian element bytes.
    bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &x in t.data() {
            x.extend_le_bytes(&mut bytes);
        }
        Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            bytes,
        }
    }

    /// Decodes the elements, converting to `T` if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::new(&self.shape, data).expect("record length validated on construction")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let rec = Record::from_tensor(name, t);
        match self.records.iter_mut().find(|r| r.name == rec.name) {
            Some(slot) => *slot = rec,
            None => self.records.push(rec),
        }
    }

    pub fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.find(name)
            .map(Record::to_tensor)
            .ok_or_else(|| Error::config(format!("checkpoint has no record `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(r.dtype as u8);
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = ByteReader::new(bytes, path);
        rd.magic(MAGIC)?;
        let version = rd.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version as u32,
                expected: VERSION as u32,
            });
        }
        let mut records = Vec::new();
        while !rd.is_empty() {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| rd.error("record name is not UTF-8"))?
                .to_string();
            let rank = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = rd.u64()?;
                shape.push(usize::try_from(d).map_err(|_| rd.error("dimension overflows usize"))?);
            }
            let tag = rd.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| rd.error(format!("unknown dtype tag {tag}")))?;
            let n = numel(&shape)
                .checked_mul(dtype.size())
                .ok_or_else(|| rd.error("record size overflows"))?;
            let data = rd.take(n)?.to_vec();
            records.push(Record {
                name,
                shape,
                dtype,
                bytes: data,
            });
        }
        Ok(Checkpoint { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put("a.weight", &Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        ck.put("b", &Tensor::<f32>::from_vec(vec![f32::MIN_POSITIVE, -0.0, 3.5]));
        ck
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let a: Tensor<f64> = back.get("a.weight").unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.data()[4].to_bits(), (4.0f64 * 0.1 - 0.2).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MFCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 8);
        assert_eq!(&bytes[10..18], b"a.weight");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x.mfck")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }), "{err}");
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample().to_bytes();
        for cut in [3, 7, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
    }
}
