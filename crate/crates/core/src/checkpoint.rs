//! Little-endian binary container for training state.
//!
//! Layout: the magic `CHAC`, a `u32` format version, a `u32` record count,
//! then the records. Each record is
//!
//! ```text
//! u32 name length | name (UTF-8) | u8 dtype | u32 rank | rank x u64 dims | payload
//! ```
//!
//! with dtype 1 = f64, 2 = u64, 3 = raw bytes. Payload length is the product
//! of the dims times the element size. Floats are stored at full width so a
//! resumed run continues bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CHAC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes at offset {offset}")]
    Magic { offset: usize },
    #[error("unsupported version {found} at offset {offset}")]
    Version { offset: usize, found: u32 },
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown dtype {dtype} at offset {offset}")]
    Dtype { offset: usize, dtype: u8 },
    #[error("record name at offset {offset} is not UTF-8")]
    Name { offset: usize },
    #[error("duplicate record {0:?}")]
    Duplicate(String),
    #[error("missing record {0:?}")]
    Missing(String),
    #[error("record {name:?}: {detail}")]
    Invalid { name: String, detail: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dims: Vec<u64>,
    pub payload: Payload,
}

/// An ordered set of named records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, dims: Vec<u64>, payload: Payload) {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, payload.len());
        self.records.insert(name.to_string(), Record { dims, payload });
    }

    pub fn put_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        self.insert(name, dims.iter().map(|&d| d as u64).collect(), Payload::F64(data));
    }

    pub fn put_f64_vec(&mut self, name: &str, data: Vec<f64>) {
        let n = data.len();
        self.put_f64(name, &[n], data);
    }

    pub fn put_u64(&mut self, name: &str, data: Vec<u64>) {
        let n = data.len() as u64;
        self.insert(name, vec![n], Payload::U64(data));
    }

    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        let n = data.len() as u64;
        self.insert(name, vec![n], Payload::Bytes(data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn invalid(name: &str, detail: impl Into<String>) -> CheckpointError {
        CheckpointError::Invalid {
            name: name.to_string(),
            detail: detail.into(),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.record(name)?.payload {
            Payload::F64(v) => Ok(v),
            _ => Err(Self::invalid(name, "expected f64 payload")),
        }
    }

    /// `f64` payload that must hold exactly `n` values.
    pub fn f64s_len(&self, name: &str, n: usize) -> Result<&[f64]> {
        let v = self.f64s(name)?;
        if v.len() != n {
            return Err(Self::invalid(name, format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.record(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Self::invalid(name, "expected u64 payload")),
        }
    }

    pub fn u64s_len(&self, name: &str, n: usize) -> Result<&[u64]> {
        let v = self.u64s(name)?;
        if v.len() != n {
            return Err(Self::invalid(name, format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.record(name)?.payload {
            Payload::Bytes(v) => Ok(v),
            _ => Err(Self::invalid(name, "expected byte payload")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.payload.dtype());
            out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
            for d in &rec.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &rec.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::Magic { offset: 0 });
        }
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { offset: 4, found });
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_at = r.at;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Name { offset: name_at })?
                .to_string();
            let dtype_at = r.at;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or(CheckpointError::Truncated {
                offset: r.at,
                needed: usize::MAX,
            })?;
            let payload = match dtype {
                1 => Payload::F64(r.words(n)?.map(f64::from_le_bytes).collect()),
                2 => Payload::U64(r.words(n)?.map(u64::from_le_bytes).collect()),
                3 => Payload::Bytes(r.take(n)?.to_vec()),
                _ => return Err(CheckpointError::Dtype { offset: dtype_at, dtype }),
            };
            if ck.records.contains_key(&name) {
                return Err(CheckpointError::Duplicate(name));
            }
            ck.records.insert(name, Record { dims, payload });
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated {
            offset: self.at,
            needed: n,
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn words(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; 8]> + 'a> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated { offset: self.at, needed: usize::MAX })?)?;
        Ok(bytes.chunks_exact(8).map(|c| c.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_f64("w", &[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
        ck.put_u64("n", vec![7, u64::MAX]);
        ck.put_bytes("cfg", b"{}".to_vec());
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.f64s("w").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn bad_magic_names_offset() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        let e = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(matches!(e, CheckpointError::Magic { offset: 0 }));
        assert!(e.to_string().contains("offset 0"));
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let b = sample().to_bytes();
        for cut in 0..b.len() {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_version() {
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version { offset: 4, found: 9 })));
    }
}
