//! "UOVT" containers: a sequence of named little-endian tensors.
//!
//! ```text
//! magic "UOVT" | version u32 | count u32
//! per record: name_len u32 | name utf-8 | dtype u8 (0 f32, 1 u8) | rank u8 |
//!             dims u64 × rank | payload
//! ```

use std::path::Path;

use uovn_core::Tensor;

use crate::error::{read, write, Error, Result};

const MAGIC: &[u8; 4] = b"UOVT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Data {
    pub fn shape(&self) -> &[usize] {
        match self {
            Data::F32(t) => t.shape(),
            Data::U8 { shape, .. } => shape,
        }
    }

    pub fn mask(m: &[bool]) -> Self {
        Data::U8 { shape: vec![m.len()], data: m.iter().map(|&b| b as u8).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub records: Vec<(String, Data)>,
}

impl Container {
    pub fn push(&mut self, name: &str, data: Data) {
        self.records.push((name.to_string(), data));
    }

    pub fn get(&self, name: &str) -> Option<&Data> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name)? {
            Data::F32(t) => Some(t),
            Data::U8 { .. } => None,
        }
    }

    pub fn mask(&self, name: &str) -> Option<Vec<bool>> {
        match self.get(name)? {
            Data::U8 { data, .. } => Some(data.iter().map(|&b| b != 0).collect()),
            Data::F32(_) => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, data) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match data {
                Data::F32(t) => (0u8, t.shape()),
                Data::U8 { shape, .. } => (1u8, shape.as_slice()),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                Data::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Data::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a UOVT container (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported UOVT version {version}"));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "record name is not utf-8".to_string())?.to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
            let data = match dtype {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or("shape overflows")?)?;
                    let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    Data::F32(Tensor::new(&shape, vals).map_err(|e| e.to_string())?)
                }
                1 => Data::U8 { data: r.take(n)?.to_vec(), shape },
                d => return Err(format!("record {name:?}: unknown dtype {d}")),
            };
            records.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|m| Error::format(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated container")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
