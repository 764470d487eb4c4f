//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `REFERS01`, then three sections in identical
//! framing — parameters, optimizer velocities, metadata. Each section is a
//! little-endian `u32` record count followed by records of
//! `u16 name length, name bytes, u8 dtype, u8 rank, u64 dims[rank], payload`.
//! Dtype 0 is `f32` (raw little-endian values); dtype 1 is an opaque byte
//! string (rank 1, dims = length) used by the metadata section for the rng
//! state, config text and similar fields.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"REFERS01";
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

/// One named f32 tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<TensorRecord>,
    pub velocities: Vec<TensorRecord>,
    pub meta: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        let bytes = self.meta_bytes(key)?;
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("meta field {key} is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn meta_f32(&self, key: &str) -> Result<f32> {
        let bytes = self.meta_bytes(key)?;
        let arr: [u8; 4] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("meta field {key} is not an f32")))?;
        Ok(f32::from_le_bytes(arr))
    }

    pub fn meta_str(&self, key: &str) -> Result<String> {
        String::from_utf8(self.meta_bytes(key)?)
            .map_err(|_| Error::Checkpoint(format!("meta field {key} is not utf-8")))
    }

    fn meta_bytes(&self, key: &str) -> Result<Vec<u8>> {
        self.meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field {key}")))
    }

    pub fn set_meta_u64(&mut self, key: &str, value: u64) {
        self.meta.insert(key.to_string(), value.to_le_bytes().to_vec());
    }

    pub fn set_meta_f32(&mut self, key: &str, value: f32) {
        self.meta.insert(key.to_string(), value.to_le_bytes().to_vec());
    }

    pub fn set_meta_str(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.as_bytes().to_vec());
    }

    pub fn param(&self, name: &str) -> Option<&TensorRecord> {
        self.params.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_tensor_section(&mut out, &self.params);
        write_tensor_section(&mut out, &self.velocities);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (name, bytes) in &self.meta {
            write_record_header(&mut out, name, DTYPE_BYTES, &[bytes.len() as u64]);
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            if magic.starts_with(b"REFERS") {
                return Err(Error::Checkpoint(format!(
                    "version mismatch: container is {:?}, expected {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(MAGIC)
                )));
            }
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".to_string()));
        }
        let params = read_tensor_section(&mut r)?;
        let velocities = read_tensor_section(&mut r)?;
        let meta_count = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_count {
            let (name, dtype, dims) = read_record_header(&mut r)?;
            if dtype != DTYPE_BYTES || dims.len() != 1 {
                return Err(Error::Checkpoint(format!(
                    "meta record {name} must be a byte string"
                )));
            }
            let payload = r.take(dims[0] as usize)?.to_vec();
            meta.insert(name, payload);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the metadata section",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { params, velocities, meta })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor_section(out: &mut Vec<u8>, records: &[TensorRecord]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        write_record_header(out, &rec.name, DTYPE_F32, &rec.dims);
        for v in &rec.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn write_record_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[u64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record_header(r: &mut Reader) -> Result<(String, u8, Vec<u64>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("record name is not utf-8".to_string()))?;
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 && dtype != DTYPE_BYTES {
        return Err(Error::Checkpoint(format!(
            "record {name}: unknown dtype code {dtype}"
        )));
    }
    let rank = r.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()?);
    }
    Ok((name, dtype, dims))
}

fn read_tensor_section(r: &mut Reader) -> Result<Vec<TensorRecord>> {
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (name, dtype, dims) = read_record_header(r)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor record {name} has non-f32 dtype {dtype}"
            )));
        }
        let numel: u64 = dims.iter().product();
        let raw = r.take(numel as usize * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, values });
    }
    Ok(records)
}
