//! Checkpoint container: magic "UNST", format version, step counter, the
//! model config as text, a tensor manifest (name, dtype, shape, offset), and
//! little-endian payloads in registry order. Weights roundtrip bitwise for a
//! fixed element type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Dtype, Element};

pub const MAGIC: &[u8; 4] = b"UNST";
pub const VERSION: u32 = 1;

pub fn save<E: Element>(model: &Model<E>, step: u64, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    let config = model.config.to_text().into_bytes();
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;

    let params = model.params();
    let width = E::DTYPE.byte_size();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, p) in params {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[E::DTYPE.code(), p.shape().len() as u8])?;
        for &d in p.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += (p.numel() * width) as u64;
    }
    let mut buf = Vec::new();
    for (_, p) in params {
        buf.clear();
        for v in p.data().iter() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the model from the stored config and weights.
pub fn load<E: Element>(path: &Path) -> Result<(Model<E>, u64)> {
    load_inner(path, None)
}

/// Like [`load`], but rejects a checkpoint whose stored config differs from
/// `expected`, listing every tensor whose shape disagrees.
pub fn load_with_config<E: Element>(path: &Path, expected: &ModelConfig) -> Result<(Model<E>, u64)> {
    load_inner(path, Some(expected))
}

struct Rd {
    r: BufReader<File>,
    path: String,
}

impl Rd {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::checkpoint(format!("{}: truncated", self.path)))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

/// Reads only the header: the stored config and step counter, leaving the
/// tensor payloads untouched.
pub fn read_header(path: &Path) -> Result<(ModelConfig, u64)> {
    let shown = path.display().to_string();
    let mut rd = Rd { r: BufReader::new(File::open(path)?), path: shown.clone() };
    read_prefix(&mut rd, &shown)
}

fn read_prefix(rd: &mut Rd, shown: &str) -> Result<(ModelConfig, u64)> {
    if rd.bytes(4)? != MAGIC {
        return Err(Error::checkpoint(format!("{shown}: bad magic, not a checkpoint")));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("{shown}: unsupported version {version}")));
    }
    let step = rd.u64()?;
    let config_len = rd.u32()? as usize;
    let config_text = String::from_utf8(rd.bytes(config_len)?)
        .map_err(|_| Error::checkpoint(format!("{shown}: config block is not UTF-8")))?;
    Ok((ModelConfig::from_text(&config_text)?, step))
}

fn load_inner<E: Element>(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model<E>, u64)> {
    let shown = path.display().to_string();
    let mut rd = Rd { r: BufReader::new(File::open(path)?), path: shown.clone() };
    let (config, step) = read_prefix(&mut rd, &shown)?;

    let count = rd.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = rd.u16()? as usize;
        let name = String::from_utf8(rd.bytes(name_len)?)
            .map_err(|_| Error::checkpoint(format!("{shown}: tensor name is not UTF-8")))?;
        let meta = rd.bytes(2)?;
        let rank = meta[1] as usize;
        let dtype = Dtype::from_code(meta[0]).ok_or_else(|| {
            Error::checkpoint(format!("{shown}: {name}: unknown dtype code {}", meta[0]))
        })?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32()? as usize);
        }
        let offset = rd.u64()?;
        entries.push(Entry { name, dtype, shape, offset });
    }

    let model = Model::<E>::build(expected.unwrap_or(&config), 0)?;
    let mut offenders = Vec::new();
    if let Some(want) = expected {
        if *want != config {
            offenders.push("stored config differs from the requested one".to_string());
        }
    }
    let params = model.params();
    if params.len() != entries.len() {
        offenders.push(format!("{} tensors stored, model has {}", entries.len(), params.len()));
    }
    for ((name, p), e) in params.iter().zip(&entries) {
        if *name != e.name {
            offenders.push(format!("expected tensor {name}, found {}", e.name));
        } else if p.shape() != e.shape {
            offenders.push(format!("{name}: stored shape {:?}, model wants {:?}", e.shape, p.shape()));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::checkpoint(format!("{shown}: incompatible checkpoint: {}", offenders.join("; "))));
    }

    let mut expect_offset = 0u64;
    for ((_, p), e) in params.iter().zip(&entries) {
        if e.offset != expect_offset {
            return Err(Error::checkpoint(format!(
                "{shown}: {}: payload offset {} does not match manifest order",
                e.name, e.offset
            )));
        }
        let n = p.numel();
        let width = e.dtype.byte_size();
        let raw = rd.bytes(n * width)?;
        p.update_data(|w| {
            for (i, slot) in w.iter_mut().enumerate() {
                let v = match e.dtype {
                    Dtype::F32 => f32::read_le(&raw[4 * i..]) as f64,
                    Dtype::F64 => f64::read_le(&raw[8 * i..]),
                };
                *slot = E::from_f64(v);
            }
        });
        expect_offset += (n * width) as u64;
    }
    Ok((model, step))
}
