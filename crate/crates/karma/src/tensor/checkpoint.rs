//! Binary checkpoint container.
//!
//! Layout: magic `KRMA`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor: name length (u16 LE) + UTF-8 name, rank (u8), dims
//! (u32 LE each), values (IEEE-754 f32 LE, row-major). Round trips are
//! byte-exact.

use super::{ParamStore, Tensor};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"KRMA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes; not a KRMA checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: &'static str },

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("tensor `{name}` declares {declared} elements, which overflows")]
    Overflow { name: String, declared: u64 },

    #[error("incompatible checkpoint: {detail}")]
    Incompatible { detail: String },
}

pub fn write_store<W: Write>(store: &ParamStore, w: &mut W) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.dims().len() as u8])?;
        for &d in tensor.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_store<R: Read>(r: &mut R) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = read_u32(r, "tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u16(r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, "rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank[0] {
            let d = read_u32(r, "dim")? as u64;
            numel = numel.saturating_mul(d);
            dims.push(d as usize);
        }
        if numel > (u32::MAX as u64) {
            return Err(CheckpointError::Overflow {
                name,
                declared: numel,
            });
        }
        let mut data = vec![0.0f32; numel as usize];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            read_exact(r, &mut buf, "tensor values")?;
            *slot = f32::from_le_bytes(buf);
        }
        store.insert(name, Tensor { dims, data });
    }
    Ok(store)
}

pub fn save_to_path(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_store(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let store = read_store(&mut r)?;
    // Anything after the declared tensors means the file is not what the
    // header claims.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(store),
        _ => Err(CheckpointError::Incompatible {
            detail: "trailing bytes after declared tensor data".to_string(),
        }),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], context: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, context: &'static str) -> Result<u16, CheckpointError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, context)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R, context: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, context)?;
    Ok(u32::from_le_bytes(buf))
}

/// FNV-1a over the serialized vocabulary; stored beside model checkpoints so
/// a model cannot be silently paired with the wrong token table.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
