//! Flat binary checkpoints: a header (magic, version, dtype, V, d, layer
//! count, block count) followed by named parameter blocks (name length,
//! name, shape rank, dims, raw little-endian values).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::ModelConfig;
use crate::model::SquireModel;
use crate::nn::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SQUIRECK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Checkpoint identity fields readable without loading parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub dtype: u8,
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub blocks: usize,
}

fn dtype_of<T: Real>() -> u8 {
    if std::mem::size_of::<T>() == 4 {
        DTYPE_F32
    } else {
        DTYPE_F64
    }
}

pub fn save<T: Real>(path: &Path, model: &SquireModel<T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let cfg = model.config();
    let blocks: Vec<(&str, &Tensor<T>)> = model.params().blocks().collect();
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u8(dtype_of::<T>()).map_err(io_err)?;
    w.write_u64::<LittleEndian>(cfg.vocab_size as u64).map_err(io_err)?;
    w.write_u64::<LittleEndian>(cfg.d_model as u64).map_err(io_err)?;
    w.write_u64::<LittleEndian>(cfg.layers as u64).map_err(io_err)?;
    w.write_u64::<LittleEndian>(blocks.len() as u64).map_err(io_err)?;

    for (name, tensor) in blocks {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_u8(tensor.shape().len() as u8).map_err(io_err)?;
        for &dim in tensor.shape() {
            w.write_u64::<LittleEndian>(dim as u64).map_err(io_err)?;
        }
        match dtype_of::<T>() {
            DTYPE_F32 => {
                for &v in tensor.data() {
                    w.write_f32::<LittleEndian>(v.to_f64() as f32).map_err(io_err)?;
                }
            }
            _ => {
                for &v in tensor.data() {
                    w.write_f64::<LittleEndian>(v.to_f64()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Decode a header from a reader.
pub fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| bad(e.to_string()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = r.read_u8().map_err(|e| bad(e.to_string()))?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(bad(format!("unknown dtype {dtype}")));
    }
    let mut next = || -> Result<usize> {
        let v = r
            .read_u64::<LittleEndian>()
            .map_err(|e| bad(e.to_string()))?;
        usize::try_from(v).map_err(|_| bad(format!("header field {v} overflows")))
    };
    Ok(Header {
        version,
        dtype,
        vocab_size: next()?,
        d_model: next()?,
        layers: next()?,
        blocks: next()?,
    })
}

/// Read just the header of a checkpoint file.
pub fn peek(path: &Path) -> Result<Header> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(file))
}

/// Size guard for length-prefixed fields in untrusted files.
const MAX_NAME: usize = 1 << 16;
const MAX_ELEMENTS: usize = 1 << 28;

/// Decode all parameter blocks following the header.
pub fn read_blocks<T: Real, R: Read>(
    r: &mut R,
    header: &Header,
) -> Result<Vec<(String, Tensor<T>)>> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut out = Vec::with_capacity(header.blocks.min(1024));
    for _ in 0..header.blocks {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|e| bad(e.to_string()))? as usize;
        if name_len > MAX_NAME {
            return Err(bad(format!("block name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;

        let rank = r.read_u8().map_err(|e| bad(e.to_string()))? as usize;
        if rank > 8 {
            return Err(bad(format!("block {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let dim = r
                .read_u64::<LittleEndian>()
                .map_err(|e| bad(e.to_string()))? as usize;
            count = count
                .checked_mul(dim)
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| bad(format!("block {name}: element count overflows")))?;
            shape.push(dim);
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = match header.dtype {
                DTYPE_F32 => r
                    .read_f32::<LittleEndian>()
                    .map_err(|e| bad(e.to_string()))? as f64,
                _ => r
                    .read_f64::<LittleEndian>()
                    .map_err(|e| bad(e.to_string()))?,
            };
            data.push(T::from_f64(v));
        }
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(out)
}

/// Decode a checkpoint from a byte slice (used by loaders and fuzzing).
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<T>)>)> {
    let mut cursor = std::io::Cursor::new(bytes);
    let header = read_header(&mut cursor)?;
    let blocks = read_blocks(&mut cursor, &header)?;
    Ok((header, blocks))
}

/// Load a checkpoint into a freshly built model. `cfg` must agree with the
/// stored header on V, d and layer count.
pub fn load<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<SquireModel<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    if header.vocab_size != cfg.vocab_size
        || header.d_model != cfg.d_model
        || header.layers != cfg.layers
    {
        return Err(Error::Checkpoint(format!(
            "checkpoint (V={}, d={}, layers={}) does not match config (V={}, d={}, layers={})",
            header.vocab_size, header.d_model, header.layers,
            cfg.vocab_size, cfg.d_model, cfg.layers
        )));
    }
    let blocks = read_blocks::<T, _>(&mut r, &header)?;
    let mut model = SquireModel::new(cfg.clone(), 0);
    let expected = model.params().ids().count();
    if blocks.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} parameter blocks, found {}",
            blocks.len()
        )));
    }
    for (name, tensor) in blocks {
        if !model.params_mut().load_block(&name, tensor) {
            return Err(Error::Checkpoint(format!(
                "unknown or mis-shaped parameter block {name:?}"
            )));
        }
    }
    Ok(model)
}
