//! The CRAT tensor container.
//!
//! ```text
//! "CRAT"            4 bytes magic
//! version           u32 LE (= 1)
//! dtype             u8     (0 = f64 LE, 1 = f32 LE)
//! ndim              u32 LE
//! dims              ndim x u32 LE
//! payload           row-major elements
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CRAT_MAGIC: [u8; 4] = *b"CRAT";
pub const CRAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }
}

pub fn write_crat_to<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> std::io::Result<()> {
    w.write_all(&CRAT_MAGIC)?;
    w.write_all(&CRAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()
}

/// Parses a CRAT stream; `path` is only used in error messages.
pub fn read_crat_from<R: Read>(mut r: R, path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let io = |e: std::io::Error| bad(format!("truncated or unreadable: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != CRAT_MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}")));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != CRAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code).map_err(io)?;
    let dtype = Dtype::from_code(code[0]).ok_or_else(|| bad(format!("unknown dtype code {}", code[0])))?;
    let ndim = read_u32(&mut r).map_err(io)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(bad(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload).map_err(io)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_crat(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_crat_to(BufWriter::new(f), t, dtype).map_err(|e| Error::io(path, e))
}

pub fn read_crat(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_crat_from(BufReader::new(f), path)
}
