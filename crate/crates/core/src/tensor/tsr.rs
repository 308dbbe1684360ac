//! TSR1 container: `54 53 52 31`, u8 rank, rank × u32 LE extents, u8 dtype tag,
//! little-endian row-major payload.

use std::fs;
use std::path::Path;

use super::{numel, Element, Precision, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TSR1";

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let width = T::PRECISION.byte_width();
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &e in t.shape() {
        out.extend_from_slice(&u32::try_from(e).expect("extent fits in u32").to_le_bytes());
    }
    out.push(T::PRECISION.tag());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Decodes a TSR1 byte buffer. `path` only labels errors.
pub fn decode_any(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:02x?}")));
    }
    let rank = r.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = r.take(4, "extent")?;
        let e = u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        if e == 0 {
            r.pos -= 4;
            return Err(r.err("zero extent"));
        }
        shape.push(e);
    }
    let tag = r.take(1, "dtype tag")?[0];
    let precision = Precision::from_tag(tag).ok_or_else(|| {
        r.pos -= 1;
        r.err(format!("unknown dtype tag {tag}"))
    })?;
    let width = precision.byte_width();
    let count = numel(&shape);
    let payload = r.take(count * width, "payload")?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    fn collect<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
        let width = T::PRECISION.byte_width();
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(shape, data).expect("validated extents")
    }
    Ok(match precision {
        Precision::F32 => AnyTensor::F32(collect(shape, payload)),
        Precision::F64 => AnyTensor::F64(collect(shape, payload)),
    })
}

/// Decodes and requires the stored dtype to be `T`.
pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let any = decode_any(bytes, path)?;
    let found = any.precision();
    let mismatch = || Error::Format {
        path: path.to_path_buf(),
        offset: 5 + 4 * any.shape().len(),
        msg: format!("dtype {found:?} where {:?} was expected", T::PRECISION),
    };
    // Route through the concrete types; `T` is one of them.
    match any {
        AnyTensor::F32(t) if T::PRECISION == Precision::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::PRECISION == Precision::F64 => Ok(t.cast()),
        _ => Err(mismatch()),
    }
}

pub fn write<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
