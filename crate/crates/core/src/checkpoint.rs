//! `SDCK` checkpoint files: magic, u16 version, then named tensors until end
//! of file. Each tensor is a u16 name length, the UTF-8 name, a u8 dtype tag,
//! a u8 rank, u32 extents and the little-endian payload.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint lacks tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write<'a, T: Scalar>(
    mut w: impl Write,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<(), CheckpointError> {
    let mut buf = header();
    for (name, t) in tensors {
        append(&mut buf, name, t)?;
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Magic and version; tensors of any dtype may follow via [`append`].
pub fn header() -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf
}

pub fn append<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<(), CheckpointError> {
    let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Format(format!("name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE as u8);
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
    Ok(())
}

fn take<'b>(bytes: &mut &'b [u8], n: usize) -> Result<&'b [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Format("truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Reads every tensor, converting to `T` when stored at another precision.
pub fn read<T: Scalar>(mut r: impl Read) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    let mut bytes = &all[..];
    if take(&mut bytes, 4)? != MAGIC {
        return Err(CheckpointError::Format("missing SDCK magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut bytes, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let len = u16::from_le_bytes(take(&mut bytes, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut bytes, len)?.to_vec())
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let head = take(&mut bytes, 2)?;
        let dtype = DType::from_tag(head[0]).ok_or_else(|| CheckpointError::Format(format!("dtype tag {}", head[0])))?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut bytes, numel * dtype.size())?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => payload.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let a = Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.1 - 0.25);
        let b = Tensor::<f32>::from_fn([4], |i| -(i as f32));
        let mut buf = Vec::new();
        write(&mut buf, [("a", &a), ("b.w", &b)]).unwrap();
        assert_eq!(&buf[..6], b"SDCK\x01\x00");
        let back = read::<f32>(&buf[..]).unwrap();
        assert_eq!(back, vec![("a".to_owned(), a), ("b.w".to_owned(), b)]);
    }

    #[test]
    fn widening_read() {
        let a = Tensor::<f32>::from_fn([3], |i| i as f32 / 3.0);
        let mut buf = Vec::new();
        write(&mut buf, [("a", &a)]).unwrap();
        let back = read::<f64>(&buf[..]).unwrap();
        assert_eq!(back[0].1.data()[1], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read::<f32>(&b"SDCX\x01\x00"[..]).is_err());
        let a = Tensor::<f32>::zeros([4]);
        let mut buf = Vec::new();
        write(&mut buf, [("a", &a)]).unwrap();
        assert!(read::<f32>(&buf[..buf.len() - 1]).is_err());
    }
}
