//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MIMCKPT1"                      8 bytes
//! tensor count                    u32
//! per tensor:
//!   name length                   u16
//!   name                          UTF-8 bytes
//!   rank                          u8
//!   dims                          rank × u32
//!   payload                       numel × f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIMCKPT1";

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet<f32>) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let count = u32::try_from(params.len()).map_err(|_| invalid("too many tensors"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| invalid(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| invalid("rank exceeds 255"))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| invalid("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<ParamSet<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4);
    let mut params = ParamSet::new();
    for _ in 0..count {
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b4)?;
            values.push(f32::from_le_bytes(b4));
        }
        let t = Tensor::new(shape, values).map_err(|e| invalid(format!("tensor `{name}`: {e}")))?;
        params.insert(name, t).map_err(|e| invalid(e.to_string()))?;
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet<f32>) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> io::Result<ParamSet<f32>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(1, 2, vec![1.0f32, -2.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let mut expected = b"MIMCKPT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(2);
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.get("w").unwrap().values(), &[1.0, -2.5]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = read_checkpoint(&b"NOTACKPT\0\0\0\0"[..]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
