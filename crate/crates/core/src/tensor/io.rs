//! MLBT binary tensor files.
//!
//! Layout: `b"MLBT"`, version byte `0x01`, `u32` LE rank, `rank` × `u32` LE
//! extents, then the row-major values as `f64` LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLBT";
pub const VERSION: u8 = 0x01;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path)?;
    read_tensor(&mut BufReader::new(f)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_bytes_for_small_tensor() {
        let t = Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"MLBT\x01".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_tensor(&mut &short[..]), Err(Error::Format(_))));
    }
}
