//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"MOST" | version: u16 | rank: u16 | extents: rank × u64 | payload: len × f64
//! ```
//!
//! Several containers may be concatenated in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOST";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.rank() as u16).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Read one container; `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R, path: &Path) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    }
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    let mut b8 = [0u8; 8];
    let mut read = |buf: &mut [u8]| {
        r.read_exact(buf)
            .map_err(|e| format_err(path, format!("truncated container: {e}")))
    };
    read(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported container version {version}"),
        ));
    }
    read(&mut b2)?;
    let rank = u16::from_le_bytes(b2) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        read(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        read(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
        .map(Some)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn save_tensors(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    save_tensors(path, &[tensor])
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut all = load_tensors(path)?;
    if all.len() != 1 {
        return Err(format_err(
            path,
            format!("expected one tensor, found {}", all.len()),
        ));
    }
    Ok(all.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MOST");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[2, 0]);
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        let mut bad: &[u8] = b"NOPE\x01\x00";
        assert!(read_tensor(&mut bad, p).is_err());

        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[3])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice(), p).is_err());
    }
}
