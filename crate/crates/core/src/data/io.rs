use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCSV";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes a volume in the MCSV1 layout.
pub fn encode_volume(v: &Tensor<f32>) -> Result<Vec<u8>> {
    if v.rank() == 0 || v.rank() > u8::MAX as usize {
        return Err(Error::invalid(format!("cannot store a tensor of rank {}", v.rank())));
    }
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("volume to be written".into()));
    }
    let mut out = Vec::with_capacity(7 + 4 * v.rank() + 4 * v.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(v.rank() as u8);
    for &d in v.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let header = |i: usize| bytes.get(i).copied().ok_or_else(|| fmt("truncated header"));
    let version = header(4)?;
    if version != VERSION {
        return Err(Error::Format(format!("unknown version {version}")));
    }
    let ndim = header(5)? as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| fmt("truncated header"))?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let dtype = header(pos)?;
    pos += 1;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unknown dtype {dtype}")));
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() < 4 * n {
        return Err(fmt("truncated payload"));
    }
    if payload.len() > 4 * n {
        return Err(fmt("trailing bytes after payload"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::from_vec(data, &shape)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Tensor::<f32>::from_vec(vec![1.5, -2.0], &[1, 2]).unwrap();
        let b = encode_volume(&v).unwrap();
        assert_eq!(&b[..6], b"MCSV\x01\x02");
        assert_eq!(&b[6..14], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b[14], 0);
        assert_eq!(b.len(), 15 + 8);
        assert_eq!(decode_volume(&b).unwrap().data(), v.data());
    }

    #[test]
    fn errors() {
        let v = Tensor::<f32>::ones(&[2, 2, 2]);
        let b = encode_volume(&v).unwrap();
        let e = decode_volume(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("truncated payload"), "{e}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_volume(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(decode_volume(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = b;
        bad[18] = 1;
        assert!(decode_volume(&bad).unwrap_err().to_string().contains("dtype"));
    }
}
