//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"R2M1"
//! u32 tensor count
//! per tensor:
//!   u32 name length, UTF-8 name bytes
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"R2M1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ParamStore, extra: &[(&str, &Tensor)]) -> Result<()> {
    let mut all: Vec<(&str, &Tensor)> = params.iter().collect();
    all.extend_from_slice(extra);
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensors(&mut w, &all)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    match std::fs::File::open(path) {
        Ok(f) => read_tensors(std::io::BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::FileNotFound(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
            name in "[a-z.]{1,12}",
        ) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32) >> 2))
                .collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &[(name.as_str(), &t)]).unwrap();
            let back = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            let bits: Vec<u64> = back[0].1.data().iter().map(|x| x.to_bits()).collect();
            let orig: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!(back[0].1.shape(), t.shape());
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::row(vec![1.5]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w", &t)]).unwrap();
        assert_eq!(&buf[..4], b"R2M1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[buf.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_tensors(&b"XXXX\0\0\0\0"[..]), Err(Error::Checkpoint(_))));
    }
}
