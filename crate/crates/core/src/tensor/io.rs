//! PVCT binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PVCT" | u32 version = 1 | u32 ndim | ndim x u64 extents | row-major f64 payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{PvcError, Result};

pub const PVCT_MAGIC: &[u8; 4] = b"PVCT";
pub const PVCT_VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> PvcError {
    PvcError::Format {
        kind: "PVCT",
        detail: detail.into(),
    }
}

pub fn write_pvct_to(t: &Tensor, mut w: impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * t.ndim() + 8 * t.len());
    buf.extend_from_slice(PVCT_MAGIC);
    buf.extend_from_slice(&PVCT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_pvct_from(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != PVCT_MAGIC {
        return Err(bad("missing PVCT magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != PVCT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| bad("extent overflows usize"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows"))?;
    let payload = take(
        count
            .checked_mul(8)
            .ok_or_else(|| bad("payload overflows"))?,
    )?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cur.is_empty() {
        return Err(bad(format!("{} trailing bytes", cur.len())));
    }
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_pvct(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_pvct_to(t, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| PvcError::io(path, e))
}

pub fn read_pvct(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PvcError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_pvct_to(&t, &mut buf).unwrap();
        let mut expected = b"PVCT".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Rng::new(1).gaussian_tensor(&[3, 2], 1.0);
        let mut buf = Vec::new();
        write_pvct_to(&t, &mut buf).unwrap();
        assert!(read_pvct_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_pvct_from(&extra[..]).is_err());
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(read_pvct_from(&wrong_magic[..]).is_err());
        let mut wrong_version = buf;
        wrong_version[4] = 2;
        assert!(read_pvct_from(&wrong_version[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let t = Rng::new(seed).gaussian_tensor(&shape, 3.0);
            let mut buf = Vec::new();
            write_pvct_to(&t, &mut buf).unwrap();
            let back = read_pvct_from(&buf[..]).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
