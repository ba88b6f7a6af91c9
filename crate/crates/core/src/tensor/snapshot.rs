//! Binary tensor snapshots.
//!
//! Layout (little-endian): `b"MIRT"`, `u32` rank, `rank x u64` dims, then
//! `product(dims) x f64` values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{MireError, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MIRT";

pub fn write_snapshot<W: Write>(w: &mut W, t: &Tensor) -> Result<u64> {
    let mut written = 0u64;
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    written += 8;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
        written += 8;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    written += buf.len() as u64;
    Ok(written)
}

/// Reads one snapshot from a byte slice starting at `offset`; returns the
/// tensor and the offset just past it.
pub fn read_snapshot_at(bytes: &[u8], offset: u64) -> Result<(Tensor, u64)> {
    let mut cur = Cursor { bytes, pos: offset };
    let magic = cur.take(4)?;
    if magic != SNAPSHOT_MAGIC {
        return Err(MireError::Format {
            offset,
            detail: format!("bad tensor magic {:?}", magic),
        });
    }
    let rank = cur.u32()? as usize;
    if rank > 8 {
        return Err(MireError::Format {
            offset: offset + 4,
            detail: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = cur.take(n.checked_mul(8).ok_or_else(|| MireError::Format {
        offset: cur.pos,
        detail: "payload size overflow".into(),
    })?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(&shape, data)?, cur.pos))
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (t, end) = read_snapshot_at(&bytes, 0)?;
    if end as usize != bytes.len() {
        return Err(MireError::Format {
            offset: end,
            detail: "trailing bytes after snapshot".into(),
        });
    }
    Ok(t)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: u64,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        let end = start.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                self.pos = end as u64;
                Ok(&self.bytes[start..end])
            }
            None => Err(MireError::Format {
                offset: self.pos,
                detail: format!(
                    "truncated: need {n} bytes, {} available",
                    self.bytes.len().saturating_sub(start)
                ),
            }),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        let n = write_snapshot(&mut buf, &t).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(&buf[0..4], b"MIRT");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn truncated_snapshot_names_offset() {
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        match read_snapshot(&mut buf.as_slice()) {
            Err(MireError::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_snapshot(&mut buf.as_slice()),
            Err(MireError::Format { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &t).unwrap();
            let back = read_snapshot(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
