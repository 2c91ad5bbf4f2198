//! Named-tensor container.
//!
//! Layout, all integers little-endian `u64`:
//! `"CODA1"`, tensor count, then per tensor: name byte length, UTF-8 name,
//! rank, extents, and the values as little-endian `f32`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CODA1";

/// Ordered `(name, tensor)` pairs.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// Guards allocations against corrupt headers.
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

pub fn read_tensors<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a CODA1 container".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u64(&mut r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".to_string(), &t)]).unwrap();
        let mut expect = b"CODA1".to_vec();
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.push(b'w');
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tensors(&b"NOPE1\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&1u64.to_le_bytes());
        assert!(read_tensors(&buf[..]).is_err(), "truncated");
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), name in "[a-z.0-9]{1,12}") {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(vec![rows, cols], 1.0, &mut rng);
            let s = Tensor::<f32>::scalar(3.5);
            let mut buf = Vec::new();
            write_tensors(&mut buf, &[(name.clone(), &t), ("s".into(), &s)]).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
            prop_assert_eq!(&back[1].1, &s);
        }
    }
}
