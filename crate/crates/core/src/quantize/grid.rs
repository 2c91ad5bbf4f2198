use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};

/// `levels × h × w` code indices, stored level-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    levels: usize,
    h: usize,
    w: usize,
    n: usize,
    indices: Vec<u32>,
}

impl CodeGrid {
    pub fn new(levels: usize, h: usize, w: usize, n: usize, indices: Vec<u32>) -> Result<Self> {
        ensure!(
            indices.len() == levels * h * w,
            "grid {levels}×{h}×{w} needs {} indices, got {}",
            levels * h * w,
            indices.len()
        );
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n) {
            return Err(Error::contract(format!("code index {bad} out of range for {n} codes")));
        }
        Ok(Self {
            levels,
            h,
            w,
            n,
            indices,
        })
    }

    /// A grid with no positions.
    pub fn empty(n: usize) -> Self {
        Self {
            levels: 0,
            h: 0,
            w: 0,
            n,
            indices: Vec::new(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Codebook size the indices refer to.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, level: usize, y: usize, x: usize) -> u32 {
        self.indices[(level * self.h + y) * self.w + x]
    }

    /// Indices of one level in raster order.
    pub fn level(&self, level: usize) -> &[u32] {
        let hw = self.h * self.w;
        &self.indices[level * hw..(level + 1) * hw]
    }

    /// Header `(L, h, w, n)` as little-endian `u64`, then indices as
    /// little-endian `u32`, level-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.levels, self.h, self.w, self.n] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.indices.len() * 4);
        for i in &self.indices {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [levels, h, w, n] = header.map(|v| v as usize);
        let len = levels
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&v| v <= 1 << 28)
            .ok_or_else(|| Error::Format("code grid header too large".into()))?;
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let indices = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(levels, h, w, n, indices).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes grids back to back.
pub fn write_grids<W: Write>(mut w: W, grids: &[CodeGrid]) -> Result<()> {
    for g in grids {
        g.write_to(&mut w)?;
    }
    Ok(())
}

/// Reads back-to-back grids until the input is exhausted.
pub fn read_grids(bytes: &[u8]) -> Result<Vec<CodeGrid>> {
    let mut cursor = bytes;
    let mut out = Vec::new();
    while !cursor.is_empty() {
        out.push(CodeGrid::read_from(&mut cursor)?);
    }
    Ok(out)
}
