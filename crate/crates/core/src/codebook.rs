//! Codebook storage, initialization, and usage accounting.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkit::kernels::squared_distance;
use crate::numkit::Tensor;
use crate::par;
use crate::quantize::CodeGrid;

/// Lloyd iterations used by [`InitScheme::KMeansOnSample`].
pub const KMEANS_ITERS: usize = 10;

#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Entries from N(0, 1/d).
    #[default]
    Gaussian,
    /// Entries from U(−1/√d, 1/√d).
    Uniform,
    /// Lloyd's algorithm on a sample, seeded from random sample rows.
    KmeansOnSample,
}

/// An `n × d` embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    embeddings: Tensor,
}

impl Codebook {
    pub fn init(n: usize, d: usize, scheme: InitScheme, seed: u64, sample: Option<&Tensor>) -> Result<Self> {
        ensure!(n >= 2, "codebook needs at least 2 codes, got {n}");
        ensure!(d >= 1, "codebook dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = match scheme {
            InitScheme::Gaussian => Tensor::randn(vec![n, d], (1.0 / d as f64).sqrt(), &mut rng),
            InitScheme::Uniform => {
                let b = 1.0 / (d as f64).sqrt();
                Tensor::uniform(vec![n, d], -b, b, &mut rng)
            }
            InitScheme::KmeansOnSample => {
                let sample =
                    sample.ok_or_else(|| crate::Error::contract("kmeans_on_sample initialization needs a sample"))?;
                ensure!(
                    sample.is_matrix() && sample.cols() == d,
                    "sample must be a matrix with {d} columns, got {:?}",
                    sample.shape()
                );
                ensure!(
                    sample.rows() >= n,
                    "sample has {} rows, need at least {n}",
                    sample.rows()
                );
                lloyd(sample, n, KMEANS_ITERS, &mut rng)
            }
        };
        Self::from_embeddings(embeddings)
    }

    pub fn from_embeddings(embeddings: Tensor) -> Result<Self> {
        ensure!(embeddings.is_matrix(), "codebook embeddings must be a matrix");
        ensure!(embeddings.rows() >= 2, "codebook needs at least 2 codes");
        ensure!(embeddings.is_finite(), "codebook rows must be finite");
        Ok(Self { embeddings })
    }

    pub fn n(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn d(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.embeddings
    }

    pub fn into_embeddings(self) -> Tensor {
        self.embeddings
    }
}

/// Lloyd's algorithm from `k` distinct random rows. Empty clusters keep
/// their previous center.
fn lloyd(sample: &Tensor, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = sample.cols();
    let mut order: Vec<usize> = (0..sample.rows()).collect();
    order.shuffle(rng);
    // Prefer rows with distinct values so duplicated points do not seed two
    // identical centers.
    let mut seeds: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if seeds.len() == k {
            break;
        }
        if seeds.iter().all(|&s| sample.row(s) != sample.row(i)) {
            seeds.push(i);
        }
    }
    for &i in &order {
        if seeds.len() == k {
            break;
        }
        if !seeds.contains(&i) {
            seeds.push(i);
        }
    }
    let mut centers: Vec<f32> = seeds.iter().flat_map(|&i| sample.row(i).to_vec()).collect();

    for _ in 0..iters {
        let assign = nearest_rows(sample, &centers, d);
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(sample.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                }
            }
        }
    }
    Tensor::from_parts(vec![k, d], centers)
}

fn nearest_rows(sample: &Tensor, centers: &[f32], d: usize) -> Vec<usize> {
    let k = centers.len() / d;
    par::map_indices(sample.rows(), |i| {
        let row = sample.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let dist = squared_distance(row, &centers[c * d..(c + 1) * d]);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best.0
    })
}

/// Per-code assignment counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl UsageHistogram {
    pub fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n],
            total: 0,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    /// Counts every index once. Fails without modifying `self` if any index
    /// is out of range.
    pub fn record(&mut self, indices: &[u32]) -> Result<()> {
        let n = self.counts.len();
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n) {
            return Err(crate::Error::contract(format!(
                "code index {bad} out of range for codebook of {n}"
            )));
        }
        for &i in indices {
            self.counts[i as usize] += 1;
        }
        self.total += indices.len() as u64;
        Ok(())
    }

    /// Returns a histogram with every index of `grid` recorded.
    pub fn record_usage(&self, grid: &CodeGrid) -> Result<Self> {
        let mut out = self.clone();
        out.record(grid.indices())?;
        Ok(out)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        ensure!(
            self.n() == other.n(),
            "cannot merge histograms of size {} and {}",
            self.n(),
            other.n()
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Fraction of codes used at least once.
    pub fn utilization(&self) -> Result<f64> {
        ensure!(self.total > 0, "utilization of an empty histogram");
        let used = self.counts.iter().filter(|&&c| c > 0).count();
        Ok(used as f64 / self.counts.len() as f64)
    }

    /// `index,count` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{i},{c}")?;
        }
        Ok(())
    }
}
