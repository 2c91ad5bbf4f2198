//! Row-parallel kernels shared by the tape and the pure evaluation paths.

use super::Real;
use crate::par;

/// `a (m×k) · b (k×n)`, accumulating each output row in `f64`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    par::for_each_row(&mut out, n, |i, row| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip.as_f64();
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (acc_j, &b_pj) in acc.iter_mut().zip(b_row) {
                *acc_j += a_ip * b_pj.as_f64();
            }
        }
        for (o, v) in row.iter_mut().zip(acc) {
            *o = T::from_f64(v);
        }
    });
    out
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise `x / sqrt(mean(x²) + eps)`; also returns the per-row `1/r`.
pub fn rms_normalize<T: Real>(x: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<f64>) {
    let rows = x.len() / cols;
    let inv: Vec<f64> = par::map_indices(rows, |i| {
        let r = &x[i * cols..(i + 1) * cols];
        let ms = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
        1.0 / (ms + eps).sqrt()
    });
    let mut out = vec![T::zero(); x.len()];
    par::for_each_row(&mut out, cols, |i, row| {
        for (o, &v) in row.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
            *o = T::from_f64(v.as_f64() * inv[i]);
        }
    });
    (out, inv)
}

/// Row-wise `(x − mean) / sqrt(var + eps)`; also returns the per-row `1/σ`.
pub fn layer_normalize<T: Real>(x: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<f64>) {
    let rows = x.len() / cols;
    let stats: Vec<(f64, f64)> = par::map_indices(rows, |i| {
        let r = &x[i * cols..(i + 1) * cols];
        let mean = r.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
        (mean, 1.0 / (var + eps).sqrt())
    });
    let mut out = vec![T::zero(); x.len()];
    par::for_each_row(&mut out, cols, |i, row| {
        let (mean, inv) = stats[i];
        for (o, &v) in row.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
            *o = T::from_f64((v.as_f64() - mean) * inv);
        }
    });
    (out, stats.into_iter().map(|(_, inv)| inv).collect())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_row(&mut out, cols, |i, row| {
        softmax_into(&x[i * cols..(i + 1) * cols], row);
    });
    out
}

pub fn softmax_into<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0f64;
    let exps: Vec<f64> = x
        .iter()
        .map(|v| {
            let e = (v.as_f64() - max).exp();
            total += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64(e / total);
    }
}

/// Row-wise `log softmax` in `f64`.
pub fn log_softmax_row<T: Real>(x: &[T]) -> Vec<f64> {
    let max = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v.as_f64() - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}
