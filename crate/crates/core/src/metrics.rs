//! Reconstruction and diagnostic metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{ensure, Result};
use crate::numkit::kernels::{softmax_into, squared_distance};
use crate::numkit::Tensor;
use crate::quantize::{attn_assign, AttentionQuantizer};

/// Upper bound reported for identical signals.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(peak² / mse)`, clamped to `[0, 99]`.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    ensure!(peak > 0.0 && peak.is_finite(), "peak must be positive");
    ensure!(
        x.shape() == x_hat.shape(),
        "psnr shape mismatch: {:?} vs {:?}",
        x.shape(),
        x_hat.shape()
    );
    let mse = squared_distance(x.values(), x_hat.values()) / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).clamp(0.0, PSNR_CAP))
}

/// Mean SSIM over all valid `window × window` placements of two `h × w`
/// images, with uniform weights and population statistics.
pub fn ssim(x: &Tensor, y: &Tensor, window: usize, peak: f64) -> Result<f64> {
    ensure!(
        window >= 3 && window % 2 == 1,
        "SSIM window must be odd and at least 3, got {window}"
    );
    ensure!(peak > 0.0, "peak must be positive");
    ensure!(
        x.is_matrix() && x.shape() == y.shape(),
        "SSIM needs two images of equal shape, got {:?} and {:?}",
        x.shape(),
        y.shape()
    );
    let (h, w) = (x.rows(), x.cols());
    ensure!(
        h >= window && w >= window,
        "image {h}×{w} is smaller than the {window}×{window} window"
    );
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let xv = x.values();
    let yv = y.values();
    let count = (window * window) as f64;
    let mut acc = 0.0;
    let mut placements = 0usize;
    for top in 0..=h - window {
        for left in 0..=w - window {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + window {
                for c in left..left + window {
                    let a = xv[r * w + c] as f64;
                    let b = yv[r * w + c] as f64;
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / count;
            let my = sy / count;
            let vx = (sxx / count - mx * mx).max(0.0);
            let vy = (syy / count - my * my).max(0.0);
            let cov = sxy / count - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            placements += 1;
        }
    }
    Ok(acc / placements as f64)
}

/// Top-k assignment confidences per feature, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceHeatmap {
    values: Tensor,
}

impl ConfidenceHeatmap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,col,value")?;
        let k = self.values.cols();
        for r in 0..self.values.rows() {
            for (c, v) in self.values.row(r).iter().enumerate().take(k) {
                writeln!(w, "{r},{c},{v}")?;
            }
        }
        Ok(())
    }
}

/// Which assignment rule a heatmap describes.
#[derive(Debug, Clone, Copy)]
pub enum HeatmapSource<'a> {
    Attention {
        quantizer: &'a AttentionQuantizer,
        temperature: f64,
    },
    /// Plain nearest neighbor: confidences are `softmax(−‖f − c‖²)`.
    Vq,
}

fn top_k_sorted(row: &[f32], k: usize) -> Vec<f32> {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(k);
    sorted
}

pub fn confidence_heatmap(
    f: &Tensor,
    codebook: &Codebook,
    source: HeatmapSource<'_>,
    k: usize,
) -> Result<ConfidenceHeatmap> {
    ensure!(k >= 1 && k <= codebook.n(), "k = {k} must be in 1..={}", codebook.n());
    let probs = match source {
        HeatmapSource::Attention { quantizer, temperature } => {
            let rec = attn_assign(f, codebook, quantizer, temperature)?;
            rec.attention.expect("attention assignment yields a distribution")
        }
        HeatmapSource::Vq => {
            ensure!(
                f.is_matrix() && f.cols() == codebook.d(),
                "feature dimension {:?} does not match codebook dimension {}",
                f.shape(),
                codebook.d()
            );
            let n = codebook.n();
            let mut out = vec![0.0f32; f.rows() * n];
            crate::par::for_each_row(&mut out, n, |i, row| {
                let neg: Vec<f32> = (0..n)
                    .map(|j| -squared_distance(f.row(i), codebook.embeddings().row(j)) as f32)
                    .collect();
                softmax_into(&neg, row);
            });
            Tensor::matrix(f.rows(), n, out)?
        }
    };
    let rows: Vec<Vec<f32>> = (0..probs.rows()).map(|i| top_k_sorted(probs.row(i), k)).collect();
    Ok(ConfidenceHeatmap {
        values: Tensor::from_rows(&rows)?,
    })
}

/// Codebook positions over training, for 2-D experiments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicsTrace {
    snapshots: Vec<(usize, Tensor)>,
}

impl DynamicsTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an `n × 2` snapshot; steps must strictly increase.
    pub fn push(&mut self, step: usize, positions: Tensor) -> Result<()> {
        ensure!(
            positions.is_matrix() && positions.cols() == 2,
            "dynamics snapshots must be n×2, got {:?}",
            positions.shape()
        );
        if let Some((last, _)) = self.snapshots.last() {
            ensure!(step > *last, "snapshot step {step} does not follow {last}");
        }
        self.snapshots.push((step, positions));
        Ok(())
    }

    pub fn snapshots(&self) -> &[(usize, Tensor)] {
        &self.snapshots
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,code,x,y")?;
        for (step, pos) in &self.snapshots {
            for i in 0..pos.rows() {
                let r = pos.row(i);
                writeln!(w, "{step},{i},{},{}", r[0], r[1])?;
            }
        }
        Ok(())
    }
}

/// One evaluation of a tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub quant_err: f64,
    pub psnr: f64,
    /// `None` when the evaluated items are not images.
    pub ssim: Option<f64>,
    pub utilization: f64,
    /// Mean norm of the residual left after each level.
    pub residual_norms: Vec<f64>,
}

impl MetricsRecord {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| crate::Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
        Ok(())
    }
}
