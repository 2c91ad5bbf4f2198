//! Training objectives: reconstruction, soft/hard commitment, and the
//! sharpness-minus-diversity entropy penalty, aggregated over residual levels.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkit::{Real, Tape, Var};

/// Weights of the combined objective.
///
/// `lambda_p` (perceptual) and `lambda_adv` (adversarial) are kept for
/// completeness and must stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub lambda_adv: f64,
    pub lambda_e: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.0,
            lambda_q: 1.0,
            lambda_adv: 0.0,
            lambda_e: 0.1,
            beta: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_q", self.lambda_q),
            ("lambda_adv", self.lambda_adv),
            ("lambda_e", self.lambda_e),
            ("beta", self.beta),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                "{name} must be a non-negative number, got {v}"
            );
        }
        ensure!(
            self.lambda_p == 0.0 && self.lambda_adv == 0.0,
            "perceptual and adversarial terms are not supported; lambda_p and lambda_adv must be 0"
        );
        Ok(())
    }
}

/// Scalar summary of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rec: f64,
    pub quant_per_level: Vec<f64>,
    pub entropy_per_level: Vec<f64>,
}

/// Mean squared reconstruction error.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    tape.mean_squared_error(x_hat, x)
}

/// `mse(sg[z_hard], f) + β·mse(z_hard, sg[f]) + mse(z_soft, f)`.
///
/// `f` only learns from the first and last terms; `z_hard` only from the
/// second. Levels without a soft read-out drop the last term.
pub fn quant_loss<T: Real>(tape: &mut Tape<T>, f: Var, z_hard: Var, z_soft: Option<Var>, beta: f64) -> Result<Var> {
    ensure!(beta >= 0.0, "beta must be non-negative");
    ensure!(
        tape.shape(f) == tape.shape(z_hard),
        "quant_loss shape mismatch: {:?} vs {:?}",
        tape.shape(f),
        tape.shape(z_hard)
    );
    let z_fixed = tape.stop_gradient(z_hard);
    let f_fixed = tape.stop_gradient(f);
    let commit = tape.mean_squared_error(f, z_fixed)?;
    let codebook = tape.mean_squared_error(z_hard, f_fixed)?;
    let codebook = tape.scale(codebook, beta)?;
    let mut total = tape.add(commit, codebook)?;
    if let Some(z_soft) = z_soft {
        let soft = tape.mean_squared_error(z_soft, f)?;
        total = tape.add(total, soft)?;
    }
    Ok(total)
}

/// Mean per-row entropy minus entropy of the batch-mean row; lower is
/// sharper and more diverse. Bounded in `[−log n, log n]`.
pub fn entropy_loss<T: Real>(tape: &mut Tape<T>, attention: Var) -> Result<Var> {
    tape.entropy_penalty(attention)
}

/// Per-level loss nodes feeding [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossParts {
    pub rec: Var,
    pub quant: Vec<Var>,
    /// `None` for levels without an attention distribution.
    pub entropy: Vec<Option<Var>>,
}

/// `rec + λ_q Σ quant + λ_e Σ entropy` on the tape, plus its report.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossReport)> {
    weights.validate()?;
    ensure!(
        parts.quant.len() == parts.entropy.len(),
        "per-level loss lists differ in length: {} vs {}",
        parts.quant.len(),
        parts.entropy.len()
    );
    let value = |tape: &Tape<T>, v: Var| tape.value(v).values()[0].as_f64();
    let mut total = parts.rec;
    for &q in &parts.quant {
        let w = tape.scale(q, weights.lambda_q)?;
        total = tape.add(total, w)?;
    }
    for e in parts.entropy.iter().flatten() {
        let w = tape.scale(*e, weights.lambda_e)?;
        total = tape.add(total, w)?;
    }
    let quant: Vec<f64> = parts.quant.iter().map(|&q| value(tape, q)).collect();
    let entropy: Vec<f64> = parts
        .entropy
        .iter()
        .map(|e| e.map_or(0.0, |e| value(tape, e)))
        .collect();
    let report = combine(value(tape, parts.rec), quant, entropy, weights)?;
    Ok((total, report))
}

/// Combines already-evaluated parts into a [`LossReport`].
pub fn combine(rec: f64, quant: Vec<f64>, entropy: Vec<f64>, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    ensure!(
        quant.len() == entropy.len(),
        "per-level loss lists differ in length: {} vs {}",
        quant.len(),
        entropy.len()
    );
    let total = rec + weights.lambda_q * quant.iter().sum::<f64>() + weights.lambda_e * entropy.iter().sum::<f64>();
    Ok(LossReport {
        total,
        rec,
        quant_per_level: quant,
        entropy_per_level: entropy,
    })
}
