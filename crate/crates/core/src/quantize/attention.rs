use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::residual::AssignmentRecord;
use crate::codebook::Codebook;
use crate::error::{ensure, Result};
use crate::numkit::kernels::argmax;
use crate::numkit::{Tape, Tensor, Var};

/// Row normalization applied to projected queries and keys.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Rms,
    Layer,
    None,
}

/// Learnable retrieval quantizer: features and codes are projected, row
/// normalized, and compared by scaled dot product; the winning code is read
/// out through a value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionQuantizer {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    norm: NormKind,
}

/// Keys and values of a codebook under one quantizer.
#[derive(Debug, Copy, Clone)]
pub(crate) struct ProjectedCodes {
    pub keys_t: Var,
    pub values: Var,
}

/// Tape nodes produced by one attention assignment.
#[derive(Debug, Clone)]
pub(crate) struct AttentionParts {
    pub indices: Vec<usize>,
    pub attention: Var,
    pub z_hard: Var,
    pub z_soft: Var,
}

impl AttentionQuantizer {
    /// Gaussian weights with variance `1/d_in`.
    pub fn new(d_in: usize, d_code: usize, d_att: usize, norm: NormKind, seed: u64) -> Result<Self> {
        ensure!(
            d_in > 0 && d_code > 0 && d_att > 0,
            "attention quantizer dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / d_in as f64).sqrt();
        Self::from_weights(
            Tensor::randn(vec![d_in, d_att], std, &mut rng),
            Tensor::randn(vec![d_code, d_att], std, &mut rng),
            Tensor::randn(vec![d_code, d_in], std, &mut rng),
            norm,
        )
    }

    /// Projections that start as (padded) identities, so scores begin as
    /// cosine similarity between features and raw codes and values are the
    /// codes themselves. Needs `d_in == d_code`.
    pub fn identity(d: usize, d_att: usize, norm: NormKind) -> Result<Self> {
        ensure!(d > 0 && d_att > 0, "attention quantizer dimensions must be positive");
        let eye = |rows: usize, cols: usize| {
            let mut v = vec![0.0; rows * cols];
            for i in 0..rows.min(cols) {
                v[i * cols + i] = 1.0;
            }
            Tensor::matrix(rows, cols, v)
        };
        Self::from_weights(eye(d, d_att)?, eye(d, d_att)?, eye(d, d)?, norm)
    }

    pub fn from_weights(w_q: Tensor, w_k: Tensor, w_v: Tensor, norm: NormKind) -> Result<Self> {
        ensure!(
            w_q.is_matrix() && w_k.is_matrix() && w_v.is_matrix(),
            "attention weights must be matrices"
        );
        ensure!(
            w_q.cols() == w_k.cols(),
            "W_q and W_k must share the attention dimension: {:?} vs {:?}",
            w_q.shape(),
            w_k.shape()
        );
        ensure!(
            w_v.rows() == w_k.rows(),
            "W_v and W_k must share the code dimension: {:?} vs {:?}",
            w_v.shape(),
            w_k.shape()
        );
        ensure!(
            w_v.cols() == w_q.rows(),
            "value output dimension {} must equal feature dimension {}",
            w_v.cols(),
            w_q.rows()
        );
        Ok(Self { w_q, w_k, w_v, norm })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_code(&self) -> usize {
        self.w_k.rows()
    }

    pub fn d_att(&self) -> usize {
        self.w_q.cols()
    }

    pub fn norm(&self) -> NormKind {
        self.norm
    }

    pub fn set_norm(&mut self, norm: NormKind) {
        self.norm = norm;
    }

    pub fn w_q(&self) -> &Tensor {
        &self.w_q
    }

    pub fn w_k(&self) -> &Tensor {
        &self.w_k
    }

    pub fn w_v(&self) -> &Tensor {
        &self.w_v
    }

    /// `(name, tensor)` for `W_q`, `W_k`, `W_v`.
    pub fn params(&self) -> [(&'static str, &Tensor); 3] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)]
    }

    fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.norm {
            NormKind::Rms => tape.rms_normalize(x),
            NormKind::Layer => tape.layer_normalize(x),
            NormKind::None => Ok(x),
        }
    }

    /// Transposed normalized keys and the value-projected codebook.
    pub(crate) fn project_codes(&self, tape: &mut Tape, codes: Var) -> Result<ProjectedCodes> {
        ensure!(
            tape.shape(codes).get(1) == Some(&self.d_code()),
            "codebook dimension {:?} does not match quantizer code dimension {}",
            tape.shape(codes),
            self.d_code()
        );
        let w_k = tape.leaf(&self.w_k);
        let w_v = tape.leaf(&self.w_v);
        let k = tape.matmul(codes, w_k)?;
        let k = self.normalize(tape, k)?;
        let keys_t = tape.transpose(k)?;
        let values = tape.matmul(codes, w_v)?;
        Ok(ProjectedCodes { keys_t, values })
    }

    /// Pre-softmax similarity `norm(F·W_q) · norm(C·W_k)ᵀ`, without the
    /// temperature and `√d_att` scaling.
    pub(crate) fn scores_on_tape(&self, tape: &mut Tape, f: Var, codes: &ProjectedCodes) -> Result<Var> {
        ensure!(
            tape.shape(f).get(1) == Some(&self.d_in()),
            "feature dimension {:?} does not match quantizer input dimension {}",
            tape.shape(f),
            self.d_in()
        );
        let w_q = tape.leaf(&self.w_q);
        let q = tape.matmul(f, w_q)?;
        let q = self.normalize(tape, q)?;
        tape.matmul(q, codes.keys_t)
    }

    pub(crate) fn assign_on_tape(
        &self,
        tape: &mut Tape,
        f: Var,
        codes: &ProjectedCodes,
        temperature: f64,
    ) -> Result<AttentionParts> {
        ensure!(
            temperature > 0.0 && temperature.is_finite(),
            "temperature must be positive, got {temperature}"
        );
        let scores = self.scores_on_tape(tape, f, codes)?;
        let n = tape.value(scores).cols();
        let indices: Vec<usize> = tape.value(scores).values().chunks(n).map(argmax).collect();
        let logits = tape.scale(scores, 1.0 / (temperature * (self.d_att() as f64).sqrt()))?;
        let attention = tape.softmax_rows(logits)?;
        let z_hard = tape.gather_rows(codes.values, &indices)?;
        let z_soft = tape.matmul(attention, codes.values)?;
        Ok(AttentionParts {
            indices,
            attention,
            z_hard,
            z_soft,
        })
    }

    /// Raw similarity scores for a batch of features.
    pub fn scores(&self, f: &Tensor, codebook: &Codebook) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let cv = tape.constant(codebook.embeddings().clone());
        let codes = self.project_codes(&mut tape, cv)?;
        let s = self.scores_on_tape(&mut tape, fv, &codes)?;
        Ok(tape.value(s).clone())
    }
}

/// Attention-based assignment of the rows of `f`.
pub fn attn_assign(
    f: &Tensor,
    codebook: &Codebook,
    q: &AttentionQuantizer,
    temperature: f64,
) -> Result<AssignmentRecord> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let cv = tape.constant(codebook.embeddings().clone());
    let codes = q.project_codes(&mut tape, cv)?;
    let parts = q.assign_on_tape(&mut tape, fv, &codes, temperature)?;
    Ok(AssignmentRecord {
        attention: Some(tape.value(parts.attention).clone()),
        hard_indices: parts.indices,
        z_hard: tape.value(parts.z_hard).clone(),
        z_soft: Some(tape.value(parts.z_soft).clone()),
    })
}
