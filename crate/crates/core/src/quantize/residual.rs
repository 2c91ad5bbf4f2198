use super::attention::{AttentionQuantizer, ProjectedCodes};
use super::grid::CodeGrid;
use super::vq::vq_assign_on_tape;
use crate::codebook::Codebook;
use crate::error::{ensure, Result};
use crate::numkit::{Tape, Tensor, Var};

/// How each residual level picks its code.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Assigner {
    /// Nearest neighbor by Euclidean distance.
    Vq,
    /// Attention retrieval, weights shared across levels.
    Attention(AttentionQuantizer),
}

/// Outcome of one assignment, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRecord {
    /// `m × n` retrieval distribution; `None` for nearest-neighbor levels.
    pub attention: Option<Tensor>,
    pub hard_indices: Vec<usize>,
    pub z_hard: Tensor,
    pub z_soft: Option<Tensor>,
}

/// Tape nodes of one residual level.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub indices: Vec<usize>,
    /// Residual fed to this level.
    pub input: Var,
    pub z_hard: Var,
    pub z_soft: Option<Var>,
    pub attention: Option<Var>,
}

/// Tape nodes of a full residual encode.
#[derive(Debug, Clone)]
pub struct RqTrace {
    pub levels: Vec<LevelTrace>,
    pub final_residual: Var,
}

impl RqTrace {
    /// `Σ_l z_hard^(l)` as a tape node.
    pub fn decoded(&self, tape: &mut Tape) -> Result<Var> {
        let mut acc = self.levels[0].z_hard;
        for level in &self.levels[1..] {
            acc = tape.add(acc, level.z_hard)?;
        }
        Ok(acc)
    }
}

/// Result of [`rq_encode`].
#[derive(Debug, Clone)]
pub struct RqEncoding {
    /// `levels × m` code indices.
    pub indices: Vec<Vec<u32>>,
    pub per_level_z: Vec<Tensor>,
    pub final_residual: Tensor,
    pub records: Vec<AssignmentRecord>,
}

impl RqEncoding {
    pub fn decode(&self) -> Result<Tensor> {
        rq_decode(&self.per_level_z)
    }

    /// Splits the `m` positions into `m / (h·w)` grids of `h × w`.
    pub fn grids(&self, h: usize, w: usize, n: usize) -> Result<Vec<CodeGrid>> {
        split_grids(&self.indices, h, w, n)
    }
}

pub(crate) fn split_grids(indices: &[Vec<u32>], h: usize, w: usize, n: usize) -> Result<Vec<CodeGrid>> {
    let hw = h * w;
    let m = indices.first().map_or(0, |l| l.len());
    ensure!(
        hw > 0 && m.is_multiple_of(hw),
        "{m} positions do not tile into {h}×{w} grids"
    );
    let levels = indices.len();
    (0..m / hw)
        .map(|b| {
            let mut flat = Vec::with_capacity(levels * hw);
            for level in indices {
                flat.extend_from_slice(&level[b * hw..(b + 1) * hw]);
            }
            CodeGrid::new(levels, h, w, n, flat)
        })
        .collect()
}

/// Residual quantizer with `levels` rounds of assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualQuantizer {
    levels: usize,
    codebooks: Vec<Codebook>,
    assigner: Assigner,
}

impl ResidualQuantizer {
    /// One codebook shared by every level.
    pub fn new(levels: usize, codebook: Codebook, assigner: Assigner) -> Result<Self> {
        Self::build(levels, vec![codebook], assigner)
    }

    /// One codebook per level.
    pub fn with_level_codebooks(levels: usize, codebooks: Vec<Codebook>, assigner: Assigner) -> Result<Self> {
        ensure!(
            codebooks.len() == levels,
            "need {levels} per-level codebooks, got {}",
            codebooks.len()
        );
        Self::build(levels, codebooks, assigner)
    }

    fn build(levels: usize, codebooks: Vec<Codebook>, assigner: Assigner) -> Result<Self> {
        ensure!(levels >= 1, "residual quantizer needs at least one level");
        let n = codebooks[0].n();
        let d = codebooks[0].d();
        ensure!(
            codebooks.iter().all(|c| c.n() == n && c.d() == d),
            "all codebooks must share size and dimension"
        );
        if let Assigner::Attention(q) = &assigner {
            ensure!(
                q.d_code() == d,
                "codebook dimension {d} does not match quantizer code dimension {}",
                q.d_code()
            );
        }
        Ok(Self {
            levels,
            codebooks,
            assigner,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn shared_codebook(&self) -> bool {
        self.codebooks.len() == 1
    }

    pub fn codebook(&self, level: usize) -> &Codebook {
        &self.codebooks[if self.shared_codebook() { 0 } else { level }]
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.codebooks
    }

    pub fn assigner(&self) -> &Assigner {
        &self.assigner
    }

    pub fn assigner_mut(&mut self) -> &mut Assigner {
        &mut self.assigner
    }

    pub fn n(&self) -> usize {
        self.codebooks[0].n()
    }

    /// Dimension of the features being quantized.
    pub fn feature_dim(&self) -> usize {
        match &self.assigner {
            Assigner::Vq => self.codebooks[0].d(),
            Assigner::Attention(q) => q.d_in(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, cb) in self.codebooks.iter().enumerate() {
            out.push((format!("quantizer.codebook.{i}"), cb.embeddings()));
        }
        if let Assigner::Attention(q) = &self.assigner {
            for (name, t) in q.params() {
                out.push((format!("quantizer.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, cb) in self.codebooks.iter_mut().enumerate() {
            out.push((format!("quantizer.codebook.{i}"), cb.embeddings_mut()));
        }
        if let Assigner::Attention(q) = &mut self.assigner {
            for (name, t) in q.params_mut() {
                out.push((format!("quantizer.{name}"), t));
            }
        }
        out
    }

    /// Runs the residual recursion on the tape: level `l` assigns `ε_l` and
    /// passes on `ε_{l+1} = ε_l − sg[z^(l)]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, f: Var, temperature: f64) -> Result<RqTrace> {
        ensure!(
            tape.shape(f).len() == 2 && tape.shape(f)[1] == self.feature_dim(),
            "features of shape {:?} do not match quantizer dimension {}",
            tape.shape(f),
            self.feature_dim()
        );
        let code_vars: Vec<Var> = self.codebooks.iter().map(|c| tape.leaf(c.embeddings())).collect();
        let projected: Vec<ProjectedCodes> = match &self.assigner {
            Assigner::Vq => Vec::new(),
            Assigner::Attention(q) => code_vars
                .iter()
                .map(|&c| q.project_codes(tape, c))
                .collect::<Result<_>>()?,
        };
        let book = |l: usize| if self.shared_codebook() { 0 } else { l };

        let mut residual = f;
        let mut levels = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            let trace = match &self.assigner {
                Assigner::Vq => {
                    let (indices, z_hard) = vq_assign_on_tape(tape, residual, code_vars[book(l)])?;
                    LevelTrace {
                        indices,
                        input: residual,
                        z_hard,
                        z_soft: None,
                        attention: None,
                    }
                }
                Assigner::Attention(q) => {
                    let parts = q.assign_on_tape(tape, residual, &projected[book(l)], temperature)?;
                    LevelTrace {
                        indices: parts.indices,
                        input: residual,
                        z_hard: parts.z_hard,
                        z_soft: Some(parts.z_soft),
                        attention: Some(parts.attention),
                    }
                }
            };
            let z_fixed = tape.stop_gradient(trace.z_hard);
            residual = tape.sub(residual, z_fixed)?;
            levels.push(trace);
        }
        Ok(RqTrace {
            levels,
            final_residual: residual,
        })
    }
}

/// Residual encode of the rows of `f`.
pub fn rq_encode(f: &Tensor, rq: &ResidualQuantizer, temperature: f64) -> Result<RqEncoding> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let trace = rq.encode_on_tape(&mut tape, fv, temperature)?;
    let mut indices = Vec::with_capacity(rq.levels());
    let mut per_level_z = Vec::with_capacity(rq.levels());
    let mut records = Vec::with_capacity(rq.levels());
    for level in &trace.levels {
        indices.push(level.indices.iter().map(|&i| i as u32).collect());
        let z_hard = tape.value(level.z_hard).clone();
        per_level_z.push(z_hard.clone());
        records.push(AssignmentRecord {
            attention: level.attention.map(|a| tape.value(a).clone()),
            hard_indices: level.indices.clone(),
            z_hard,
            z_soft: level.z_soft.map(|z| tape.value(z).clone()),
        });
    }
    Ok(RqEncoding {
        indices,
        per_level_z,
        final_residual: tape.value(trace.final_residual).clone(),
        records,
    })
}

/// Element-wise sum over levels.
pub fn rq_decode(per_level: &[Tensor]) -> Result<Tensor> {
    ensure!(!per_level.is_empty(), "rq_decode needs at least one level");
    let shape = per_level[0].shape();
    ensure!(
        per_level.iter().all(|z| z.shape() == shape),
        "rq_decode levels must share a shape"
    );
    let mut acc = vec![0.0f64; per_level[0].numel()];
    for z in per_level {
        for (a, &v) in acc.iter_mut().zip(z.values()) {
            *a += v as f64;
        }
    }
    Tensor::new(shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::InitScheme;
    use crate::quantize::{attn_assign, vq_assign, NormKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ternary() -> Codebook {
        Codebook::from_embeddings(Tensor::matrix(3, 1, vec![-1.0, 0.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn hand_recursion_on_ternary_codebook() {
        let rq = ResidualQuantizer::new(2, ternary(), Assigner::Vq).unwrap();
        let f = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let enc = rq_encode(&f, &rq, 1.0).unwrap();
        assert_eq!(enc.indices, vec![vec![2], vec![1]]);
        assert_eq!(enc.decode().unwrap().values(), &[1.0]);
        assert!((enc.final_residual.values()[0] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn exact_hit_then_zero_codes() {
        let rq = ResidualQuantizer::new(4, ternary(), Assigner::Vq).unwrap();
        let f = Tensor::matrix(1, 1, vec![-1.0]).unwrap();
        let enc = rq_encode(&f, &rq, 1.0).unwrap();
        assert_eq!(enc.indices, vec![vec![0], vec![1], vec![1], vec![1]]);
        assert_eq!(enc.final_residual.values(), &[0.0]);
    }

    #[test]
    fn single_level_matches_direct_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = Codebook::init(32, 4, InitScheme::Gaussian, 1, None).unwrap();
        let f = Tensor::randn(vec![20, 4], 1.0, &mut rng);

        let rq = ResidualQuantizer::new(1, cb.clone(), Assigner::Vq).unwrap();
        let enc = rq_encode(&f, &rq, 1.0).unwrap();
        let (idx, z) = vq_assign(&f, &cb).unwrap();
        assert_eq!(enc.records[0].hard_indices, idx);
        assert_eq!(enc.per_level_z[0], z);

        let q = AttentionQuantizer::new(4, 4, 4, NormKind::Rms, 2).unwrap();
        let rq = ResidualQuantizer::new(1, cb.clone(), Assigner::Attention(q.clone())).unwrap();
        let enc = rq_encode(&f, &rq, 0.5).unwrap();
        assert_eq!(enc.records[0], attn_assign(&f, &cb, &q, 0.5).unwrap());
    }

    #[test]
    fn decode_cases() {
        let z = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(rq_decode(std::slice::from_ref(&z)).unwrap(), z);
        let mut neg = z.clone();
        neg.values_mut().iter_mut().for_each(|v| *v = -*v);
        assert_eq!(rq_decode(&[z, neg]).unwrap(), Tensor::zeros(vec![2, 2]));
        assert!(rq_decode(&[]).is_err());
    }

    #[test]
    fn zero_levels_rejected() {
        assert!(ResidualQuantizer::new(0, ternary(), Assigner::Vq).is_err());
    }

    #[test]
    fn grids_split_batches() {
        let enc = RqEncoding {
            indices: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            per_level_z: vec![],
            final_residual: Tensor::zeros(vec![1]),
            records: vec![],
        };
        let grids = enc.grids(1, 2, 8).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[1].indices(), &[2, 3, 6, 7]);
        assert!(enc.grids(3, 1, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn decomposition_identity(seed in any::<u64>(), levels in 1usize..6, attention in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::from_embeddings(Tensor::randn(vec![24, 3], 0.7, &mut rng)).unwrap();
            let assigner = if attention {
                Assigner::Attention(AttentionQuantizer::new(3, 3, 3, NormKind::Rms, seed).unwrap())
            } else {
                Assigner::Vq
            };
            let rq = ResidualQuantizer::new(levels, cb, assigner).unwrap();
            let f = Tensor::randn(vec![16, 3], 1.0, &mut rng);
            let enc = rq_encode(&f, &rq, 1.0).unwrap();
            let decoded = enc.decode().unwrap();
            for ((&fi, &zi), &ri) in f.values().iter().zip(decoded.values()).zip(enc.final_residual.values()) {
                prop_assert!((fi - (zi + ri)).abs() <= 1e-5);
            }
        }

        #[test]
        fn vq_residual_norms_do_not_grow_with_zero_code(seed in any::<u64>(), levels in 1usize..6) {
            // A zero code guarantees each level can at worst keep the residual.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = Tensor::randn(vec![16, 3], 0.7, &mut rng);
            c.values_mut()[..3].fill(0.0);
            let rq = ResidualQuantizer::new(levels, Codebook::from_embeddings(c).unwrap(), Assigner::Vq).unwrap();
            let f = Tensor::randn(vec![10, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let fv = tape.constant(f);
            let trace = rq.encode_on_tape(&mut tape, fv, 1.0).unwrap();
            let mut inputs: Vec<Var> = trace.levels.iter().map(|l| l.input).collect();
            inputs.push(trace.final_residual);
            for w in inputs.windows(2) {
                let (a, b) = (tape.value(w[0]), tape.value(w[1]));
                for i in 0..a.rows() {
                    let na: f32 = a.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                    let nb: f32 = b.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                    prop_assert!(nb <= na + 1e-6);
                }
            }
        }
    }
}
