//! Masked-token generator over code grids: MLM training and
//! confidence-scheduled parallel decoding.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkit::kernels::{argmax, softmax_into};
use crate::numkit::{Real, Tape, Tensor, Var};
use crate::optim::{Optimizer, OptimizerKind};
use crate::quantize::CodeGrid;

/// Architecture of a [`GeneratorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorShape {
    pub d_model: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    /// Number of classes; 0 disables conditioning.
    pub classes: usize,
}

impl Default for GeneratorShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            ff_dim: 64,
            blocks: 2,
            classes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    w_1: Tensor,
    b_1: Tensor,
    w_2: Tensor,
    b_2: Tensor,
}

impl Block {
    fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(vec![r, c], (1.0 / r as f64).sqrt(), rng).with_requires_grad(true)
        };
        Self {
            w_q: m(d, d, rng),
            w_k: m(d, d, rng),
            w_v: m(d, d, rng),
            w_o: m(d, d, rng),
            w_1: m(d, ff, rng),
            b_1: Tensor::zeros(vec![ff]).with_requires_grad(true),
            w_2: m(ff, d, rng),
            b_2: Tensor::zeros(vec![d]).with_requires_grad(true),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("w_1", &mut self.w_1),
            ("b_1", &mut self.b_1),
            ("w_2", &mut self.w_2),
            ("b_2", &mut self.b_2),
        ]
    }

    /// Pre-norm single-head attention and feed-forward, both residual.
    fn forward(&self, tape: &mut Tape, x: Var, d: usize) -> Result<Var> {
        let h = tape.rms_normalize(x)?;
        let wq = tape.leaf(&self.w_q);
        let wk = tape.leaf(&self.w_k);
        let wv = tape.leaf(&self.w_v);
        let wo = tape.leaf(&self.w_o);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
        let a = tape.softmax_rows(s)?;
        let ctx = tape.matmul(a, v)?;
        let o = tape.matmul(ctx, wo)?;
        let x = tape.add(x, o)?;

        let h = tape.rms_normalize(x)?;
        let w1 = tape.leaf(&self.w_1);
        let b1 = tape.leaf(&self.b_1);
        let w2 = tape.leaf(&self.w_2);
        let b2 = tape.leaf(&self.b_2);
        let u = tape.matmul(h, w1)?;
        let u = tape.add_row(u, b1)?;
        let u = tape.silu(u)?;
        let u = tape.matmul(u, w2)?;
        let u = tape.add_row(u, b2)?;
        tape.add(x, u)
    }
}

/// Bidirectional transformer over a flattened, level-major code grid.
/// Token id `n` is the MASK symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    n: usize,
    levels: usize,
    h: usize,
    w: usize,
    shape: GeneratorShape,
    tok_emb: Tensor,
    level_emb: Tensor,
    spatial_emb: Tensor,
    class_emb: Option<Tensor>,
    blocks: Vec<Block>,
    out_w: Tensor,
    out_b: Tensor,
}

impl GeneratorModel {
    pub fn new(n: usize, levels: usize, h: usize, w: usize, shape: &GeneratorShape, seed: u64) -> Result<Self> {
        ensure!(
            n >= 1 && levels >= 1 && h >= 1 && w >= 1,
            "generator grid dimensions must be positive"
        );
        ensure!(
            shape.d_model >= 1 && shape.ff_dim >= 1,
            "generator widths must be positive"
        );
        let d = shape.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = |rows: usize, rng: &mut ChaCha8Rng| Tensor::randn(vec![rows, d], 1.0, rng).with_requires_grad(true);
        let tok_emb = emb(n + 1, &mut rng);
        let level_emb = emb(levels, &mut rng);
        let spatial_emb = emb(h * w, &mut rng);
        let class_emb = (shape.classes > 0).then(|| emb(shape.classes, &mut rng));
        let blocks = (0..shape.blocks)
            .map(|_| Block::init(d, shape.ff_dim, &mut rng))
            .collect();
        let out_w = Tensor::randn(vec![d, n], (1.0 / d as f64).sqrt(), &mut rng).with_requires_grad(true);
        let out_b = Tensor::zeros(vec![n]).with_requires_grad(true);
        Ok(Self {
            n,
            levels,
            h,
            w,
            shape: shape.clone(),
            tok_emb,
            level_emb,
            spatial_emb,
            class_emb,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mask_id(&self) -> u32 {
        self.n as u32
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

    pub fn shape(&self) -> &GeneratorShape {
        &self.shape
    }

    pub fn seq_len(&self) -> usize {
        self.levels * self.h * self.w
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("gen.tok_emb".to_string(), &self.tok_emb),
            ("gen.level_emb".to_string(), &self.level_emb),
            ("gen.spatial_emb".to_string(), &self.spatial_emb),
        ];
        if let Some(c) = &self.class_emb {
            out.push(("gen.class_emb".to_string(), c));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("gen.block.{i}.{name}"), t));
            }
        }
        out.push(("gen.out.weight".to_string(), &self.out_w));
        out.push(("gen.out.bias".to_string(), &self.out_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("gen.tok_emb".to_string(), &mut self.tok_emb),
            ("gen.level_emb".to_string(), &mut self.level_emb),
            ("gen.spatial_emb".to_string(), &mut self.spatial_emb),
        ];
        if let Some(c) = &mut self.class_emb {
            out.push(("gen.class_emb".to_string(), c));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("gen.block.{i}.{name}"), t));
            }
        }
        out.push(("gen.out.weight".to_string(), &mut self.out_w));
        out.push(("gen.out.bias".to_string(), &mut self.out_b));
        out
    }

    /// `seq_len × n` logits for a token sequence that may contain MASK.
    pub fn logits_on_tape(&self, tape: &mut Tape, tokens: &[u32], class: Option<usize>) -> Result<Var> {
        let s = self.seq_len();
        ensure!(tokens.len() == s, "generator expects {s} tokens, got {}", tokens.len());
        ensure!(
            tokens.iter().all(|&t| (t as usize) <= self.n),
            "token outside vocabulary of {} (+MASK)",
            self.n
        );
        let hw = self.h * self.w;
        let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let level_idx: Vec<usize> = (0..s).map(|p| p / hw).collect();
        let pos_idx: Vec<usize> = (0..s).map(|p| p % hw).collect();
        let te = tape.leaf(&self.tok_emb);
        let le = tape.leaf(&self.level_emb);
        let pe = tape.leaf(&self.spatial_emb);
        let a = tape.gather_rows(te, &tok_idx)?;
        let b = tape.gather_rows(le, &level_idx)?;
        let c = tape.gather_rows(pe, &pos_idx)?;
        let x = tape.add(a, b)?;
        let mut x = tape.add(x, c)?;
        let conditioned = match (class, &self.class_emb) {
            (Some(k), Some(table)) => {
                ensure!(k < table.rows(), "class {k} outside {} classes", table.rows());
                let ce = tape.leaf(table);
                let row = tape.gather_rows(ce, &[k])?;
                x = tape.concat_rows(&[row, x])?;
                true
            }
            (Some(_), None) => return Err(crate::Error::contract("model was built without class conditioning")),
            (None, _) => false,
        };
        for block in &self.blocks {
            x = block.forward(tape, x, self.shape.d_model)?;
        }
        let h = tape.rms_normalize(x)?;
        let w = tape.leaf(&self.out_w);
        let b = tape.leaf(&self.out_b);
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_row(logits, b)?;
        if conditioned {
            let keep: Vec<usize> = (1..=s).collect();
            tape.gather_rows(logits, &keep)
        } else {
            Ok(logits)
        }
    }

    /// Detached logits for one sequence.
    pub fn logits(&self, tokens: &[u32], class: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = self.logits_on_tape(&mut tape, tokens, class)?;
        Ok(tape.value(l).clone())
    }

    fn check_grid(&self, grid: &CodeGrid) -> Result<()> {
        ensure!(
            grid.levels() == self.levels && grid.h() == self.h && grid.w() == self.w && grid.n() == self.n,
            "grid {}×{}×{} over {} codes does not match generator {}×{}×{} over {}",
            grid.levels(),
            grid.h(),
            grid.w(),
            grid.n(),
            self.levels,
            self.h,
            self.w,
            self.n
        );
        Ok(())
    }
}

/// A grid with some positions replaced by MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedGrid {
    pub tokens: Vec<u32>,
    /// Masked positions, ascending.
    pub mask: Vec<usize>,
}

/// Masks exactly `ceil(ratio · len)` positions chosen uniformly without
/// replacement.
pub fn mask_tokens(codes: &CodeGrid, ratio: f64, seed: u64) -> Result<MaskedGrid> {
    ensure!(ratio > 0.0 && ratio <= 1.0, "mask ratio must be in (0, 1], got {ratio}");
    let total = codes.len();
    ensure!(total > 0, "cannot mask an empty grid");
    let count = ((ratio * total as f64).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = rand::seq::index::sample(&mut rng, total, count).into_vec();
    mask.sort_unstable();
    let mask_id = codes.n() as u32;
    let mut tokens = codes.indices().to_vec();
    for &p in &mask {
        tokens[p] = mask_id;
    }
    Ok(MaskedGrid { tokens, mask })
}

/// Mean over masked positions of `−log softmax(logits)[target]`.
pub fn mlm_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy_rows(logits, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl ScheduleKind {
    /// Fraction still masked at progress `u ∈ [0, 1]`.
    fn gamma(self, u: f64) -> f64 {
        match self {
            ScheduleKind::Cosine => (FRAC_PI_2 * u).cos(),
            ScheduleKind::Linear => 1.0 - u,
        }
    }
}

/// Number of tokens unmasked at each decoding step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    counts: Vec<usize>,
}

impl DecodeSchedule {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        ensure!(!counts.is_empty(), "schedule needs at least one step");
        ensure!(counts.iter().all(|&c| c > 0), "schedule counts must be positive");
        Ok(Self { counts })
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Masked count remaining after each step.
    pub fn masked_trajectory(&self) -> Vec<usize> {
        let mut left = self.total();
        self.counts
            .iter()
            .map(|&c| {
                left -= c;
                left
            })
            .collect()
    }
}

/// Step counts from the masking curve: after step `t`, `total −
/// floor(total·γ(t/T))` tokens are unmasked.
///
/// The raw differences can dip (the floor makes them jitter) or hit zero
/// for small totals, so they are sorted ascending and any zero step borrows
/// one token from the largest step.
pub fn build_schedule(steps: usize, total: usize, kind: ScheduleKind) -> Result<DecodeSchedule> {
    ensure!(steps >= 1, "schedule needs at least one step");
    ensure!(
        steps <= total,
        "schedule of {steps} steps cannot unmask {total} tokens one step at a time"
    );
    let unmasked = |t: usize| {
        let g = kind.gamma(t as f64 / steps as f64);
        total - ((total as f64 * g + 1e-9).floor() as usize).min(total)
    };
    let mut counts: Vec<usize> = (1..=steps).map(|t| unmasked(t) - unmasked(t - 1)).collect();
    counts.sort_unstable();
    while let Some(z) = counts.iter().position(|&c| c == 0) {
        let last = counts.len() - 1;
        counts[last] -= 1;
        counts[z] += 1;
        counts.sort_unstable();
    }
    DecodeSchedule::from_counts(counts)
}

/// Options of [`decode_iterative`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Sampling temperature; 0 takes the argmax.
    pub temperature: f64,
    /// Unmask lower levels before higher ones.
    pub level_sequential: bool,
    pub class: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            level_sequential: false,
            class: None,
        }
    }
}

/// Decoded grid plus the masked count after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub grid: CodeGrid,
    pub masked_after_step: Vec<usize>,
    /// Step at which each position was unmasked.
    pub fixed_at_step: Vec<usize>,
}

/// Starts fully masked; each step samples every masked position and keeps
/// the scheduled number of most confident samples.
pub fn decode_iterative(
    model: &GeneratorModel,
    schedule: &DecodeSchedule,
    options: &DecodeOptions,
    seed: u64,
) -> Result<DecodeTrace> {
    let total = model.seq_len();
    ensure!(
        schedule.total() == total,
        "schedule unmasks {} tokens, grid has {total}",
        schedule.total()
    );
    ensure!(
        options.temperature >= 0.0 && options.temperature.is_finite(),
        "temperature must be non-negative"
    );
    let hw = model.h() * model.w();
    let mask_id = model.mask_id();
    let mut tokens = vec![mask_id; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_after_step = Vec::with_capacity(schedule.steps());
    let n = model.n();
    let mut probs = vec![0.0f32; n];
    let mut fixed_at_step = vec![0; total];
    for (step, &count) in schedule.counts().iter().enumerate() {
        let logits = model.logits(&tokens, options.class)?;
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (p, &tok) in tokens.iter().enumerate() {
            if tok != mask_id {
                continue;
            }
            let row = logits.row(p);
            let (choice, confidence) = if options.temperature == 0.0 {
                softmax_into(row, &mut probs);
                let k = argmax(row);
                (k, probs[k] as f64)
            } else {
                let scaled: Vec<f32> = row.iter().map(|&v| (v as f64 / options.temperature) as f32).collect();
                softmax_into(&scaled, &mut probs);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = n - 1;
                for (j, &pj) in probs.iter().enumerate() {
                    acc += pj as f64;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                (k, probs[k] as f64)
            };
            candidates.push((p, choice as u32, confidence));
        }
        candidates.sort_by(|a, b| {
            let level = |p: usize| if options.level_sequential { p / hw } else { 0 };
            level(a.0)
                .cmp(&level(b.0))
                .then(b.2.total_cmp(&a.2))
                .then(a.0.cmp(&b.0))
        });
        for &(p, tok, _) in candidates.iter().take(count) {
            tokens[p] = tok;
            fixed_at_step[p] = step;
        }
        masked_after_step.push(tokens.iter().filter(|&&t| t == mask_id).count());
    }
    let grid = CodeGrid::new(model.levels(), model.h(), model.w(), n, tokens)?;
    Ok(DecodeTrace {
        grid,
        masked_after_step,
        fixed_at_step,
    })
}

/// Settings of MLM training.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

/// MLM loss of one batch of grids masked at `ratio`, on the tape.
fn batch_loss(
    tape: &mut Tape,
    model: &GeneratorModel,
    grids: &[&CodeGrid],
    classes: &[Option<usize>],
    ratio: f64,
    seeds: &[u64],
) -> Result<Var> {
    let mut picked = Vec::with_capacity(grids.len());
    let mut targets = Vec::new();
    for ((grid, &class), &seed) in grids.iter().zip(classes).zip(seeds) {
        model.check_grid(grid)?;
        let masked = mask_tokens(grid, ratio, seed)?;
        let logits = model.logits_on_tape(tape, &masked.tokens, class)?;
        picked.push(tape.gather_rows(logits, &masked.mask)?);
        targets.extend(masked.mask.iter().map(|&p| grid.indices()[p] as usize));
    }
    let all = tape.concat_rows(&picked)?;
    mlm_loss(tape, all, &targets)
}

/// Trains on `grids` with mask ratios drawn from the cosine curve.
/// Returns the per-step training loss.
pub fn train_mlm(
    model: &mut GeneratorModel,
    grids: &[CodeGrid],
    classes: Option<&[usize]>,
    settings: &MlmSettings,
) -> Result<Vec<f64>> {
    ensure!(!grids.is_empty(), "MLM training needs at least one grid");
    ensure!(settings.batch_size > 0, "batch size must be positive");
    if let Some(c) = classes {
        ensure!(c.len() == grids.len(), "need one class label per grid");
    }
    let mut opt = Optimizer::new(settings.optimizer, settings.lr, settings.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let idx: Vec<usize> = (0..settings.batch_size)
            .map(|_| rng.random_range(0..grids.len()))
            .collect();
        let batch: Vec<&CodeGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let cls: Vec<Option<usize>> = idx.iter().map(|&i| classes.map(|c| c[i])).collect();
        let u: f64 = rng.random();
        let ratio = ScheduleKind::Cosine.gamma(u).max(1e-6);
        let seeds: Vec<u64> = idx.iter().map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, model, &batch, &cls, ratio, &seeds)?;
        losses.push(tape.value(loss).values()[0] as f64);
        tape.backward(loss)?;
        opt.tick();
        opt.apply(&tape, model.params_mut())?;
    }
    Ok(losses)
}

/// MLM loss over all `grids` at a fixed mask ratio.
pub fn eval_mlm_loss(
    model: &GeneratorModel,
    grids: &[CodeGrid],
    classes: Option<&[usize]>,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    ensure!(!grids.is_empty(), "evaluation needs at least one grid");
    let refs: Vec<&CodeGrid> = grids.iter().collect();
    let cls: Vec<Option<usize>> = (0..grids.len()).map(|i| classes.map(|c| c[i])).collect();
    let seeds: Vec<u64> = (0..grids.len() as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut tape = Tape::new();
    let loss = batch_loss(&mut tape, model, &refs, &cls, ratio, &seeds)?;
    Ok(tape.value(loss).values()[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_difference_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(seed: u64, levels: usize, hw: usize, n: usize) -> CodeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = (0..levels * hw * hw).map(|_| rng.random_range(0..n as u32)).collect();
        CodeGrid::new(levels, hw, hw, n, idx).unwrap()
    }

    #[test]
    fn mask_counts() {
        let g = grid(1, 1, 4, 8);
        let all = mask_tokens(&g, 1.0, 3).unwrap();
        assert_eq!(all.mask.len(), 16);
        assert!(all.tokens.iter().all(|&t| t == 8));
        let one = mask_tokens(&g, 1e-6, 3).unwrap();
        assert_eq!(one.mask.len(), 1);
        assert_eq!(mask_tokens(&g, 0.4, 9).unwrap(), mask_tokens(&g, 0.4, 9).unwrap());
        assert!(mask_tokens(&g, 0.0, 1).is_err());
        assert!(mask_tokens(&g, 1.5, 1).is_err());
    }

    #[test]
    fn mlm_loss_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![3, 16]));
        let l = mlm_loss(&mut tape, z, &[0, 5, 15]).unwrap();
        assert!((tape.value(l).values()[0] as f64 - 16f64.ln()).abs() < 1e-6);
        let mut v = vec![0.0f32; 16];
        v[4] = 1e4;
        let c = tape.constant(Tensor::matrix(1, 16, v).unwrap());
        let l = mlm_loss(&mut tape, c, &[4]).unwrap();
        assert!(tape.value(l).values()[0].abs() < 1e-6);
        assert!(mlm_loss(&mut tape, z, &[0, 5, 16]).is_err());
    }

    #[test]
    fn mlm_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Tensor = Tensor::randn(vec![6, 10], 2.0, &mut rng);
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..10)).collect();
        let mut oracle = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            oracle += -((row[t] as f64).exp() / z).ln();
        }
        oracle /= 6.0;
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let l = mlm_loss(&mut tape, lv, &targets).unwrap();
        assert!((tape.value(l).values()[0] as f64 - oracle).abs() < 1e-5);
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f64> = Tensor::randn(vec![4, 7], 1.0, &mut rng);
        let targets = [1usize, 0, 6, 3];
        let err = finite_difference_check(|t, v| t.cross_entropy_rows(v, &targets), &x, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(1, 16, ScheduleKind::Cosine).unwrap().counts(), &[16]);
        assert_eq!(build_schedule(16, 16, ScheduleKind::Linear).unwrap().counts(), &[1; 16]);
        let s = build_schedule(8, 16, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.total(), 16);
        assert!(s.counts().windows(2).all(|w| w[0] <= w[1]));
        assert!(build_schedule(17, 16, ScheduleKind::Cosine).is_err());
        assert!(build_schedule(0, 16, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn cosine_schedule_tracks_curve() {
        // Independent evaluation of the masking curve at 8 points.
        let total = 64usize;
        let steps = 8;
        let raw: Vec<usize> = (0..=steps)
            .map(|t| {
                let g = (std::f64::consts::PI * t as f64 / (2.0 * steps as f64)).cos();
                total - (total as f64 * g + 1e-9).floor() as usize
            })
            .collect();
        let mut diffs: Vec<usize> = raw.windows(2).map(|w| w[1] - w[0]).collect();
        diffs.sort_unstable();
        assert_eq!(
            build_schedule(steps, total, ScheduleKind::Cosine).unwrap().counts(),
            &diffs[..]
        );
    }

    proptest! {
        #[test]
        fn schedules_are_valid(total in 1usize..300, frac in 0.0f64..1.0, cosine in any::<bool>()) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = build_schedule(steps, total, kind).unwrap();
            prop_assert_eq!(s.steps(), steps);
            prop_assert_eq!(s.total(), total);
            prop_assert!(s.counts().iter().all(|&c| c >= 1));
            prop_assert!(s.counts().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn tiny_model(seed: u64) -> GeneratorModel {
        let shape = GeneratorShape {
            d_model: 8,
            ff_dim: 16,
            blocks: 2,
            classes: 0,
        };
        GeneratorModel::new(6, 2, 2, 2, &shape, seed).unwrap()
    }

    #[test]
    fn decode_contract() {
        let model = tiny_model(1);
        let schedule = build_schedule(3, 8, ScheduleKind::Cosine).unwrap();
        let opts = DecodeOptions::default();
        let a = decode_iterative(&model, &schedule, &opts, 7).unwrap();
        assert!(a.grid.indices().iter().all(|&t| t < 6));
        assert_eq!(a.masked_after_step, schedule.masked_trajectory());
        let b = decode_iterative(&model, &schedule, &opts, 7).unwrap();
        assert_eq!(a, b);
        let single = DecodeSchedule::from_counts(vec![8]).unwrap();
        let s = decode_iterative(&model, &single, &opts, 2).unwrap();
        assert_eq!(s.masked_after_step, vec![0]);
    }

    #[test]
    fn decode_level_sequential_fills_lower_level_first() {
        let model = tiny_model(2);
        let schedule = DecodeSchedule::from_counts(vec![2, 2, 4]).unwrap();
        let opts = DecodeOptions {
            level_sequential: true,
            ..DecodeOptions::default()
        };
        let t = decode_iterative(&model, &schedule, &opts, 1).unwrap();
        assert_eq!(t.masked_after_step, vec![6, 4, 0]);
        assert!(t.fixed_at_step[..4].iter().all(|&s| s <= 1));
        assert!(t.fixed_at_step[4..].iter().all(|&s| s == 2));
    }

    #[test]
    fn degenerate_model_decodes_constant_grid() {
        let mut model = tiny_model(3);
        for (name, t) in model.params_mut() {
            if name == "gen.out.weight" {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "gen.out.bias" {
                t.values_mut().copy_from_slice(&[0.0, 0.0, 0.0, 50.0, 0.0, 0.0]);
            }
        }
        let schedule = build_schedule(4, 8, ScheduleKind::Cosine).unwrap();
        let opts = DecodeOptions {
            temperature: 0.0,
            ..DecodeOptions::default()
        };
        let t = decode_iterative(&model, &schedule, &opts, 5).unwrap();
        assert!(t.grid.indices().iter().all(|&v| v == 3));
    }

    #[test]
    fn class_conditioning_changes_logits() {
        let shape = GeneratorShape {
            d_model: 8,
            ff_dim: 16,
            blocks: 1,
            classes: 3,
        };
        let model = GeneratorModel::new(5, 1, 2, 2, &shape, 4).unwrap();
        let toks = vec![5u32; 4];
        let a = model.logits(&toks, Some(0)).unwrap();
        let b = model.logits(&toks, Some(2)).unwrap();
        assert_eq!(a.shape(), &[4, 5]);
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        assert!(model.logits(&toks, Some(3)).is_err());
        assert!(tiny_model(1).logits(&[6; 8], Some(0)).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let mut model = tiny_model(4);
        let grids: Vec<CodeGrid> = (0..2).map(|s| grid(s, 2, 2, 6)).collect();
        let before = eval_mlm_loss(&model, &grids, None, 0.5, 1).unwrap();
        let settings = MlmSettings {
            steps: 150,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            seed: 3,
        };
        let losses = train_mlm(&mut model, &grids, None, &settings).unwrap();
        assert_eq!(losses.len(), 150);
        let after = eval_mlm_loss(&model, &grids, None, 0.5, 1).unwrap();
        assert!(after < before, "{before} -> {after}");
    }
}
