use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttnInit, QuantizerKind, RunConfig};
use super::data::{build_dataset, unpatchify, Dataset, Split};
use crate::codebook::{Codebook, UsageHistogram};
use crate::error::{ensure, Error, Result};
use crate::losses::LossReport;
use crate::metrics::{psnr, ssim, MetricsRecord};
use crate::numkit::{kernels, Tape, Tensor, Var};
use crate::optim::Optimizer;
use crate::par;
use crate::quantize::{quantization_error, straight_through, Assigner, AttentionQuantizer, ResidualQuantizer};
use crate::vae::{discrete_forward_on_tape, sample_batch, DiscreteForward, ToyAutoencoder};

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 256;
/// Rows used to seed k-means codebook initialization.
const INIT_SAMPLE: usize = 4096;
pub const SSIM_WINDOW: usize = 7;

const QUANTIZER_SALT: u64 = 0x0a77_e471_0000_0000;
const LORA_SALT: u64 = 0x1017_a000_0000_0000;
const BATCH_SALT: u64 = 0xba7c_0000_0000_0000;

/// An (optional) autoencoder plus a residual quantizer over its latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub autoencoder: Option<ToyAutoencoder>,
    pub quantizer: ResidualQuantizer,
}

impl Tokenizer {
    /// Fresh quantizer sized from `cfg`. `sample` feeds k-means
    /// initialization and is ignored by the other schemes.
    pub fn build(cfg: &RunConfig, autoencoder: Option<ToyAutoencoder>, sample: Option<&Tensor>) -> Result<Self> {
        let q = &cfg.quantizer;
        let d = cfg.feature_dim();
        if let Some(ae) = &autoencoder {
            ensure!(
                ae.latent_dim() == d,
                "autoencoder latent dimension {} does not match configured {d}",
                ae.latent_dim()
            );
        }
        let seed = cfg.seed ^ QUANTIZER_SALT;
        let books = if q.shared_codebook { 1 } else { q.levels };
        let mut codebooks = Vec::with_capacity(books);
        for l in 0..books {
            codebooks.push(Codebook::init(
                q.codebook_size,
                d,
                q.init,
                seed.wrapping_add(l as u64),
                sample,
            )?);
        }
        let assigner = match q.kind {
            QuantizerKind::Vq | QuantizerKind::RqVq => Assigner::Vq,
            QuantizerKind::RqAttn => Assigner::Attention(match q.attn_init {
                AttnInit::Gaussian => AttentionQuantizer::new(d, d, q.att_dim, q.norm, seed.wrapping_add(0x100))?,
                AttnInit::Identity => AttentionQuantizer::identity(d, q.att_dim, q.norm)?,
            }),
        };
        let mut quantizer = if q.shared_codebook {
            ResidualQuantizer::new(q.levels, codebooks.remove(0), assigner)?
        } else {
            ResidualQuantizer::with_level_codebooks(q.levels, codebooks, assigner)?
        };
        for (_, p) in quantizer.params_mut() {
            p.set_requires_grad(true);
        }
        Ok(Self { autoencoder, quantizer })
    }

    /// Features the quantizer sees for raw rows `x`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        match &self.autoencoder {
            Some(ae) => ae.encode(x),
            None => Ok(x.clone()),
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, temperature: f64) -> Result<DiscreteForward> {
        match &self.autoencoder {
            Some(ae) => discrete_forward_on_tape(tape, ae, &self.quantizer, x, temperature),
            None => {
                let trace = self.quantizer.encode_on_tape(tape, x, temperature)?;
                let decoded = trace.decoded(tape)?;
                let f_hat = straight_through(tape, x, decoded)?;
                Ok(DiscreteForward {
                    x,
                    f: x,
                    trace,
                    f_hat,
                    x_hat: f_hat,
                })
            }
        }
    }

    /// What each code of `level` contributes to the decoded feature:
    /// `C·W_v` under attention retrieval, the codebook rows otherwise.
    pub fn code_values(&self, level: usize) -> Result<Tensor> {
        ensure!(level < self.quantizer.levels(), "level {level} out of range");
        let cb = self.quantizer.codebook(level).embeddings();
        match self.quantizer.assigner() {
            Assigner::Vq => Ok(cb.clone()),
            Assigner::Attention(q) => {
                let w_v = q.w_v();
                let v = kernels::matmul(cb.values(), w_v.values(), cb.rows(), cb.cols(), w_v.cols());
                Tensor::matrix(cb.rows(), w_v.cols(), v)
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.autoencoder.as_ref().map(|a| a.params()).unwrap_or_default();
        out.extend(self.quantizer.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.autoencoder.as_mut().map(|a| a.params_mut()).unwrap_or_default();
        out.extend(self.quantizer.params_mut());
        out
    }

    /// Rebuilds a tokenizer from named tensors. The quantizer structure
    /// comes from `cfg`; its values from the tensors.
    pub fn from_named(cfg: &RunConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let autoencoder = if named.iter().any(|(n, _)| n.starts_with("encoder.")) {
            Some(ToyAutoencoder::from_named(named)?)
        } else {
            None
        };
        ensure!(
            autoencoder.is_some() == cfg.uses_autoencoder(),
            "checkpoint and config disagree on whether an autoencoder is used"
        );
        let mut q_cfg = cfg.clone();
        // k-means needs data; the values are overwritten below anyway.
        q_cfg.quantizer.init = crate::codebook::InitScheme::Gaussian;
        let mut tok = Self::build(&q_cfg, autoencoder, None)?;
        super::checkpoint::assign_named(tok.quantizer.params_mut(), named)?;
        Ok(tok)
    }
}

/// Detached summary of one chunk of evaluation rows.
struct ChunkStats {
    sq_err: f64,
    x_hat: Tensor,
    indices: Vec<Vec<u32>>,
    residual_norm_sums: Vec<f64>,
}

fn eval_chunk(tok: &Tokenizer, x: &Tensor, temperature: f64) -> Result<ChunkStats> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = tok.forward_on_tape(&mut tape, xv, temperature)?;
    let f = tape.value(fwd.f);
    let f_hat = tape.value(fwd.f_hat);
    let sq_err = f
        .values()
        .iter()
        .zip(f_hat.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let levels = &fwd.trace.levels;
    let residual_norm_sums = (0..levels.len())
        .map(|l| {
            let after = levels.get(l + 1).map_or(fwd.trace.final_residual, |next| next.input);
            let t = tape.value(after);
            (0..t.rows())
                .map(|i| t.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
                .sum()
        })
        .collect();
    Ok(ChunkStats {
        sq_err,
        x_hat: tape.value(fwd.x_hat).clone(),
        indices: fwd.indices(),
        residual_norm_sums,
    })
}

/// An eval record plus the reconstruction error behind its PSNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub record: MetricsRecord,
    /// Mean squared error between the rows and their reconstructions.
    pub recon_mse: f64,
}

/// Evaluates the tokenizer on every row of `data`.
///
/// PSNR and SSIM are per-image means with peak 1 for image data. For point
/// data PSNR uses the value range of `data` as peak and SSIM is absent.
pub fn evaluate(tok: &Tokenizer, cfg: &RunConfig, data: &Dataset, step: usize) -> Result<MetricsRecord> {
    Ok(evaluate_full(tok, cfg, data, step)?.record)
}

pub fn evaluate_full(tok: &Tokenizer, cfg: &RunConfig, data: &Dataset, step: usize) -> Result<Evaluation> {
    let rows = data.rows.rows();
    ensure!(rows > 0, "cannot evaluate on an empty dataset");
    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(rows)))
        .collect();
    let temperature = cfg.quantizer.temperature;
    let stats: Vec<ChunkStats> = par::map_slice(&chunks, |&(s, e)| {
        data.rows
            .slice_rows(s, e)
            .and_then(|x| eval_chunk(tok, &x, temperature))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let levels = tok.quantizer.levels();
    let d = tok.quantizer.feature_dim();
    let mut hist = UsageHistogram::new(tok.quantizer.n());
    let mut sq_err = 0.0;
    let mut norm_sums = vec![0.0; levels];
    for s in &stats {
        sq_err += s.sq_err;
        for level in &s.indices {
            hist.record(level)?;
        }
        for (acc, v) in norm_sums.iter_mut().zip(&s.residual_norm_sums) {
            *acc += v;
        }
    }
    let parts: Vec<&Tensor> = stats.iter().map(|s| &s.x_hat).collect();
    let x_hat = Tensor::concat_rows(&parts)?;

    let (psnr_value, ssim_value) = match data.image_size {
        Some(size) => {
            let originals = unpatchify(&data.rows, size, data.patch)?;
            let recons = unpatchify(&x_hat, size, data.patch)?;
            let pairs: Vec<(&Tensor, &Tensor)> = originals.iter().zip(&recons).collect();
            let scores: Vec<(f64, f64)> = par::map_slice(&pairs, |(a, b)| {
                Ok::<_, Error>((psnr(a, b, 1.0)?, ssim(a, b, SSIM_WINDOW.min(size), 1.0)?))
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let k = scores.len() as f64;
            (
                scores.iter().map(|s| s.0).sum::<f64>() / k,
                Some(scores.iter().map(|s| s.1).sum::<f64>() / k),
            )
        }
        None => {
            let v = data.rows.values();
            let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let peak = if hi > lo { hi - lo } else { 1.0 };
            (psnr(&data.rows, &x_hat, peak)?, None)
        }
    };

    Ok(Evaluation {
        record: MetricsRecord {
            step,
            quant_err: sq_err / (rows * d) as f64,
            psnr: psnr_value,
            ssim: ssim_value,
            utilization: hist.utilization()?,
            residual_norms: norm_sums.into_iter().map(|s| s / rows as f64).collect(),
        },
        recon_mse: quantization_error(&data.rows, &x_hat)?,
    })
}

/// Everything a tokenizer training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tokenizer: Tokenizer,
    pub records: Vec<MetricsRecord>,
    pub last_report: Option<LossReport>,
}

/// Observer called with the tokenizer after initialization (step 0) and
/// after every update.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &Tokenizer) -> Result<()>;

/// Steps at which an eval record is emitted: 0, every `every`, and the end.
pub fn eval_steps(steps: usize, every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = if every == 0 {
        vec![0]
    } else {
        (0..=steps).step_by(every).collect()
    };
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

/// Trains the tokenizer for `cfg.train.steps` minibatch steps.
///
/// Datasets that go through the autoencoder need `pretrained`; it is cloned,
/// LoRA adapters are attached where configured, and the base is frozen.
/// Each eval record is also written to `metrics` as a JSON line.
pub fn train_tokenizer(
    cfg: &RunConfig,
    pretrained: Option<&ToyAutoencoder>,
    metrics: &mut dyn Write,
    hook: Option<StepHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.loss.validate()?;
    let train = build_dataset(cfg, Split::Train)?;
    let eval = build_dataset(cfg, Split::Eval)?;
    let autoencoder = if cfg.uses_autoencoder() {
        let base =
            pretrained.ok_or_else(|| Error::contract("tokenizer training needs pretrained autoencoder weights"))?;
        ensure!(
            base.input_dim() == train.rows.cols(),
            "pretrained autoencoder expects {} inputs, data has {}",
            base.input_dim(),
            train.rows.cols()
        );
        let mut ae = base.clone();
        ae.attach_lora(cfg.adapt.lora_rank, cfg.adapt.place, cfg.seed ^ LORA_SALT)?;
        Some(ae)
    } else {
        None
    };
    let sample = {
        let n = train.rows.rows().min(INIT_SAMPLE);
        let x = train.rows.slice_rows(0, n)?;
        match &autoencoder {
            Some(ae) => ae.encode(&x)?,
            None => x,
        }
    };
    let mut tok = Tokenizer::build(cfg, autoencoder, Some(&sample))?;

    let o = &cfg.train;
    let mut opt = Optimizer::new(o.optimizer, o.lr, o.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SALT);
    let evals = eval_steps(o.steps, cfg.adapt.eval_every);
    let mut records = Vec::with_capacity(evals.len());
    let mut next_eval = 0;
    let mut last_report = None;
    let mut hook = hook;

    for step in 0..=o.steps {
        if step > 0 {
            let idx = sample_batch(&mut rng, train.rows.rows(), o.batch_size);
            let x = train.rows.select_rows(&idx)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = tok.forward_on_tape(&mut tape, xv, cfg.quantizer.temperature)?;
            let (loss, report) = fwd.objective(&mut tape, &cfg.loss)?;
            ensure!(report.total.is_finite(), "training diverged at step {step}");
            tape.backward(loss)?;
            opt.tick();
            opt.apply(&tape, tok.params_mut())?;
            last_report = Some(report);
        }
        if let Some(h) = hook.as_mut() {
            h(step, &tok)?;
        }
        if evals.get(next_eval) == Some(&step) {
            let record = evaluate(&tok, cfg, &eval, step)?;
            record.write_jsonl(&mut *metrics)?;
            records.push(record);
            next_eval += 1;
        }
    }
    Ok(TrainOutcome {
        tokenizer: tok,
        records,
        last_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::DatasetKind;

    fn mixture_cfg(steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.kind = DatasetKind::Mixture2d;
        cfg.data.count = 256;
        cfg.data.eval_count = 128;
        cfg.quantizer.codebook_size = 16;
        cfg.quantizer.levels = 2;
        cfg.train.steps = steps;
        cfg.train.batch_size = 32;
        cfg.adapt.eval_every = 5;
        cfg
    }

    #[test]
    fn eval_schedule() {
        assert_eq!(eval_steps(0, 500), vec![0]);
        assert_eq!(eval_steps(10, 5), vec![0, 5, 10]);
        assert_eq!(eval_steps(12, 5), vec![0, 5, 10, 12]);
        assert_eq!(eval_steps(3, 0), vec![0, 3]);
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = mixture_cfg(0);
        let mut sink = Vec::new();
        let out = train_tokenizer(&cfg, None, &mut sink, None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 0);
        let sample = build_dataset(&cfg, Split::Train).unwrap().rows;
        let fresh = Tokenizer::build(&cfg, None, Some(&sample)).unwrap();
        assert_eq!(out.tokenizer, fresh);
        assert_eq!(String::from_utf8(sink).unwrap().lines().count(), 1);
    }

    #[test]
    fn records_follow_cadence_and_are_deterministic() {
        let cfg = mixture_cfg(12);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let ra = train_tokenizer(&cfg, None, &mut a, None).unwrap();
        train_tokenizer(&cfg, None, &mut b, None).unwrap();
        assert_eq!(a, b);
        let steps: Vec<usize> = ra.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 12]);
        for r in &ra.records {
            assert_eq!(r.residual_norms.len(), 2);
            assert!(r.ssim.is_none());
            assert!((0.0..=1.0).contains(&r.utilization));
        }
    }

    #[test]
    fn training_moves_parameters() {
        let cfg = mixture_cfg(5);
        let out = train_tokenizer(&cfg, None, &mut std::io::sink(), None).unwrap();
        let sample = build_dataset(&cfg, Split::Train).unwrap().rows;
        let fresh = Tokenizer::build(&cfg, None, Some(&sample)).unwrap();
        for ((name, a), (_, b)) in out.tokenizer.params().into_iter().zip(fresh.params()) {
            assert_ne!(a, b, "{name} did not move");
        }
    }

    #[test]
    fn missing_pretrained_is_contract_error() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 0;
        let err = train_tokenizer(&cfg, None, &mut std::io::sink(), None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn hook_sees_every_step() {
        let cfg = mixture_cfg(4);
        let mut seen = Vec::new();
        let mut hook = |s: usize, _: &Tokenizer| {
            seen.push(s);
            Ok(())
        };
        train_tokenizer(&cfg, None, &mut std::io::sink(), Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn image_eval_reports_ssim() {
        let mut cfg = RunConfig::default();
        cfg.data.count = 8;
        cfg.data.eval_count = 4;
        cfg.model.hidden = vec![16];
        cfg.quantizer.codebook_size = 8;
        cfg.quantizer.levels = 2;
        let ae = ToyAutoencoder::new(16, &[16], 8, 3).unwrap();
        let tok = Tokenizer::build(&cfg, Some(ae), None).unwrap();
        let data = build_dataset(&cfg, Split::Eval).unwrap();
        let r = evaluate(&tok, &cfg, &data, 0).unwrap();
        let s = r.ssim.unwrap();
        assert!(s <= 1.0 + 1e-9);
        assert!(r.psnr >= 0.0);
    }
}
