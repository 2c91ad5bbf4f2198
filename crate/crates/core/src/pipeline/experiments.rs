use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{QuantizerKind, RunConfig};
use super::data::{build_dataset, Split};
use super::train::{evaluate_full, train_tokenizer, StepHook, Tokenizer};
use crate::error::{ensure, Error, Result};
use crate::metrics::{confidence_heatmap, ConfidenceHeatmap, DynamicsTrace, HeatmapSource, MetricsRecord};
use crate::quantize::{Assigner, NormKind};
use crate::vae::{pretrain_continuous, AdaptWhere, PretrainSettings, ToyAutoencoder};

/// Fits the continuous autoencoder on the training rows.
pub fn pretrain(cfg: &RunConfig) -> Result<(ToyAutoencoder, f64)> {
    cfg.validate()?;
    ensure!(
        cfg.uses_autoencoder(),
        "the {:?} dataset is quantized directly and has no autoencoder to pretrain",
        cfg.data.kind
    );
    let data = build_dataset(cfg, Split::Train)?;
    let p = &cfg.pretrain;
    let settings = PretrainSettings {
        hidden: cfg.model.hidden.clone(),
        latent_dim: cfg.model.latent_dim,
        steps: p.steps,
        batch_size: p.batch_size,
        lr: p.lr,
        momentum: p.momentum,
        optimizer: p.optimizer,
        seed: cfg.seed,
    };
    pretrain_continuous(&data.rows, &settings)
}

/// The pretrained model when the dataset needs one, trained on the spot
/// unless supplied.
fn autoencoder_for(cfg: &RunConfig, pretrained: Option<&ToyAutoencoder>) -> Result<Option<ToyAutoencoder>> {
    if !cfg.uses_autoencoder() {
        return Ok(None);
    }
    match pretrained {
        Some(ae) => Ok(Some(ae.clone())),
        None => Ok(Some(pretrain(cfg)?.0)),
    }
}

/// Final evaluation of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub record: MetricsRecord,
    pub recon_mse: f64,
}

/// Trains `cfg` and evaluates the result on the eval split.
pub fn run_arm(name: &str, cfg: &RunConfig, pretrained: Option<&ToyAutoencoder>) -> Result<ArmResult> {
    let out = train_tokenizer(cfg, pretrained, &mut std::io::sink(), None)?;
    let eval = build_dataset(cfg, Split::Eval)?;
    let e = evaluate_full(&out.tokenizer, cfg, &eval, cfg.train.steps)?;
    Ok(ArmResult {
        arm: name.to_string(),
        record: e.record,
        recon_mse: e.recon_mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ladder {
    /// vq, then residual, then attention, then adaptation.
    Components,
    /// Where LoRA adapters go.
    Adapt,
    /// Codebook sizes 64, 256, 1024.
    CodebookSize,
    /// Query/key normalization.
    Norm,
}

pub const CODEBOOK_SIZES: [usize; 3] = [64, 256, 1024];

/// Named configurations of a ladder, all sharing the base seed and data.
///
/// Only the components ladder and the adapt ladder let the autoencoder
/// train; the quantizer-only ladders freeze it so every arm quantizes the
/// same features.
pub fn ladder_arms(base: &RunConfig, ladder: Ladder) -> Result<Vec<(String, RunConfig)>> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let levels = base.quantizer.levels;
    let arms = match ladder {
        Ladder::Components => vec![
            (
                "vq".to_string(),
                with(&|c| {
                    c.quantizer.kind = QuantizerKind::Vq;
                    c.quantizer.levels = 1;
                    c.adapt.place = AdaptWhere::None;
                }),
            ),
            (
                "rq_vq".to_string(),
                with(&|c| {
                    c.quantizer.kind = QuantizerKind::RqVq;
                    c.quantizer.levels = levels;
                    c.adapt.place = AdaptWhere::None;
                }),
            ),
            (
                "rq_attn".to_string(),
                with(&|c| {
                    c.quantizer.kind = QuantizerKind::RqAttn;
                    c.quantizer.levels = levels;
                    c.adapt.place = AdaptWhere::None;
                }),
            ),
            (
                "rq_attn_adapt".to_string(),
                with(&|c| {
                    c.quantizer.kind = QuantizerKind::RqAttn;
                    c.quantizer.levels = levels;
                    c.adapt.place = AdaptWhere::Both;
                }),
            ),
        ],
        Ladder::Adapt => [
            AdaptWhere::None,
            AdaptWhere::Encoder,
            AdaptWhere::Decoder,
            AdaptWhere::Both,
        ]
        .into_iter()
        .map(|w| (format!("{w:?}").to_lowercase(), with(&|c| c.adapt.place = w)))
        .collect(),
        Ladder::CodebookSize => CODEBOOK_SIZES
            .into_iter()
            .map(|n| {
                (
                    format!("n{n}"),
                    with(&|c| {
                        c.quantizer.codebook_size = n;
                        c.adapt.place = AdaptWhere::None;
                    }),
                )
            })
            .collect(),
        Ladder::Norm => [NormKind::Rms, NormKind::Layer, NormKind::None]
            .into_iter()
            .map(|norm| {
                (
                    format!("{norm:?}").to_lowercase(),
                    with(&|c| {
                        c.quantizer.kind = QuantizerKind::RqAttn;
                        c.quantizer.norm = norm;
                        c.adapt.place = AdaptWhere::None;
                    }),
                )
            })
            .collect(),
    };
    for (name, cfg) in &arms {
        cfg.validate().map_err(|e| Error::Config(format!("arm {name}: {e}")))?;
    }
    Ok(arms)
}

/// Runs every arm of a ladder. The autoencoder is pretrained once and
/// shared by all arms.
pub fn run_ladder(base: &RunConfig, ladder: Ladder, pretrained: Option<&ToyAutoencoder>) -> Result<Vec<ArmResult>> {
    let arms = ladder_arms(base, ladder)?;
    let ae = autoencoder_for(base, pretrained)?;
    arms.iter().map(|(name, cfg)| run_arm(name, cfg, ae.as_ref())).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table<W: Write>(mut w: W, rows: &[ArmResult]) -> Result<()> {
    writeln!(w, "arm,quant_err,psnr,ssim,utilization,recon_mse")?;
    for r in rows {
        let m = &r.record;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.arm,
            m.quant_err,
            m.psnr,
            fmt_opt(m.ssim),
            m.utilization,
            r.recon_mse
        )?;
    }
    Ok(())
}

/// Parses `a..b` (inclusive), `a..=b`, or a comma-separated list.
pub fn parse_levels(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse level list {text:?}"));
    let out: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(Error::Config(format!(
            "level list {text:?} must be non-empty and positive"
        )));
    }
    Ok(out)
}

/// One tokenizer per level count, autoencoder frozen.
pub fn levels_sweep(base: &RunConfig, levels: &[usize], pretrained: Option<&ToyAutoencoder>) -> Result<Vec<ArmResult>> {
    let ae = autoencoder_for(base, pretrained)?;
    levels
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.quantizer.levels = l;
            if cfg.quantizer.kind == QuantizerKind::Vq && l > 1 {
                cfg.quantizer.kind = QuantizerKind::RqVq;
            }
            cfg.adapt.place = AdaptWhere::None;
            run_arm(&l.to_string(), &cfg, ae.as_ref())
        })
        .collect()
}

pub fn write_levels<W: Write>(mut w: W, rows: &[ArmResult]) -> Result<()> {
    writeln!(w, "levels,quant_err,psnr,ssim,utilization,residual_norms")?;
    for r in rows {
        let m = &r.record;
        let norms: Vec<String> = m.residual_norms.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.arm,
            m.quant_err,
            m.psnr,
            fmt_opt(m.ssim),
            m.utilization,
            norms.join(";")
        )?;
    }
    Ok(())
}

/// Code positions every `every` steps (and at the last step) of a training
/// run on 2-D features.
pub fn trace_dynamics(cfg: &RunConfig, every: usize) -> Result<DynamicsTrace> {
    ensure!(every >= 1, "snapshot interval must be positive");
    if cfg.feature_dim() != 2 {
        return Err(Error::Config(format!(
            "dynamics traces need 2-D features, the config quantizes {}-D features",
            cfg.feature_dim()
        )));
    }
    let ae = autoencoder_for(cfg, None)?;
    let last = cfg.train.steps;
    let mut trace = DynamicsTrace::new();
    let mut hook = |step: usize, tok: &Tokenizer| -> Result<()> {
        if step.is_multiple_of(every) || step == last {
            trace.push(step, tok.code_values(0)?)?;
        }
        Ok(())
    };
    let hook: StepHook<'_> = &mut hook;
    train_tokenizer(cfg, ae.as_ref(), &mut std::io::sink(), Some(hook))?;
    Ok(trace)
}

/// Top-`k` first-level assignment confidences for the first `rows` eval
/// features.
pub fn heatmap(cfg: &RunConfig, tok: &Tokenizer, rows: usize, k: usize) -> Result<ConfidenceHeatmap> {
    let eval = build_dataset(cfg, Split::Eval)?;
    let rows = rows.min(eval.rows.rows());
    ensure!(rows >= 1, "heatmap needs at least one row");
    let f = tok.features(&eval.rows.slice_rows(0, rows)?)?;
    let source = match tok.quantizer.assigner() {
        Assigner::Vq => HeatmapSource::Vq,
        Assigner::Attention(q) => HeatmapSource::Attention {
            quantizer: q,
            temperature: cfg.quantizer.temperature,
        },
    };
    confidence_heatmap(&f, tok.quantizer.codebook(0), source, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::DatasetKind;

    fn small_mixture() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.kind = DatasetKind::Mixture2d;
        cfg.data.count = 128;
        cfg.data.eval_count = 64;
        cfg.quantizer.codebook_size = 8;
        cfg.quantizer.levels = 2;
        cfg.quantizer.att_dim = 2;
        cfg.train.steps = 6;
        cfg.train.batch_size = 16;
        cfg
    }

    #[test]
    fn level_lists() {
        assert_eq!(parse_levels("1..10").unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(parse_levels("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_levels("1,4, 8").unwrap(), vec![1, 4, 8]);
        for bad in ["", "0..2", "a..b", "3..1", "1,,2"] {
            assert!(matches!(parse_levels(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn component_arms_differ_only_where_intended() {
        let base = RunConfig::default();
        let arms = ladder_arms(&base, Ladder::Components).unwrap();
        let names: Vec<&str> = arms.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["vq", "rq_vq", "rq_attn", "rq_attn_adapt"]);
        assert_eq!(arms[0].1.quantizer.levels, 1);
        for (_, c) in &arms {
            assert_eq!(c.seed, base.seed);
            assert_eq!(c.data, base.data);
            assert_eq!(c.train, base.train);
        }
        assert_eq!(arms[3].1.adapt.place, AdaptWhere::Both);
        let sizes: Vec<usize> = ladder_arms(&base, Ladder::CodebookSize)
            .unwrap()
            .iter()
            .map(|(_, c)| c.quantizer.codebook_size)
            .collect();
        assert_eq!(sizes, CODEBOOK_SIZES);
        assert_eq!(ladder_arms(&base, Ladder::Adapt).unwrap().len(), 4);
        assert_eq!(ladder_arms(&base, Ladder::Norm).unwrap().len(), 3);
    }

    #[test]
    fn ladder_table_has_row_per_arm() {
        let rows = run_ladder(&small_mixture(), Ladder::Components, None).unwrap();
        let mut buf = Vec::new();
        write_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "arm,quant_err,psnr,ssim,utilization,recon_mse");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("vq,"));
    }

    #[test]
    fn dynamics_snapshots() {
        let cfg = small_mixture();
        let trace = trace_dynamics(&cfg, 4).unwrap();
        let steps: Vec<usize> = trace.snapshots().iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![0, 4, 6]);
        assert_eq!(trace.snapshots()[0].1.shape(), &[8, 2]);
        assert_ne!(trace.snapshots()[0].1, trace.snapshots()[2].1);
        let mut images = RunConfig::default();
        images.train.steps = 0;
        assert!(matches!(trace_dynamics(&images, 1), Err(Error::Config(_))));
    }

    #[test]
    fn heatmap_rows_are_sorted() {
        let cfg = small_mixture();
        let sample = build_dataset(&cfg, Split::Train).unwrap().rows;
        let tok = Tokenizer::build(&cfg, None, Some(&sample)).unwrap();
        let h = heatmap(&cfg, &tok, 5, 3).unwrap();
        assert_eq!(h.values().shape(), &[5, 3]);
        for i in 0..5 {
            let r = h.values().row(i);
            assert!(r[0] >= r[1] && r[1] >= r[2]);
        }
    }

    #[test]
    fn levels_sweep_rows() {
        let rows = levels_sweep(&small_mixture(), &[1, 3], None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].record.residual_norms.len(), 3);
        let mut buf = Vec::new();
        write_levels(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
