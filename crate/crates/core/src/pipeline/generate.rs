use super::config::RunConfig;
use super::data::{build_dataset, Dataset, Split};
use super::train::Tokenizer;
use crate::error::{ensure, Result};
use crate::maskgit::{
    build_schedule, decode_iterative, eval_mlm_loss, train_mlm, DecodeOptions, GeneratorModel, MlmSettings,
};
use crate::numkit::Tensor;
use crate::par;
use crate::quantize::{rq_encode, CodeGrid};

/// Items encoded per chunk when tokenizing a dataset.
const ENCODE_CHUNK: usize = 64;
/// Mask ratio of the reported MLM loss.
pub const EVAL_MASK_RATIO: f64 = 0.5;

const GENERATOR_SALT: u64 = 0x6e4e_0000_0000_0000;
const SAMPLE_SALT: u64 = 0x5a3b_1e00_0000_0000;

/// One code grid per item of `data`.
pub fn tokenize(tok: &Tokenizer, cfg: &RunConfig, data: &Dataset) -> Result<Vec<CodeGrid>> {
    let per = data.rows_per_item();
    let chunks: Vec<(usize, usize)> = (0..data.items)
        .step_by(ENCODE_CHUNK)
        .map(|s| (s, (s + ENCODE_CHUNK).min(data.items)))
        .collect();
    let side = data.grid_side;
    let n = tok.quantizer.n();
    let parts: Vec<Vec<CodeGrid>> = par::map_slice(&chunks, |&(s, e)| {
        let x = data.rows.slice_rows(s * per, e * per)?;
        let f = tok.features(&x)?;
        rq_encode(&f, &tok.quantizer, cfg.quantizer.temperature)?.grids(side, side, n)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Fresh generator sized for the tokenizer's grids.
pub fn new_generator(cfg: &RunConfig, tok: &Tokenizer) -> Result<GeneratorModel> {
    let side = cfg.grid_side();
    GeneratorModel::new(
        tok.quantizer.n(),
        tok.quantizer.levels(),
        side,
        side,
        &cfg.generator.shape,
        cfg.seed ^ GENERATOR_SALT,
    )
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome {
    pub model: GeneratorModel,
    pub losses: Vec<f64>,
    /// MLM loss on the training grids at the fixed eval mask ratio.
    pub train_loss: f64,
    /// Same on the eval split.
    pub eval_loss: f64,
}

/// Tokenizes both splits and trains the generator on the training grids.
pub fn train_generator(cfg: &RunConfig, tok: &Tokenizer) -> Result<GeneratorOutcome> {
    let train = tokenize(tok, cfg, &build_dataset(cfg, Split::Train)?)?;
    let eval = tokenize(tok, cfg, &build_dataset(cfg, Split::Eval)?)?;
    let mut model = new_generator(cfg, tok)?;
    let o = &cfg.generator.optim;
    let settings = MlmSettings {
        steps: o.steps,
        batch_size: o.batch_size,
        lr: o.lr,
        momentum: o.momentum,
        optimizer: o.optimizer,
        seed: cfg.seed ^ GENERATOR_SALT,
    };
    let losses = train_mlm(&mut model, &train, None, &settings)?;
    let train_loss = eval_mlm_loss(&model, &train, None, EVAL_MASK_RATIO, cfg.seed)?;
    let eval_loss = eval_mlm_loss(&model, &eval, None, EVAL_MASK_RATIO, cfg.seed)?;
    Ok(GeneratorOutcome {
        model,
        losses,
        train_loss,
        eval_loss,
    })
}

/// Decodes `cfg.generator.samples` grids, each from its own seed.
pub fn sample_grids(cfg: &RunConfig, model: &GeneratorModel) -> Result<Vec<CodeGrid>> {
    let g = &cfg.generator;
    let schedule = build_schedule(g.decode_steps, model.seq_len(), g.schedule)?;
    let options = DecodeOptions {
        temperature: g.temperature,
        level_sequential: g.level_sequential,
        class: None,
    };
    let seed = cfg.seed ^ SAMPLE_SALT;
    par::map_indices(g.samples, |i| {
        decode_iterative(model, &schedule, &options, seed.wrapping_add(i as u64)).map(|t| t.grid)
    })
    .into_iter()
    .collect()
}

/// Sums the code values of each grid position and decodes the features,
/// giving rows in the dataset's item-major layout.
pub fn grids_to_rows(tok: &Tokenizer, grids: &[CodeGrid]) -> Result<Tensor> {
    let levels = tok.quantizer.levels();
    let values: Vec<Tensor> = (0..levels).map(|l| tok.code_values(l)).collect::<Result<_>>()?;
    let d = tok.quantizer.feature_dim();
    let mut rows = Vec::new();
    for g in grids {
        ensure!(
            g.levels() == levels && g.n() == tok.quantizer.n(),
            "grid of {} levels over {} codes does not fit the tokenizer",
            g.levels(),
            g.n()
        );
        let hw = g.h() * g.w();
        for p in 0..hw {
            let mut acc = vec![0.0f64; d];
            for (l, v) in values.iter().enumerate() {
                let code = g.level(l)[p] as usize;
                for (a, &x) in acc.iter_mut().zip(v.row(code)) {
                    *a += x as f64;
                }
            }
            rows.extend(acc.into_iter().map(|v| v as f32));
        }
    }
    let count = rows.len() / d.max(1);
    let f = Tensor::matrix(count, d, rows)?;
    match &tok.autoencoder {
        Some(ae) => ae.decode(&f),
        None => Ok(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::DatasetKind;
    use crate::vae::ToyAutoencoder;

    fn image_setup() -> (RunConfig, Tokenizer) {
        let mut cfg = RunConfig::default();
        cfg.data.count = 6;
        cfg.data.eval_count = 3;
        cfg.data.image_size = 8;
        cfg.quantizer.codebook_size = 8;
        cfg.quantizer.levels = 2;
        cfg.generator.shape.d_model = 8;
        cfg.generator.shape.ff_dim = 8;
        cfg.generator.shape.blocks = 1;
        cfg.generator.optim.steps = 3;
        cfg.generator.samples = 3;
        cfg.generator.decode_steps = 3;
        let ae = ToyAutoencoder::new(16, &[16], 8, 2).unwrap();
        let tok = Tokenizer::build(&cfg, Some(ae), None).unwrap();
        (cfg, tok)
    }

    #[test]
    fn tokenize_matches_direct_encoding() {
        let (cfg, tok) = image_setup();
        let data = build_dataset(&cfg, Split::Train).unwrap();
        let grids = tokenize(&tok, &cfg, &data).unwrap();
        assert_eq!(grids.len(), 6);
        assert_eq!((grids[0].levels(), grids[0].h(), grids[0].w()), (2, 2, 2));
        let f = tok.features(&data.rows).unwrap();
        let enc = rq_encode(&f, &tok.quantizer, cfg.quantizer.temperature).unwrap();
        assert_eq!(grids, enc.grids(2, 2, 8).unwrap());
        // Decoding the grids reproduces the quantized features.
        let decoded = tok
            .autoencoder
            .as_ref()
            .unwrap()
            .decode(&enc.decode().unwrap())
            .unwrap();
        let rows = grids_to_rows(&tok, &grids).unwrap();
        assert!(rows.max_abs_diff(&decoded).unwrap() < 1e-5);
    }

    #[test]
    fn generator_round() {
        let (cfg, tok) = image_setup();
        let out = train_generator(&cfg, &tok).unwrap();
        assert_eq!(out.losses.len(), 3);
        assert!(out.train_loss.is_finite() && out.eval_loss.is_finite());
        let samples = sample_grids(&cfg, &out.model).unwrap();
        assert_eq!(samples.len(), 3);
        for g in &samples {
            assert!(g.indices().iter().all(|&t| (t as usize) < 8));
        }
        assert_eq!(samples, sample_grids(&cfg, &out.model).unwrap());
        assert_eq!(grids_to_rows(&tok, &samples).unwrap().shape(), &[12, 16]);
    }

    #[test]
    fn point_grids_are_single_cells() {
        let mut cfg = RunConfig::default();
        cfg.data.kind = DatasetKind::Mixture2d;
        cfg.data.count = 10;
        cfg.quantizer.codebook_size = 4;
        let sample = build_dataset(&cfg, Split::Train).unwrap();
        let tok = Tokenizer::build(&cfg, None, Some(&sample.rows)).unwrap();
        let grids = tokenize(&tok, &cfg, &sample).unwrap();
        assert_eq!(grids.len(), 10);
        assert_eq!((grids[0].h(), grids[0].w(), grids[0].levels()), (1, 1, 4));
    }
}
