use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::InitScheme;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::maskgit::{GeneratorShape, ScheduleKind};
use crate::optim::OptimizerKind;
use crate::quantize::NormKind;
use crate::vae::AdaptWhere;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    /// Single-level nearest neighbor.
    Vq,
    /// Residual nearest neighbor.
    RqVq,
    /// Residual attention retrieval.
    #[default]
    RqAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Procedural images, split into patches that the autoencoder encodes.
    #[default]
    Images,
    /// 2-D mixture points quantized directly, without an autoencoder.
    Mixture2d,
    /// Points near a linear subspace, encoded by the autoencoder.
    Subspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Training images or points.
    pub count: usize,
    /// Held-out images or points used for evaluation.
    pub eval_count: usize,
    pub image_size: usize,
    pub patch: usize,
    pub components: usize,
    pub radius: f64,
    pub spread: f64,
    pub ambient_dim: usize,
    pub subspace_dim: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Images,
            count: 512,
            eval_count: 256,
            image_size: 16,
            patch: 4,
            components: 8,
            radius: 2.0,
            spread: 0.5,
            ambient_dim: 16,
            subspace_dim: 4,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    pub levels: usize,
    pub codebook_size: usize,
    pub norm: NormKind,
    pub att_dim: usize,
    pub temperature: f64,
    pub init: InitScheme,
    /// One codebook for every level instead of one per level.
    pub shared_codebook: bool,
    pub attn_init: AttnInit,
}

/// Starting point of the attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnInit {
    /// Entries from N(0, 1/d).
    Gaussian,
    /// Padded identity matrices.
    #[default]
    Identity,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            kind: QuantizerKind::RqAttn,
            levels: 4,
            codebook_size: 512,
            norm: NormKind::Rms,
            att_dim: 8,
            temperature: 0.1,
            init: InitScheme::Gaussian,
            shared_codebook: true,
            attn_init: AttnInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Momentum,
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 64,
            steps: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lora_rank: usize,
    #[serde(rename = "where")]
    pub place: AdaptWhere,
    pub eval_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lora_rank: 4,
            place: AdaptWhere::Both,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub shape: GeneratorShape,
    pub optim: OptimConfig,
    pub schedule: ScheduleKind,
    pub decode_steps: usize,
    pub temperature: f64,
    pub level_sequential: bool,
    pub samples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            shape: GeneratorShape::default(),
            optim: OptimConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                momentum: 0.9,
                batch_size: 8,
                steps: 2000,
            },
            schedule: ScheduleKind::Cosine,
            decode_steps: 8,
            temperature: 1.0,
            level_sequential: false,
            samples: 16,
        }
    }
}

/// Full description of an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossWeights,
    /// Continuous autoencoder pretraining.
    pub pretrain: OptimConfig,
    /// Tokenizer training.
    pub train: OptimConfig,
    pub adapt: AdaptConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            quantizer: QuantizerConfig::default(),
            loss: LossWeights {
                lambda_e: 0.01,
                ..LossWeights::default()
            },
            pretrain: OptimConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                momentum: 0.9,
                batch_size: 64,
                steps: 3000,
            },
            train: OptimConfig {
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                momentum: 0.9,
                batch_size: 64,
                steps: 2000,
            },
            adapt: AdaptConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

macro_rules! require {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err(config_err(format!($($arg)+)));
        }
    };
}

fn check_optim(name: &str, o: &OptimConfig) -> Result<()> {
    require!(o.lr > 0.0 && o.lr.is_finite(), "{name}.lr must be positive");
    require!((0.0..1.0).contains(&o.momentum), "{name}.momentum must be in [0, 1)");
    require!(o.batch_size > 0, "{name}.batch_size must be positive");
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, so equal configs hash equal
    /// regardless of key order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Whether the dataset goes through the autoencoder.
    pub fn uses_autoencoder(&self) -> bool {
        self.data.kind != DatasetKind::Mixture2d
    }

    /// Dimension of the features the quantizer sees.
    pub fn feature_dim(&self) -> usize {
        if self.uses_autoencoder() {
            self.model.latent_dim
        } else {
            2
        }
    }

    /// Rows of the per-image code grid.
    pub fn grid_side(&self) -> usize {
        match self.data.kind {
            DatasetKind::Images => self.data.image_size / self.data.patch,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.quantizer;
        let d = &self.data;
        require!(q.levels >= 1, "quantizer.levels must be at least 1");
        require!(
            q.kind != QuantizerKind::Vq || q.levels == 1,
            "quantizer.kind = \"vq\" requires levels = 1, got {}",
            q.levels
        );
        require!(q.codebook_size >= 2, "quantizer.codebook_size must be at least 2");
        require!(q.att_dim >= 1, "quantizer.att_dim must be positive");
        require!(
            q.temperature > 0.0 && q.temperature.is_finite(),
            "quantizer.temperature must be positive"
        );
        require!(self.model.latent_dim >= 1, "model.latent_dim must be positive");
        require!(
            self.model.hidden.iter().all(|&h| h > 0),
            "model.hidden widths must be positive"
        );
        require!(
            d.count >= 1 && d.eval_count >= 1,
            "data.count and data.eval_count must be positive"
        );
        match d.kind {
            DatasetKind::Images => {
                require!(d.patch >= 1, "data.patch must be positive");
                require!(
                    d.image_size >= d.patch && d.image_size.is_multiple_of(d.patch),
                    "data.image_size {} must be a multiple of data.patch {}",
                    d.image_size,
                    d.patch
                );
            }
            DatasetKind::Mixture2d => {
                require!(d.components >= 1, "data.components must be at least 1");
                require!(
                    d.spread >= 0.0 && d.radius >= 0.0,
                    "data.radius and data.spread must be non-negative"
                );
            }
            DatasetKind::Subspace => {
                require!(
                    d.subspace_dim >= 1 && d.subspace_dim <= d.ambient_dim,
                    "data.subspace_dim must be in 1..=data.ambient_dim"
                );
                require!(d.noise >= 0.0, "data.noise must be non-negative");
            }
        }
        self.loss.validate().map_err(|e| config_err(e.to_string()))?;
        check_optim("pretrain", &self.pretrain)?;
        check_optim("train", &self.train)?;
        check_optim("generator.optim", &self.generator.optim)?;
        require!(self.adapt.eval_every >= 1, "adapt.eval_every must be positive");
        require!(self.adapt.lora_rank >= 1, "adapt.lora_rank must be positive");
        let g = &self.generator;
        require!(
            g.shape.d_model >= 1 && g.shape.ff_dim >= 1,
            "generator widths must be positive"
        );
        require!(g.decode_steps >= 1, "generator.decode_steps must be positive");
        require!(g.temperature >= 0.0, "generator.temperature must be non-negative");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml_str("seed = 1\nlearnig_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_toml_str("[quantizer]\nlevel = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn vq_forces_single_level() {
        let text = "[quantizer]\nkind = \"vq\"\nlevels = 2\n";
        assert!(RunConfig::from_toml_str(text).is_err());
        let text = "[quantizer]\nkind = \"vq\"\nlevels = 1\n";
        assert!(RunConfig::from_toml_str(text).is_ok());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml_str("seed = 3\n[train]\nlr = 0.01\nsteps = 10\n").unwrap();
        let b = RunConfig::from_toml_str("[train]\nsteps = 10\nlr = 0.01\n\n[data]\n").unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 4, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "[quantizer]\nlevels = 0\n",
            "[train]\nlr = 0.0\n",
            "[data]\nimage_size = 10\npatch = 4\n",
            "[loss]\nlambda_p = 1.0\n",
            "[data]\nkind = \"subspace\"\nsubspace_dim = 20\nambient_dim = 16\n",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}
