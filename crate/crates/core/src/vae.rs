//! Toy continuous autoencoder, its low-rank adapters, and the discrete
//! forward pass that routes its latents through a residual quantizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::{entropy_loss, quant_loss, recon_loss, total_loss, LossParts, LossReport, LossWeights};
use crate::numkit::{Tape, Tensor, Var};
use crate::optim::{Optimizer, OptimizerKind};
use crate::quantize::{straight_through, CodeGrid, ResidualQuantizer, RqTrace};

/// Which half of the autoencoder receives adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptWhere {
    Encoder,
    Decoder,
    #[default]
    Both,
    None,
}

impl AdaptWhere {
    fn encoder(self) -> bool {
        matches!(self, AdaptWhere::Encoder | AdaptWhere::Both)
    }

    fn decoder(self) -> bool {
        matches!(self, AdaptWhere::Decoder | AdaptWhere::Both)
    }
}

/// Low-rank path `x ↦ scale · (x·downᵀ)·upᵀ` added to an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    down: Tensor,
    up: Tensor,
    scale: f64,
}

impl LoraAdapter {
    /// `down ~ N(0, 1/d_in)`, `up = 0`, scale 1.
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure!(rank >= 1, "LoRA rank must be at least 1");
        ensure!(
            rank <= d_in.min(d_out),
            "LoRA rank {rank} exceeds layer dimensions {d_in}×{d_out}"
        );
        let down = Tensor::randn(vec![rank, d_in], (1.0 / d_in as f64).sqrt(), rng);
        let up = Tensor::zeros(vec![d_out, rank]);
        Ok(Self {
            down: down.with_requires_grad(true),
            up: up.with_requires_grad(true),
            scale: 1.0,
        })
    }

    pub fn from_parts(down: Tensor, up: Tensor, scale: f64) -> Result<Self> {
        ensure!(
            down.is_matrix() && up.is_matrix() && down.rows() == up.cols(),
            "LoRA factors {:?} and {:?} do not share a rank",
            down.shape(),
            up.shape()
        );
        ensure!(scale.is_finite(), "LoRA scale must be finite");
        Ok(Self {
            down: down.with_requires_grad(true),
            up: up.with_requires_grad(true),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn parameter_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// `y = x·W + b` with an optional low-rank path. `W` is `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    weight: Tensor,
    bias: Tensor,
    lora: Option<LoraAdapter>,
}

impl Affine {
    fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Tensor::randn(vec![d_in, d_out], (1.0 / d_in as f64).sqrt(), rng).with_requires_grad(true),
            bias: Tensor::zeros(vec![d_out]).with_requires_grad(true),
            lora: None,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        ensure!(
            weight.is_matrix() && bias.numel() == weight.cols(),
            "affine weight {:?} and bias {:?} disagree",
            weight.shape(),
            bias.shape()
        );
        Ok(Self {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
            lora: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn lora(&self) -> Option<&LoraAdapter> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraAdapter> {
        self.lora.as_mut()
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.weight.set_requires_grad(!frozen);
        self.bias.set_requires_grad(!frozen);
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let y = tape.matmul(x, w)?;
        let mut y = tape.add_row(y, b)?;
        if let Some(lora) = &self.lora {
            let down = tape.leaf(&lora.down);
            let up = tape.leaf(&lora.up);
            let down_t = tape.transpose(down)?;
            let up_t = tape.transpose(up)?;
            let h = tape.matmul(x, down_t)?;
            let delta = tape.matmul(h, up_t)?;
            let delta = tape.scale(delta, lora.scale)?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
        if let Some(l) = &self.lora {
            out.push((format!("{prefix}.lora.down"), &l.down));
            out.push((format!("{prefix}.lora.up"), &l.up));
        }
    }

    fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
        if let Some(l) = &mut self.lora {
            out.push((format!("{prefix}.lora.down"), &mut l.down));
            out.push((format!("{prefix}.lora.up"), &mut l.up));
        }
    }
}

/// Affine stacks with SiLU between layers: `p → hidden… → d → …hidden → p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoencoder {
    encoder: Vec<Affine>,
    decoder: Vec<Affine>,
    frozen: bool,
}

impl ToyAutoencoder {
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            input_dim > 0 && latent_dim > 0 && hidden.iter().all(|&h| h > 0),
            "autoencoder dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let encoder = dims.windows(2).map(|w| Affine::init(w[0], w[1], &mut rng)).collect();
        let decoder = dims
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| Affine::init(*w[0], *w[1], &mut rng))
            .collect();
        Ok(Self {
            encoder,
            decoder,
            frozen: false,
        })
    }

    /// Builds from explicit layers.
    pub fn from_layers(encoder: Vec<Affine>, decoder: Vec<Affine>) -> Result<Self> {
        ensure!(!encoder.is_empty() && !decoder.is_empty(), "autoencoder needs layers");
        for stack in [&encoder, &decoder] {
            ensure!(
                stack.windows(2).all(|w| w[0].d_out() == w[1].d_in()),
                "consecutive layer dimensions disagree"
            );
        }
        ensure!(
            encoder.last().unwrap().d_out() == decoder[0].d_in(),
            "encoder output and decoder input dimensions differ"
        );
        ensure!(
            encoder[0].d_in() == decoder.last().unwrap().d_out(),
            "encoder input and decoder output dimensions differ"
        );
        Ok(Self {
            encoder,
            decoder,
            frozen: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].d_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().unwrap().d_out()
    }

    pub fn encoder(&self) -> &[Affine] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Affine] {
        &self.decoder
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops base weights from receiving gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            layer.set_frozen(true);
        }
    }

    /// Freezes the base weights and adds rank-`rank` adapters to every layer
    /// of the selected halves.
    pub fn attach_lora(&mut self, rank: usize, place: AdaptWhere, seed: u64) -> Result<()> {
        let selected = |enc: bool| if enc { place.encoder() } else { place.decoder() };
        for (enc, stack) in [(true, &self.encoder), (false, &self.decoder)] {
            if selected(enc) {
                ensure!(rank >= 1, "LoRA rank must be at least 1");
                for layer in stack {
                    ensure!(
                        rank <= layer.d_in().min(layer.d_out()),
                        "LoRA rank {rank} exceeds layer dimensions {}×{}",
                        layer.d_in(),
                        layer.d_out()
                    );
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (enc, stack) in [(true, &mut self.encoder), (false, &mut self.decoder)] {
            if selected(enc) {
                for layer in stack.iter_mut() {
                    layer.lora = Some(LoraAdapter::new(layer.d_in(), layer.d_out(), rank, &mut rng)?);
                }
            }
        }
        self.freeze();
        Ok(())
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn run(stack: &[Affine], tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in stack.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < stack.len() {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Self::run(&self.encoder, tape, x)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        Self::run(&self.decoder, tape, f)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.encode_on_tape(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let x = self.decode_on_tape(&mut tape, fv)?;
        Ok(tape.value(x).clone())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Named parameters: `encoder.0.weight`, `encoder.0.lora.down`, …
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            l.push_params(&format!("encoder.{i}"), &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.push_params(&format!("decoder.{i}"), &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.push_params_mut(&format!("encoder.{i}"), &mut out);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.push_params_mut(&format!("decoder.{i}"), &mut out);
        }
        out
    }

    /// Rebuilds a model from its named parameters. Models carrying adapters
    /// come back frozen.
    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let stack = |half: &str| -> Result<Vec<Affine>> {
            let mut layers = Vec::new();
            while let Some(weight) = find(&format!("{half}.{}.weight", layers.len())) {
                let i = layers.len();
                let bias = find(&format!("{half}.{i}.bias"))
                    .ok_or_else(|| Error::Format(format!("missing {half}.{i}.bias")))?;
                let mut layer = Affine::from_parts(weight, bias)?;
                match (
                    find(&format!("{half}.{i}.lora.down")),
                    find(&format!("{half}.{i}.lora.up")),
                ) {
                    (Some(down), Some(up)) => {
                        ensure!(
                            down.cols() == layer.d_in() && up.rows() == layer.d_out(),
                            "adapter shapes do not fit {half}.{i}"
                        );
                        layer.lora = Some(LoraAdapter::from_parts(down, up, 1.0)?);
                    }
                    (None, None) => {}
                    _ => return Err(Error::Format(format!("incomplete adapter on {half}.{i}"))),
                }
                layers.push(layer);
            }
            Ok(layers)
        };
        let encoder = stack("encoder")?;
        let decoder = stack("decoder")?;
        if encoder.is_empty() || decoder.is_empty() {
            return Err(Error::Format("checkpoint holds no autoencoder layers".into()));
        }
        let adapted = encoder.iter().chain(&decoder).any(|l| l.lora.is_some());
        let mut model = Self::from_layers(encoder, decoder)?;
        if adapted {
            model.freeze();
        }
        Ok(model)
    }
}

/// Settings of the continuous pretraining phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

/// Draws `batch` row indices uniformly with replacement.
pub(crate) fn sample_batch(rng: &mut impl Rng, rows: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..rows)).collect()
}

/// Trains an autoencoder on the rows of `data` by reconstruction MSE.
/// Returns the model and its final MSE over the whole dataset.
pub fn pretrain_continuous(data: &Tensor, settings: &PretrainSettings) -> Result<(ToyAutoencoder, f64)> {
    ensure!(data.is_matrix(), "pretraining data must be a matrix of rows");
    ensure!(settings.batch_size > 0, "batch size must be positive");
    let mut model = ToyAutoencoder::new(data.cols(), &settings.hidden, settings.latent_dim, settings.seed)?;
    let mut opt = Optimizer::new(settings.optimizer, settings.lr, settings.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..settings.steps {
        let idx = sample_batch(&mut rng, data.rows(), settings.batch_size);
        let batch = data.select_rows(&idx)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let f = model.encode_on_tape(&mut tape, x)?;
        let x_hat = model.decode_on_tape(&mut tape, f)?;
        let loss = recon_loss(&mut tape, x, x_hat)?;
        tape.backward(loss)?;
        opt.tick();
        opt.apply(&tape, model.params_mut())?;
    }
    let mse = reconstruction_mse(&model, data)?;
    Ok((model, mse))
}

pub fn reconstruction_mse(model: &ToyAutoencoder, data: &Tensor) -> Result<f64> {
    let x_hat = model.reconstruct(data)?;
    crate::quantize::quantization_error(data, &x_hat)
}

/// Tape nodes of a discrete forward pass.
#[derive(Debug, Clone)]
pub struct DiscreteForward {
    pub x: Var,
    pub f: Var,
    pub trace: RqTrace,
    /// `f + sg[Σ_l z^(l) − f]`.
    pub f_hat: Var,
    pub x_hat: Var,
}

impl DiscreteForward {
    /// Builds the in-scope objective: reconstruction plus per-level
    /// quantization and entropy terms.
    pub fn objective(&self, tape: &mut Tape, weights: &LossWeights) -> Result<(Var, LossReport)> {
        let rec = recon_loss(tape, self.x, self.x_hat)?;
        let mut quant = Vec::with_capacity(self.trace.levels.len());
        let mut entropy = Vec::with_capacity(self.trace.levels.len());
        for level in &self.trace.levels {
            quant.push(quant_loss(tape, level.input, level.z_hard, level.z_soft, weights.beta)?);
            entropy.push(match level.attention {
                Some(a) => Some(entropy_loss(tape, a)?),
                None => None,
            });
        }
        total_loss(tape, &LossParts { rec, quant, entropy }, weights)
    }

    pub fn indices(&self) -> Vec<Vec<u32>> {
        self.trace
            .levels
            .iter()
            .map(|l| l.indices.iter().map(|&i| i as u32).collect())
            .collect()
    }
}

/// Encodes, quantizes, and decodes `x` on the tape.
pub fn discrete_forward_on_tape(
    tape: &mut Tape,
    model: &ToyAutoencoder,
    rq: &ResidualQuantizer,
    x: Var,
    temperature: f64,
) -> Result<DiscreteForward> {
    ensure!(
        rq.feature_dim() == model.latent_dim(),
        "quantizer dimension {} does not match latent dimension {}",
        rq.feature_dim(),
        model.latent_dim()
    );
    let f = model.encode_on_tape(tape, x)?;
    let trace = rq.encode_on_tape(tape, f, temperature)?;
    let decoded = trace.decoded(tape)?;
    let f_hat = straight_through(tape, f, decoded)?;
    let x_hat = model.decode_on_tape(tape, f_hat)?;
    Ok(DiscreteForward {
        x,
        f,
        trace,
        f_hat,
        x_hat,
    })
}

/// Detached result of [`discrete_forward`].
#[derive(Debug, Clone)]
pub struct DiscreteOutput {
    pub f: Tensor,
    pub f_hat: Tensor,
    pub x_hat: Tensor,
    /// `levels × rows` code indices.
    pub indices: Vec<Vec<u32>>,
    pub report: LossReport,
    /// Mean row norm of the residual left after each level.
    pub residual_norms: Vec<f64>,
}

impl DiscreteOutput {
    /// Code grids, one per image of `h·w` consecutive rows.
    pub fn grids(&self, h: usize, w: usize, n: usize) -> Result<Vec<CodeGrid>> {
        crate::quantize::residual_grids(&self.indices, h, w, n)
    }
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let rows = t.rows().max(1);
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

/// Runs the discrete forward pass on a batch of rows and detaches it.
pub fn discrete_forward(
    model: &ToyAutoencoder,
    rq: &ResidualQuantizer,
    x: &Tensor,
    temperature: f64,
    weights: &LossWeights,
) -> Result<DiscreteOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = discrete_forward_on_tape(&mut tape, model, rq, xv, temperature)?;
    let (_, report) = fwd.objective(&mut tape, weights)?;
    let levels = &fwd.trace.levels;
    let residual_norms: Vec<f64> = (0..levels.len())
        .map(|l| {
            let after = levels.get(l + 1).map_or(fwd.trace.final_residual, |next| next.input);
            mean_row_norm(tape.value(after))
        })
        .collect();
    Ok(DiscreteOutput {
        f: tape.value(fwd.f).clone(),
        f_hat: tape.value(fwd.f_hat).clone(),
        x_hat: tape.value(fwd.x_hat).clone(),
        indices: fwd.indices(),
        report,
        residual_norms,
    })
}
