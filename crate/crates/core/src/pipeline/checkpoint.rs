use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::config::RunConfig;
use super::generate::new_generator;
use super::train::Tokenizer;
use crate::error::{ensure, Error, Result};
use crate::maskgit::GeneratorModel;
use crate::numkit::{read_tensors, write_tensors, NamedTensors, Tensor};
use crate::vae::ToyAutoencoder;

pub fn save_named(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn load_named(path: &Path) -> Result<NamedTensors> {
    let file =
        File::open(path).map_err(|e| Error::contract(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_tensors(BufReader::new(file))
}

/// Overwrites every listed parameter with the tensor of the same name,
/// keeping its gradient flag.
pub fn assign_named(params: Vec<(String, &mut Tensor)>, named: &[(String, Tensor)]) -> Result<()> {
    for (name, p) in params {
        let src = named
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        ensure!(
            src.shape() == p.shape(),
            "checkpoint {name} has shape {:?}, model expects {:?}",
            src.shape(),
            p.shape()
        );
        p.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

pub fn save_autoencoder(path: &Path, ae: &ToyAutoencoder) -> Result<()> {
    save_named(path, &ae.params())
}

pub fn load_autoencoder(path: &Path) -> Result<ToyAutoencoder> {
    ToyAutoencoder::from_named(&load_named(path)?)
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    save_named(path, &tok.params())
}

pub fn load_tokenizer(path: &Path, cfg: &RunConfig) -> Result<Tokenizer> {
    Tokenizer::from_named(cfg, &load_named(path)?)
}

pub fn save_generator(path: &Path, model: &GeneratorModel) -> Result<()> {
    save_named(path, &model.params())
}

/// Generator shaped by `cfg` for the tokenizer, with weights from `path`.
pub fn load_generator(path: &Path, cfg: &RunConfig, tok: &Tokenizer) -> Result<GeneratorModel> {
    let named = load_named(path)?;
    let mut model = new_generator(cfg, tok)?;
    assign_named(model.params_mut(), &named)?;
    Ok(model)
}
