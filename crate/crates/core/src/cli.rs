//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::pipeline::checkpoint::{
    load_autoencoder, load_generator, load_tokenizer, save_autoencoder, save_generator, save_tokenizer,
};
use crate::pipeline::experiments::{
    heatmap, levels_sweep, parse_levels, pretrain, run_ladder, trace_dynamics, write_levels, write_table, Ladder,
};
use crate::pipeline::generate::{grids_to_rows, sample_grids, train_generator};
use crate::pipeline::{build_dataset, evaluate, train_tokenizer, ExperimentLedger, RunConfig, Split};
use crate::quantize::write_grids;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coda", version, about = "Residual attention tokenizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LadderArg {
    Components,
    Adapt,
    CodebookSize,
    Norm,
}

impl From<LadderArg> for Ladder {
    fn from(l: LadderArg) -> Self {
        match l {
            LadderArg::Components => Ladder::Components,
            LadderArg::Adapt => Ladder::Adapt,
            LadderArg::CodebookSize => Ladder::CodebookSize,
            LadderArg::Norm => Ladder::Norm,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the continuous autoencoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the tokenizer (quantizer plus adapters) on a pretrained autoencoder.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Pretrained autoencoder; defaults to <out>/pretrained.ckpt.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Train the masked-token generator on tokenized training data.
    TrainGen {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint; defaults to <out>/tokenizer.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a tokenizer checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation ladder and write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "components")]
        ladder: LadderArg,
        /// Pretrained autoencoder; pretrained on the fly when omitted.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Trace code positions during training on 2-D data.
    Dynamics {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
    /// Sweep the number of residual levels.
    Levels {
        #[command(flatten)]
        common: Common,
        /// Inclusive range such as 1..10, or a comma-separated list.
        #[arg(long, default_value = "1..10")]
        levels: String,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Top-k assignment confidences for eval features.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        rows: usize,
    },
    /// Sample code grids from a trained generator.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint; defaults to <out>/tokenizer.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Generator checkpoint; defaults to <out>/generator.ckpt.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Adapt { .. } => "adapt",
            Command::TrainGen { .. } => "train-gen",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Dynamics { .. } => "dynamics",
            Command::Levels { .. } => "levels",
            Command::Heatmap { .. } => "heatmap",
            Command::Decode { .. } => "decode",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common }
            | Command::Adapt { common, .. }
            | Command::TrainGen { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Dynamics { common, .. }
            | Command::Levels { common, .. }
            | Command::Heatmap { common, .. }
            | Command::Decode { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn pretrained_if_needed(
    cfg: &RunConfig,
    path: &Option<PathBuf>,
    out: &Path,
) -> Result<Option<crate::vae::ToyAutoencoder>> {
    if !cfg.uses_autoencoder() {
        return Ok(None);
    }
    let path = or_default(path, out, "pretrained.ckpt");
    if !path.exists() {
        return Err(Error::contract(format!(
            "pretrained autoencoder weights not found at {}; run `pretrain` first",
            path.display()
        )));
    }
    load_autoencoder(&path).map(Some)
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let mut ledger = ExperimentLedger::new(cmd.name(), &cfg);

    match cmd {
        Command::Pretrain { .. } => {
            let (ae, mse) = pretrain(&cfg)?;
            let path = out.join("pretrained.ckpt");
            save_autoencoder(&path, &ae)?;
            println!("pretrain reconstruction mse {mse:.6e} -> {}", path.display());
            ledger.checkpoints.push(path);
        }
        Command::Adapt { pretrained, .. } => {
            let ae = pretrained_if_needed(&cfg, pretrained, out)?;
            let metrics_path = out.join("metrics.jsonl");
            let mut metrics = create(&metrics_path)?;
            let outcome = train_tokenizer(&cfg, ae.as_ref(), &mut metrics, None)?;
            metrics.flush()?;
            let path = out.join("tokenizer.ckpt");
            save_tokenizer(&path, &outcome.tokenizer)?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "step {} quant_err {:.6e} psnr {:.3} utilization {:.3}",
                    last.step, last.quant_err, last.psnr, last.utilization
                );
            }
            ledger.metrics_path = Some(metrics_path);
            ledger.checkpoints.push(path);
        }
        Command::Eval { checkpoint, .. } => {
            let path = or_default(checkpoint, out, "tokenizer.ckpt");
            let tok = load_tokenizer(&path, &cfg)?;
            let data = build_dataset(&cfg, Split::Eval)?;
            let record = evaluate(&tok, &cfg, &data, cfg.train.steps)?;
            let metrics_path = out.join("eval.jsonl");
            let mut w = create(&metrics_path)?;
            record.write_jsonl(&mut w)?;
            w.flush()?;
            record.write_jsonl(std::io::stdout().lock())?;
            ledger.metrics_path = Some(metrics_path);
            ledger.checkpoints.push(path);
        }
        Command::TrainGen { checkpoint, .. } => {
            let tok_path = or_default(checkpoint, out, "tokenizer.ckpt");
            let tok = load_tokenizer(&tok_path, &cfg)?;
            let outcome = train_generator(&cfg, &tok)?;
            let path = out.join("generator.ckpt");
            save_generator(&path, &outcome.model)?;
            let loss_path = out.join("generator_loss.csv");
            let mut w = create(&loss_path)?;
            writeln!(w, "step,loss")?;
            for (i, l) in outcome.losses.iter().enumerate() {
                writeln!(w, "{},{l}", i + 1)?;
            }
            w.flush()?;
            println!(
                "mlm loss at mask ratio 0.5: train {:.4} eval {:.4}",
                outcome.train_loss, outcome.eval_loss
            );
            ledger.checkpoints.extend([tok_path, path]);
            ledger.outputs.push(loss_path);
        }
        Command::Decode {
            checkpoint, generator, ..
        } => {
            let tok_path = or_default(checkpoint, out, "tokenizer.ckpt");
            let gen_path = or_default(generator, out, "generator.ckpt");
            let tok = load_tokenizer(&tok_path, &cfg)?;
            let model = load_generator(&gen_path, &cfg, &tok)?;
            let grids = sample_grids(&cfg, &model)?;
            let grid_path = out.join("samples.grids");
            let mut w = create(&grid_path)?;
            write_grids(&mut w, &grids)?;
            w.flush()?;
            let rows = grids_to_rows(&tok, &grids)?;
            let rows_path = out.join("samples.csv");
            let mut w = create(&rows_path)?;
            writeln!(w, "row,values")?;
            for i in 0..rows.rows() {
                let vals: Vec<String> = rows.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{i},{}", vals.join(";"))?;
            }
            w.flush()?;
            println!("{} samples -> {}", grids.len(), grid_path.display());
            ledger.checkpoints.extend([tok_path, gen_path]);
            ledger.outputs.extend([grid_path, rows_path]);
        }
        Command::Ablate { ladder, pretrained, .. } => {
            let ae = match pretrained {
                Some(p) if cfg.uses_autoencoder() => Some(load_autoencoder(p)?),
                _ => None,
            };
            let ladder = Ladder::from(*ladder);
            let rows = run_ladder(&cfg, ladder, ae.as_ref())?;
            let name = serde_json::to_string(&ladder).map_err(|e| Error::Format(e.to_string()))?;
            let path = out.join(format!("ablation_{}.csv", name.trim_matches('"')));
            write_table(create(&path)?, &rows)?;
            write_table(std::io::stdout().lock(), &rows)?;
            ledger.outputs.push(path);
        }
        Command::Levels { levels, pretrained, .. } => {
            let levels = parse_levels(levels)?;
            let ae = match pretrained {
                Some(p) if cfg.uses_autoencoder() => Some(load_autoencoder(p)?),
                _ => None,
            };
            let rows = levels_sweep(&cfg, &levels, ae.as_ref())?;
            let path = out.join("levels.csv");
            write_levels(create(&path)?, &rows)?;
            write_levels(std::io::stdout().lock(), &rows)?;
            ledger.outputs.push(path);
        }
        Command::Dynamics { every, .. } => {
            let trace = trace_dynamics(&cfg, *every)?;
            let path = out.join("dynamics.csv");
            trace.write_csv(create(&path)?)?;
            println!("{} snapshots -> {}", trace.snapshots().len(), path.display());
            ledger.outputs.push(path);
        }
        Command::Heatmap {
            checkpoint, k, rows, ..
        } => {
            let path = or_default(checkpoint, out, "tokenizer.ckpt");
            let tok = load_tokenizer(&path, &cfg)?;
            let map = heatmap(&cfg, &tok, *rows, *k)?;
            let csv = out.join("heatmap.csv");
            map.write_csv(create(&csv)?)?;
            println!(
                "{}x{} confidences -> {}",
                map.values().rows(),
                map.values().cols(),
                csv.display()
            );
            ledger.checkpoints.push(path);
            ledger.outputs.push(csv);
        }
    }
    ledger.write(&out.join(format!("ledger-{}.json", cmd.name())))?;
    Ok(())
}
