//! `lrtp synth`: write a seeded synthetic dense weight archive, so the
//! decompose workflow can be driven end to end without real checkpoints.

use crate::archive::dense_to_archive;
use crate::config::RunConfig;
use crate::report::{emit, OutputFormat, Report};
use anyhow::Result;
use clap::Args;
use lrtp_core::synth_model_weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Run configuration TOML naming the model shape. Defaults to the
    /// built-in toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override for the weight generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the dense archive.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "table")]
    pub format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SynthBody {
    output: String,
    tensors: usize,
    bytes: u64,
}

pub fn run(args: &SynthArgs) -> Result<i32> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    let seed = args.seed.unwrap_or(config.run.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = synth_model_weights(&config.model, &mut rng)?;
    let archive = dense_to_archive(&config.model, &weights)?;
    let bytes = archive.to_bytes().len() as u64;
    archive.write_to(&args.output)?;

    let body =
        SynthBody { output: args.output.display().to_string(), tensors: archive.len(), bytes };
    let text = match args.format {
        OutputFormat::Json => Report::new("synth", seed, body).to_json(),
        OutputFormat::Table => {
            let mut t = String::new();
            let _ = writeln!(t, "wrote {} ({} tensors, {} bytes)", body.output, body.tensors, body.bytes);
            t
        }
    };
    emit(&text, args.out.as_deref())?;
    Ok(0)
}
