//! `lrtp decompose`: factor a dense weight archive into low-rank pairs and
//! report the per-matrix reconstruction error.

use crate::archive::{decomposed_to_archive, dense_from_archive, tensor_name, WeightArchive};
use crate::config::RunConfig;
use crate::report::{emit, OutputFormat, Report};
use anyhow::{bail, Context, Result};
use clap::Args;
use lrtp_core::model::{MatrixName, MlpVariant};
use lrtp_core::{
    decompose_model, rel_frobenius_distance, DecompositionPlan, DecomposedModelWeights,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Dense weight archive to factor.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the decomposed archive.
    #[arg(long)]
    pub output: PathBuf,
    /// Run configuration naming the model shape the archive must match.
    /// Defaults to the built-in toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Uniform compression ratio, overriding the config's decomposition
    /// section.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// TOML file of explicit per-matrix ranks, overriding the config's
    /// decomposition section.
    #[arg(long)]
    pub ranks: Option<PathBuf>,
    #[arg(long, default_value = "table")]
    pub format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct MatrixReport {
    tensor: String,
    rank: usize,
    rel_error: f64,
}

#[derive(Debug, Serialize)]
struct DecomposeBody {
    input: String,
    output: String,
    tensors: Vec<MatrixReport>,
}

fn plan_for(args: &DecomposeArgs, config: &RunConfig) -> Result<DecompositionPlan> {
    let cfg = &config.model;
    let plan = match (&args.ratio, &args.ranks) {
        (Some(_), Some(_)) => bail!("--ratio and --ranks are mutually exclusive"),
        (Some(ratio), None) => DecompositionPlan::from_ratio(cfg, *ratio)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading ranks {}", path.display()))?;
            let named: BTreeMap<String, usize> = toml::from_str(&text)
                .with_context(|| format!("parsing ranks {}", path.display()))?;
            let mut ranks = BTreeMap::new();
            for (key, &rank) in &named {
                ranks.insert(MatrixName::parse(key)?, rank);
            }
            DecompositionPlan::uniform(cfg.num_layers, ranks)
        }
        (None, None) => config.plan()?,
    };
    plan.validate(cfg)?;
    Ok(plan)
}

fn matrix_reports(
    config: &RunConfig,
    plan: &DecompositionPlan,
    dec: &DecomposedModelWeights,
) -> Result<Vec<MatrixReport>> {
    let cfg = &config.model;
    let mut tensors = Vec::new();
    for (l, layer) in dec.layers.iter().enumerate() {
        for name in MatrixName::ALL {
            if name == MatrixName::Gate && cfg.mlp_variant == MlpVariant::NonGlu {
                continue;
            }
            let pair = match name {
                MatrixName::Q => &layer.attention.q,
                MatrixName::K => &layer.attention.k,
                MatrixName::V => &layer.attention.v,
                MatrixName::O => &layer.attention.o,
                MatrixName::Up => &layer.mlp.up,
                MatrixName::Gate => layer.mlp.gate.as_ref().expect("GLU checked above"),
                MatrixName::Down => &layer.mlp.down,
            };
            let original = dec
                .dense
                .matrix(l, name)
                .with_context(|| format!("dense weights lack {}", tensor_name(l, name)))?;
            tensors.push(MatrixReport {
                tensor: tensor_name(l, name),
                rank: plan.rank(l, name)?,
                rel_error: rel_frobenius_distance(&pair.reconstruct(), original),
            });
        }
    }
    Ok(tensors)
}

pub fn run(args: &DecomposeArgs) -> Result<i32> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    let plan = plan_for(args, &config)?;

    let archive = WeightArchive::read_from(&args.input)?;
    let weights = dense_from_archive(&config.model, &archive)?;
    let dec = decompose_model(&config.model, &weights, &plan)?;
    decomposed_to_archive(&config.model, &dec)?.write_to(&args.output)?;

    let body = DecomposeBody {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        tensors: matrix_reports(&config, &plan, &dec)?,
    };
    let text = match args.format {
        OutputFormat::Json => Report::new("decompose", config.run.seed, body).to_json(),
        OutputFormat::Table => render_table(&body),
    };
    emit(&text, args.out.as_deref())?;
    Ok(0)
}

fn render_table(body: &DecomposeBody) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "decomposed {} -> {}", body.input, body.output);
    let _ = writeln!(t, "  {:<28} {:>6} {:>12}", "tensor", "rank", "rel error");
    for row in &body.tensors {
        let _ = writeln!(t, "  {:<28} {:>6} {:>12.3e}", row.tensor, row.rank, row.rel_error);
    }
    t
}
