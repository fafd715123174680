//! `lrtp bench`: a desk-scale benchmark over the simulated pipelines.
//!
//! Ledger volumes, event counts, and FLOP counters are deterministic for a
//! given config and seed. Wall-clock timing is reported for orientation
//! only and lives under its own `timing` key so structured-output
//! comparisons can drop it.

use crate::config::RunConfig;
use crate::report::{commas, emit, OutputFormat, Report};
use anyhow::{bail, Result};
use clap::Args;
use lrtp_core::model::{DecomposedModelWeights, DenseModelWeights, ModelConfig};
use lrtp_core::{
    decompose_model, forward_base_attention, forward_base_mlp, forward_deinfer_attention,
    forward_deinfer_mlp, forward_dense_tp_attention, forward_dense_tp_mlp, synth_hidden,
    synth_model_weights, CollectiveKind, DecodeSession, DenseMatrix, ForwardTrace, WorkerGroup,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineChoice {
    Dense,
    Base,
    Deinfer,
}

impl FromStr for PipelineChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(PipelineChoice::Dense),
            "base" => Ok(PipelineChoice::Base),
            "deinfer" => Ok(PipelineChoice::Deinfer),
            other => bail!("unknown pipeline {other:?}; expected dense, base, or deinfer"),
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run configuration TOML. Defaults to the built-in toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which pipeline to drive.
    #[arg(long, default_value = "deinfer")]
    pub pipeline: PipelineChoice,
    /// Independent sequences, processed one after another.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Prompt tokens per sequence.
    #[arg(long, default_value_t = 4)]
    pub prefill: usize,
    /// Decode steps per sequence (0 benches prefill only).
    #[arg(long, default_value_t = 8)]
    pub decode: usize,
    /// World sizes to sweep, overriding the config's `run.tp`.
    #[arg(long, value_delimiter = ',')]
    pub tp: Option<Vec<usize>>,
    /// Seed override for the synthetic weights and inputs.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "table")]
    pub format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Wall-clock only; everything else in [`BenchRun`] is deterministic.
#[derive(Debug, Serialize)]
struct Timing {
    prefill_micros: u64,
    decode_micros: u64,
}

#[derive(Debug, Serialize)]
struct BenchRun {
    world_size: usize,
    total_tokens: usize,
    collective_events: usize,
    all_gather_elements: u64,
    reduce_sum_elements: u64,
    per_worker_matmul_flops: u64,
    per_worker_attention_flops: u64,
    timing: Timing,
}

#[derive(Debug, Serialize)]
struct BenchBody {
    pipeline: PipelineChoice,
    model: ModelConfig,
    batch: usize,
    prefill_tokens: usize,
    decode_steps: usize,
    runs: Vec<BenchRun>,
}

/// One decomposed-pipeline block forward with residuals, all layers.
fn block_forward_decomposed(
    cfg: &ModelConfig,
    weights: &DecomposedModelWeights,
    inputs: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
    deinfer: bool,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let mut x = inputs.clone();
    let mut total = ForwardTrace::new(group.world_size());
    for layer in &weights.layers {
        let (attn, t_a) = if deinfer {
            forward_deinfer_attention(cfg, &layer.attention, &x, positions, group, None)?
        } else {
            forward_base_attention(cfg, &layer.attention, &x, positions, group)?
        };
        x = x.add(&attn)?;
        let (mlp, t_m) = if deinfer {
            forward_deinfer_mlp(cfg, &layer.mlp, &x, group)?
        } else {
            forward_base_mlp(cfg, &layer.mlp, &x, group)?
        };
        x = x.add(&mlp)?;
        total.merge(&t_a)?;
        total.merge(&t_m)?;
    }
    Ok((x, total))
}

/// One dense tensor-parallel block forward with residuals, all layers.
fn block_forward_dense(
    cfg: &ModelConfig,
    weights: &DenseModelWeights,
    inputs: &DenseMatrix,
    positions: &[usize],
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let mut x = inputs.clone();
    let mut total = ForwardTrace::new(group.world_size());
    for layer in &weights.layers {
        let (attn, t_a) = forward_dense_tp_attention(cfg, &layer.attention, &x, positions, group)?;
        x = x.add(&attn)?;
        let (mlp, t_m) = forward_dense_tp_mlp(cfg, &layer.mlp, &x, group)?;
        x = x.add(&mlp)?;
        total.merge(&t_a)?;
        total.merge(&t_m)?;
    }
    Ok((x, total))
}

/// Cached decode through [`DecodeSession`]: prefill once, then one step per
/// token, paying only for the new token's collectives.
fn bench_deinfer(
    config: &RunConfig,
    dec: &DecomposedModelWeights,
    p: usize,
    args: &BenchArgs,
    seed: u64,
) -> Result<BenchRun> {
    let cache = &config.cache;
    let capacity = cache.num_blocks * cache.block_size;
    if capacity < args.prefill + args.decode {
        bail!(
            "cache capacity {capacity} tokens cannot hold prefill {} + decode {}",
            args.prefill,
            args.decode
        );
    }

    let cfg = &config.model;
    let mut trace = ForwardTrace::new(p);
    let mut prefill_time = Duration::ZERO;
    let mut decode_time = Duration::ZERO;
    for b in 0..args.batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
        let mut session = DecodeSession::new(cfg, dec, p, cache.num_blocks, cache.block_size)?;
        let prompt = synth_hidden(args.prefill, cfg.hidden_dim(), &mut rng);
        let t0 = Instant::now();
        let (_, prefill_trace) = session.prefill(&prompt)?;
        prefill_time += t0.elapsed();
        trace.merge(&prefill_trace)?;
        for _ in 0..args.decode {
            let token = synth_hidden(1, cfg.hidden_dim(), &mut rng);
            let t0 = Instant::now();
            let (_, report) = session.decode_step(&token)?;
            decode_time += t0.elapsed();
            trace.merge(&report.trace)?;
        }
    }
    Ok(summarize(p, args, &trace, prefill_time, decode_time))
}

/// Cacheless decode for the dense and base pipelines: every step reruns the
/// block forward over the whole history, so ledger volume grows with
/// context length. That recompute-from-scratch cost is the point of
/// comparison with the cached path.
fn bench_cacheless(
    config: &RunConfig,
    dense: &DenseModelWeights,
    dec: &DecomposedModelWeights,
    p: usize,
    args: &BenchArgs,
    seed: u64,
) -> Result<BenchRun> {
    let cfg = &config.model;
    let mut trace = ForwardTrace::new(p);
    let mut prefill_time = Duration::ZERO;
    let mut decode_time = Duration::ZERO;
    for b in 0..args.batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
        let mut group = WorkerGroup::new(p)?;
        let mut history = synth_hidden(args.prefill, cfg.hidden_dim(), &mut rng);

        let forward = |inputs: &DenseMatrix, group: &mut WorkerGroup| {
            let positions: Vec<usize> = (0..inputs.rows()).collect();
            match args.pipeline {
                PipelineChoice::Dense => block_forward_dense(cfg, dense, inputs, &positions, group),
                PipelineChoice::Base => {
                    block_forward_decomposed(cfg, dec, inputs, &positions, group, false)
                }
                PipelineChoice::Deinfer => {
                    block_forward_decomposed(cfg, dec, inputs, &positions, group, true)
                }
            }
        };

        let t0 = Instant::now();
        let (_, step_trace) = forward(&history, &mut group)?;
        prefill_time += t0.elapsed();
        trace.merge(&step_trace)?;
        for _ in 0..args.decode {
            let token = synth_hidden(1, cfg.hidden_dim(), &mut rng);
            history = DenseMatrix::vstack(&[&history, &token])?;
            let t0 = Instant::now();
            let (_, step_trace) = forward(&history, &mut group)?;
            decode_time += t0.elapsed();
            trace.merge(&step_trace)?;
        }
    }
    Ok(summarize(p, args, &trace, prefill_time, decode_time))
}

fn summarize(
    p: usize,
    args: &BenchArgs,
    trace: &ForwardTrace,
    prefill_time: Duration,
    decode_time: Duration,
) -> BenchRun {
    BenchRun {
        world_size: p,
        total_tokens: args.batch * (args.prefill + args.decode),
        collective_events: trace.events().len(),
        all_gather_elements: trace.volume(CollectiveKind::AllGather),
        reduce_sum_elements: trace.volume(CollectiveKind::ReduceSum),
        per_worker_matmul_flops: trace.matmul_flops(0),
        per_worker_attention_flops: trace.attention_flops(0),
        timing: Timing {
            prefill_micros: prefill_time.as_micros() as u64,
            decode_micros: decode_time.as_micros() as u64,
        },
    }
}

pub fn run(args: &BenchArgs) -> Result<i32> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    if args.batch == 0 || args.prefill == 0 {
        bail!("batch and prefill must be positive");
    }
    let seed = args.seed.unwrap_or(config.run.seed);
    let tp = args.tp.clone().unwrap_or_else(|| config.run.tp.clone());

    let cfg = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = synth_model_weights(cfg, &mut rng)?;
    let dec = decompose_model(cfg, &dense, &config.plan()?)?;

    let mut runs = Vec::new();
    for &p in &tp {
        runs.push(match args.pipeline {
            PipelineChoice::Deinfer => bench_deinfer(&config, &dec, p, args, seed)?,
            PipelineChoice::Dense | PipelineChoice::Base => {
                bench_cacheless(&config, &dense, &dec, p, args, seed)?
            }
        });
    }

    let body = BenchBody {
        pipeline: args.pipeline,
        model: config.model.clone(),
        batch: args.batch,
        prefill_tokens: args.prefill,
        decode_steps: args.decode,
        runs,
    };
    let text = match args.format {
        OutputFormat::Json => Report::new("bench", seed, body).to_json(),
        OutputFormat::Table => render_table(&body),
    };
    emit(&text, args.out.as_deref())?;
    Ok(0)
}

fn render_table(body: &BenchBody) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "pipeline {:?}: batch {}, prefill {}, decode {}",
        body.pipeline, body.batch, body.prefill_tokens, body.decode_steps
    );
    let _ = writeln!(
        t,
        "  {:>2} {:>8} {:>8} {:>14} {:>14} {:>16} {:>12} {:>12}",
        "p", "tokens", "events", "all-gather", "reduce-sum", "matmul flops", "attn flops", "micros"
    );
    for run in &body.runs {
        let _ = writeln!(
            t,
            "  {:>2} {:>8} {:>8} {:>14} {:>14} {:>16} {:>12} {:>12}",
            run.world_size,
            run.total_tokens,
            run.collective_events,
            commas(run.all_gather_elements),
            commas(run.reduce_sum_elements),
            commas(run.per_worker_matmul_flops),
            commas(run.per_worker_attention_flops),
            commas(run.timing.prefill_micros + run.timing.decode_micros)
        );
    }
    t
}
