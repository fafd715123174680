//! `lrtp check`: run the property suites and exit nonzero on any failure.

use crate::config::RunConfig;
use crate::report::{emit, OutputFormat, Report};
use anyhow::Result;
use clap::Args;
use lrtp_core::model::ModelConfig;
use lrtp_core::{all_pass, run_suites, PropertyOutcome, SuiteName, VerifySpec};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Run configuration TOML. Defaults to the built-in toy model, which
    /// finishes in seconds.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated suites (equivalence, census, kvcache, cost) or
    /// "all".
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// World sizes to sweep, overriding the config's `run.tp`.
    #[arg(long, value_delimiter = ',')]
    pub tp: Option<Vec<usize>>,
    /// Seed override for the synthetic weights and inputs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random instances per numerical property.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Decode steps for the cache suite.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "table")]
    pub format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CheckBody {
    model: ModelConfig,
    suites: Vec<SuiteName>,
    tp: Vec<usize>,
    instances: usize,
    decode_steps: usize,
    tolerance: f64,
    properties: Vec<PropertyOutcome>,
    passed: bool,
}

fn parse_suites(arg: &str) -> Result<Vec<SuiteName>> {
    if arg == "all" {
        return Ok(SuiteName::ALL.to_vec());
    }
    arg.split(',')
        .map(|part| Ok(part.trim().parse::<SuiteName>()?))
        .collect()
}

pub fn run(args: &CheckArgs) -> Result<i32> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    let suites = parse_suites(&args.suite)?;

    let mut spec = VerifySpec::new(config.model.clone());
    spec.plan = Some(config.plan()?);
    spec.tp = args.tp.clone().unwrap_or_else(|| config.run.tp.clone());
    spec.seed = args.seed.unwrap_or(config.run.seed);
    if let Some(n) = args.instances {
        spec.instances = n;
    }
    if let Some(n) = args.steps {
        spec.decode_steps = n;
    }

    let properties = run_suites(&spec, &suites)?;
    let passed = all_pass(&properties);
    let seed = spec.seed;
    let body = CheckBody {
        model: config.model,
        suites,
        tp: spec.tp,
        instances: spec.instances,
        decode_steps: spec.decode_steps,
        tolerance: spec.tolerance,
        properties,
        passed,
    };

    let passed = body.passed;
    let text = match args.format {
        OutputFormat::Json => Report::new("check", seed, body).to_json(),
        OutputFormat::Table => render_table(&body),
    };
    emit(&text, args.out.as_deref())?;
    Ok(if passed { 0 } else { 1 })
}

fn render_table(body: &CheckBody) -> String {
    let mut t = String::new();
    for o in &body.properties {
        let _ = writeln!(
            t,
            "{} {:<12} {:<44} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.suite,
            o.property,
            o.detail
        );
    }
    let failed = body.properties.iter().filter(|o| !o.passed).count();
    let _ = writeln!(
        t,
        "{}: {} properties, {} failed",
        if body.passed { "ok" } else { "FAILED" },
        body.properties.len(),
        failed
    );
    t
}
