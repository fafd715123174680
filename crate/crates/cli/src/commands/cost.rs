//! `lrtp cost`: the analytic per-token communication-cost report.

use crate::config::{ConventionChoice, DecompositionSection, RunConfig};
use crate::report::{commas, emit, OutputFormat, Report};
use anyhow::{Context, Result};
use clap::Args;
use lrtp_core::{model_cost_report, CostInputs, CostReport};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Run configuration TOML. Defaults to the built-in 70B-class
    /// reference geometry with its published decomposition ranks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TOML file of explicit per-matrix ranks (q, k, v, o, up, gate,
    /// down), overriding the config's decomposition section.
    #[arg(long)]
    pub ranks: Option<PathBuf>,
    /// Which accounting convention(s) to report.
    #[arg(long)]
    pub convention: Option<ConventionChoice>,
    #[arg(long, default_value = "table")]
    pub format: OutputFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CostBody {
    inputs: CostInputs,
    reports: Vec<CostReport>,
}

pub fn run(args: &CostArgs) -> Result<i32> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::reference_70b(),
    };
    if let Some(path) = &args.ranks {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading ranks {}", path.display()))?;
        let ranks: BTreeMap<String, usize> =
            toml::from_str(&text).with_context(|| format!("parsing ranks {}", path.display()))?;
        config.decomposition = DecompositionSection { ratio: None, ranks };
    }
    if let Some(choice) = args.convention {
        config.run.convention = choice;
    }
    config.validate()?;

    let inputs = CostInputs::from_plan(&config.model, &config.plan()?)?;
    let reports = config
        .run
        .convention
        .conventions()
        .into_iter()
        .map(|c| model_cost_report(&inputs, c))
        .collect::<lrtp_core::Result<Vec<_>>>()?;
    let body = CostBody { inputs, reports };

    let text = match args.format {
        OutputFormat::Json => Report::new("cost", config.run.seed, body).to_json(),
        OutputFormat::Table => render_table(&body),
    };
    emit(&text, args.out.as_deref())?;
    Ok(0)
}

fn render_table(body: &CostBody) -> String {
    let mut t = String::new();
    let i = &body.inputs;
    let _ = writeln!(t, "Per-token communication cost (elements per transformer block)");
    let _ = writeln!(
        t,
        "model: h={} h_kv={} m={} layers={}",
        commas(i.h),
        commas(i.h_kv),
        commas(i.m),
        i.num_layers
    );
    let _ = writeln!(
        t,
        "ranks: q={} k={} v={} o={} up={} gate={} down={}",
        i.l_q,
        i.l_k,
        i.l_v,
        i.l_o,
        i.l_up,
        i.l_gate.map_or_else(|| "-".into(), |g| g.to_string()),
        i.l_down
    );

    for report in &body.reports {
        let _ = writeln!(t, "\nconvention: {:?}", report.convention);
        let _ = writeln!(
            t,
            "  {:<14} {:<10} {:>12} {:>12} {:>12}",
            "status", "sub-layer", "all-gather", "reduce-sum", "total"
        );
        for row in &report.rows {
            let _ = writeln!(
                t,
                "  {:<14} {:<10} {:>12} {:>12} {:>12}",
                format!("{:?}", row.status).to_lowercase(),
                format!("{:?}", row.sublayer).to_lowercase(),
                commas(row.all_gather),
                commas(row.reduce_sum),
                commas(row.total())
            );
        }
        let deinfer_ag: u64 = report
            .rows
            .iter()
            .filter(|r| matches!(r.status, lrtp_core::CostStatus::Deinfer))
            .map(|r| r.all_gather)
            .sum();
        let _ = writeln!(t, "  unoptimized block total   {}", commas(report.unoptimized_block));
        let _ = writeln!(
            t,
            "  deinfer block total       {}   (saved {}%)",
            commas(report.deinfer_block),
            report.saved_percent
        );
        let _ = writeln!(t, "  deinfer all-gather total  {}", commas(deinfer_ag));
        let _ = writeln!(
            t,
            "  single-reduce aggregate   {}   (saved {}%)",
            commas(report.single_reduce_aggregate),
            report.single_reduce_saved_percent
        );
        let _ = writeln!(
            t,
            "  whole model ({} layers)   unoptimized {} / deinfer {}",
            report.inputs.num_layers,
            commas(report.model_unoptimized),
            commas(report.model_deinfer)
        );
    }
    t
}
