//! Named property suites over the whole stack: numerical equivalence,
//! collective census, cache replay discipline, and ledger reconciliation.
//!
//! Each suite runs a fixed set of properties against one model config and
//! reports a [`PropertyOutcome`] per property. Failures are data, not
//! errors: a suite returns `Err` only when it cannot run at all (invalid
//! config, rank out of range). The CLI `check` command renders these
//! outcomes; integration tests assert on them directly.

use crate::costmodel::{
    block_cost, compare_with_measured, CostConvention, CostInputs, CostStatus, PipelineMode,
};
use crate::decode::{recompute_reference, DecodeSession};
use crate::decomposition::{decompose_model, DecompositionPlan};
use crate::error::{Error, Result};
use crate::kvcache::{
    gather_latents, reconstruct_k, reconstruct_v, scan_contiguous_runs, CacheParams,
    PagedLowRankCache, ReplayBuffers,
};
use crate::linalg::{matmul, rel_frobenius_distance, DenseMatrix};
use crate::model::{synth_hidden, synth_model_weights, MlpVariant, ModelConfig};
use crate::parallel::{CollectiveKind, TrafficEvent, WorkerGroup};
use crate::pipelines::{
    forward_base_attention, forward_base_mlp, forward_deinfer_attention, forward_deinfer_mlp,
    forward_dense_tp_attention, forward_dense_tp_mlp, kv_head_range, query_head_range,
    shard_deinfer_attention, ForwardTrace,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

/// One checked property: which suite it belongs to, what it claims, and how
/// the run went.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyOutcome {
    pub suite: &'static str,
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyOutcome {
    fn new(suite: &'static str, property: &str, passed: bool, detail: String) -> Self {
        Self { suite, property: property.to_string(), passed, detail }
    }
}

pub fn all_pass(outcomes: &[PropertyOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// The suites `check` can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    Equivalence,
    Census,
    Kvcache,
    Cost,
}

impl SuiteName {
    pub const ALL: [SuiteName; 4] =
        [SuiteName::Equivalence, SuiteName::Census, SuiteName::Kvcache, SuiteName::Cost];

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteName::Equivalence => "equivalence",
            SuiteName::Census => "census",
            SuiteName::Kvcache => "kvcache",
            SuiteName::Cost => "cost",
        }
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivalence" => Ok(SuiteName::Equivalence),
            "census" => Ok(SuiteName::Census),
            "kvcache" => Ok(SuiteName::Kvcache),
            "cost" => Ok(SuiteName::Cost),
            other => Err(Error::Parameter(format!(
                "unknown suite {other:?}; expected equivalence, census, kvcache, cost, or all"
            ))),
        }
    }
}

/// What to verify and how hard.
#[derive(Debug, Clone)]
pub struct VerifySpec {
    pub cfg: ModelConfig,
    /// Compression ratio for the lossy decomposition the suites exercise.
    pub ratio: f64,
    /// Explicit plan to use instead of deriving one from `ratio`.
    pub plan: Option<DecompositionPlan>,
    /// World sizes to sweep. Sizes that cannot shard the config are a
    /// spec error, not a skipped case.
    pub tp: Vec<usize>,
    pub seed: u64,
    /// Independent random instances per numerical property.
    pub instances: usize,
    /// Decode steps for the cache suite.
    pub decode_steps: usize,
    /// Relative Frobenius tolerance for lossy-path equivalence.
    pub tolerance: f64,
}

impl VerifySpec {
    pub fn new(cfg: ModelConfig) -> Self {
        Self {
            cfg,
            ratio: 0.5,
            plan: None,
            tp: vec![1, 2, 4],
            seed: 7,
            instances: 8,
            decode_steps: 16,
            tolerance: 1e-8,
        }
    }

    /// The lossy decomposition plan the suites exercise.
    fn lossy_plan(&self) -> Result<DecompositionPlan> {
        match &self.plan {
            Some(plan) => {
                plan.validate(&self.cfg)?;
                Ok(plan.clone())
            }
            None => DecompositionPlan::from_ratio(&self.cfg, self.ratio),
        }
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Parameter(format!(
                "ratio {} is outside [0, 1)",
                self.ratio
            )));
        }
        if self.tp.is_empty() || self.instances == 0 || self.decode_steps == 0 {
            return Err(Error::Parameter(
                "tp set, instances, and decode steps must be non-empty".into(),
            ));
        }
        if self.tolerance <= 0.0 || self.tolerance.is_nan() {
            return Err(Error::Parameter("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Run the selected suites in order and concatenate their outcomes.
pub fn run_suites(spec: &VerifySpec, suites: &[SuiteName]) -> Result<Vec<PropertyOutcome>> {
    let mut out = Vec::new();
    for suite in suites {
        out.extend(match suite {
            SuiteName::Equivalence => equivalence_suite(spec)?,
            SuiteName::Census => census_suite(spec)?,
            SuiteName::Kvcache => kvcache_suite(spec)?,
            SuiteName::Cost => cost_suite(spec)?,
        });
    }
    Ok(out)
}

fn fmt_worst(worst: f64, instances: usize, tp: &[usize]) -> String {
    format!("{instances} instances, tp {tp:?}, worst rel err {worst:.3e}")
}

/// Numerical equivalence across the three pipelines.
///
/// Properties: DeInfer equals Base; both equal the single-worker decomposed
/// oracle; every world size agrees with every other; and with a lossless
/// plan DeInfer equals the dense pipeline. All within `spec.tolerance`
/// relative Frobenius distance, worst case over instances, layers, and
/// world sizes.
pub fn equivalence_suite(spec: &VerifySpec) -> Result<Vec<PropertyOutcome>> {
    spec.validate()?;
    let cfg = &spec.cfg;
    let plan = spec.lossy_plan()?;
    let lossless_plan = DecompositionPlan::lossless(cfg)?;

    let mut worst_vs_base: f64 = 0.0;
    let mut worst_vs_oracle: f64 = 0.0;
    let mut worst_base_vs_oracle: f64 = 0.0;
    let mut worst_lossless: f64 = 0.0;

    for i in 0..spec.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        let weights = synth_model_weights(cfg, &mut rng)?;
        let dec = decompose_model(cfg, &weights, &plan)?;
        let lossless = decompose_model(cfg, &weights, &lossless_plan)?;
        let t = 2 + i % 3;
        let hidden = synth_hidden(t, cfg.hidden_dim(), &mut rng);
        let positions: Vec<usize> = (0..t).collect();

        for layer in 0..cfg.num_layers {
            let attn = &dec.layers[layer].attention;
            let mlp = &dec.layers[layer].mlp;

            let mut g1 = WorkerGroup::new(1)?;
            let (a_oracle, _) =
                forward_deinfer_attention(cfg, attn, &hidden, &positions, &mut g1, None)?;
            let (m_oracle, _) = forward_deinfer_mlp(cfg, mlp, &hidden, &mut g1)?;
            let (a_dense, _) = forward_dense_tp_attention(
                cfg,
                &weights.layers[layer].attention,
                &hidden,
                &positions,
                &mut g1,
            )?;
            let (m_dense, _) =
                forward_dense_tp_mlp(cfg, &weights.layers[layer].mlp, &hidden, &mut g1)?;

            for &p in &spec.tp {
                let mut g = WorkerGroup::new(p)?;
                let (a_de, _) =
                    forward_deinfer_attention(cfg, attn, &hidden, &positions, &mut g, None)?;
                let (m_de, _) = forward_deinfer_mlp(cfg, mlp, &hidden, &mut g)?;
                let (a_base, _) =
                    forward_base_attention(cfg, attn, &hidden, &positions, &mut g)?;
                let (m_base, _) = forward_base_mlp(cfg, mlp, &hidden, &mut g)?;

                worst_vs_base = worst_vs_base
                    .max(rel_frobenius_distance(&a_de, &a_base))
                    .max(rel_frobenius_distance(&m_de, &m_base));
                worst_vs_oracle = worst_vs_oracle
                    .max(rel_frobenius_distance(&a_de, &a_oracle))
                    .max(rel_frobenius_distance(&m_de, &m_oracle));
                worst_base_vs_oracle = worst_base_vs_oracle
                    .max(rel_frobenius_distance(&a_base, &a_oracle))
                    .max(rel_frobenius_distance(&m_base, &m_oracle));

                let (a_ll, _) = forward_deinfer_attention(
                    cfg,
                    &lossless.layers[layer].attention,
                    &hidden,
                    &positions,
                    &mut g,
                    None,
                )?;
                let (m_ll, _) =
                    forward_deinfer_mlp(cfg, &lossless.layers[layer].mlp, &hidden, &mut g)?;
                worst_lossless = worst_lossless
                    .max(rel_frobenius_distance(&a_ll, &a_dense))
                    .max(rel_frobenius_distance(&m_ll, &m_dense));
            }
        }
    }

    let tol = spec.tolerance;
    let detail = |w: f64| fmt_worst(w, spec.instances, &spec.tp);
    Ok(vec![
        PropertyOutcome::new(
            "equivalence",
            "deinfer-matches-base",
            worst_vs_base <= tol,
            detail(worst_vs_base),
        ),
        PropertyOutcome::new(
            "equivalence",
            "deinfer-matches-single-worker-oracle",
            worst_vs_oracle <= tol,
            detail(worst_vs_oracle),
        ),
        PropertyOutcome::new(
            "equivalence",
            "base-matches-single-worker-oracle",
            worst_base_vs_oracle <= tol,
            detail(worst_base_vs_oracle),
        ),
        PropertyOutcome::new(
            "equivalence",
            "lossless-deinfer-matches-dense",
            worst_lossless <= tol,
            detail(worst_lossless),
        ),
    ])
}

/// Collective census: how many collectives of each kind one forward issues.
///
/// Per sub-layer: dense TP uses 1 reduce-sum; the naive decomposed pipeline
/// uses 4 reduce-sums for attention and 3 (GLU) or 2 (non-GLU) for the MLP;
/// DeInfer uses exactly 1 all-gather plus 1 reduce-sum for each. At world
/// size 1 every pipeline moves zero ledger volume.
pub fn census_suite(spec: &VerifySpec) -> Result<Vec<PropertyOutcome>> {
    spec.validate()?;
    let cfg = &spec.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = synth_model_weights(cfg, &mut rng)?;
    let plan = spec.lossy_plan()?;
    let dec = decompose_model(cfg, &weights, &plan)?;
    let t = 2;
    let hidden = synth_hidden(t, cfg.hidden_dim(), &mut rng);
    let positions: Vec<usize> = (0..t).collect();

    let census = |trace: &ForwardTrace| {
        (
            trace.collective_calls(CollectiveKind::AllGather),
            trace.collective_calls(CollectiveKind::ReduceSum),
        )
    };
    let mlp_reduces = match cfg.mlp_variant {
        MlpVariant::Glu => 3,
        MlpVariant::NonGlu => 2,
    };

    let mut outcomes = Vec::new();
    let mut seen_parallel = false;
    for &p in &spec.tp {
        let mut g = WorkerGroup::new(p)?;
        let (_, dense_a) =
            forward_dense_tp_attention(cfg, &weights.layers[0].attention, &hidden, &positions, &mut g)?;
        let (_, dense_m) = forward_dense_tp_mlp(cfg, &weights.layers[0].mlp, &hidden, &mut g)?;
        let (_, base_a) =
            forward_base_attention(cfg, &dec.layers[0].attention, &hidden, &positions, &mut g)?;
        let (_, base_m) = forward_base_mlp(cfg, &dec.layers[0].mlp, &hidden, &mut g)?;
        let (_, de_a) = forward_deinfer_attention(
            cfg,
            &dec.layers[0].attention,
            &hidden,
            &positions,
            &mut g,
            None,
        )?;
        let (_, de_m) = forward_deinfer_mlp(cfg, &dec.layers[0].mlp, &hidden, &mut g)?;

        if p == 1 {
            let volume: u64 = [&dense_a, &dense_m, &base_a, &base_m, &de_a, &de_m]
                .iter()
                .map(|tr| tr.total_volume())
                .sum();
            outcomes.push(PropertyOutcome::new(
                "census",
                "single-worker-moves-nothing",
                volume == 0,
                format!("p=1 total ledger volume {volume}"),
            ));
            continue;
        }
        seen_parallel = true;

        let checks = [
            ("dense-attention-one-reduce", census(&dense_a), (0, 1)),
            ("dense-mlp-one-reduce", census(&dense_m), (0, 1)),
            ("base-attention-four-reduces", census(&base_a), (0, 4)),
            ("base-mlp-reduce-per-factor", census(&base_m), (0, mlp_reduces)),
            ("deinfer-attention-gather-plus-reduce", census(&de_a), (1, 1)),
            ("deinfer-mlp-gather-plus-reduce", census(&de_m), (1, 1)),
        ];
        for (name, got, want) in checks {
            outcomes.push(PropertyOutcome::new(
                "census",
                name,
                got == want,
                format!("p={p}: {} all-gathers, {} reduce-sums", got.0, got.1),
            ));
        }
    }
    if !seen_parallel {
        outcomes.push(PropertyOutcome::new(
            "census",
            "census-needs-parallel-worker-group",
            false,
            "no world size > 1 in the tp set".into(),
        ));
    }
    Ok(outcomes)
}

/// Cache replay discipline and fidelity.
///
/// A scrambled-allocation decode session must match the batched recompute
/// at every step, keep a constant per-step traffic signature, reconstruct
/// K/V exactly, scan blocks into minimal runs, and keep matching after a
/// squeeze.
pub fn kvcache_suite(spec: &VerifySpec) -> Result<Vec<PropertyOutcome>> {
    spec.validate()?;
    let cfg = &spec.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xcafe));
    let weights = synth_model_weights(cfg, &mut rng)?;
    let plan = spec.lossy_plan()?;
    let dec = decompose_model(cfg, &weights, &plan)?;

    let prompt_len = 3;
    let block_size = 2;
    let num_blocks = (prompt_len + spec.decode_steps + 2).div_ceil(block_size) + 1;

    let mut outcomes = Vec::new();
    for &p in &spec.tp {
        let mut session = DecodeSession::new(cfg, &dec, p, num_blocks, block_size)?;
        session.scramble_block_allocation(spec.seed)?;
        let mut inputs = synth_hidden(prompt_len, cfg.hidden_dim(), &mut rng);
        session.prefill(&inputs)?;

        let mut worst: f64 = 0.0;
        let mut signatures: Vec<Vec<(String, CollectiveKind, u64)>> = Vec::new();
        for _ in 0..spec.decode_steps {
            let token = synth_hidden(1, cfg.hidden_dim(), &mut rng);
            let (out, report) = session.decode_step(&token)?;
            signatures.push(
                report
                    .trace
                    .events()
                    .iter()
                    .map(|e| (e.tag.clone(), e.kind, e.elements))
                    .collect(),
            );
            inputs = DenseMatrix::vstack(&[&inputs, &token])?;
            let positions: Vec<usize> = (0..inputs.rows()).collect();
            let want = recompute_reference(cfg, &dec, &inputs, &positions, p)?;
            let got = DenseMatrix::new(1, out.cols(), out.row(0).to_vec())?;
            let want_last =
                DenseMatrix::new(1, want.cols(), want.row(want.rows() - 1).to_vec())?;
            worst = worst.max(rel_frobenius_distance(&got, &want_last));
        }

        outcomes.push(PropertyOutcome::new(
            "kvcache",
            "scrambled-decode-matches-recompute",
            worst <= spec.tolerance,
            format!("p={p}, {} steps, worst rel err {worst:.3e}", spec.decode_steps),
        ));
        let stable = signatures.windows(2).all(|w| w[0] == w[1]);
        outcomes.push(PropertyOutcome::new(
            "kvcache",
            "replay-signature-constant",
            stable && session.steps_completed() == spec.decode_steps as u64,
            format!(
                "p={p}, {} steps, {} events per step",
                session.steps_completed(),
                signatures.first().map_or(0, Vec::len)
            ),
        ));

        // Run-scan minimality on the scrambled physical placement.
        let mut scan_ok = true;
        let mut run_counts = Vec::new();
        for layer in 0..cfg.num_layers {
            let blocks = session.cache(layer).sequence_blocks(0)?;
            let runs = scan_contiguous_runs(blocks);
            let boundaries = blocks.windows(2).filter(|w| w[1] != w[0] + 1).count();
            scan_ok &= runs.len() == 1 + boundaries;
            let rebuilt: Vec<usize> = runs
                .iter()
                .flat_map(|r| r.physical_start..r.physical_start + r.len)
                .collect();
            scan_ok &= rebuilt == blocks;
            run_counts.push(runs.len());
        }
        outcomes.push(PropertyOutcome::new(
            "kvcache",
            "block-scan-minimal-runs",
            scan_ok,
            format!("p={p}, per-layer run counts {run_counts:?}"),
        ));
    }

    outcomes.push(reconstruction_fidelity(spec, &dec)?);
    outcomes.push(squeeze_property(spec)?);
    Ok(outcomes)
}

/// Reconstructed K/V from a scrambled cache equals direct multiplication of
/// the stored latents with the up factors, per worker.
fn reconstruction_fidelity(
    spec: &VerifySpec,
    dec: &crate::model::DecomposedModelWeights,
) -> Result<PropertyOutcome> {
    let cfg = &spec.cfg;
    let p = *spec.tp.iter().max().unwrap();
    let shards = shard_deinfer_attention(cfg, &dec.layers[0].attention, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xbeef));

    let tokens = 9;
    let params = CacheParams { num_blocks: 8, block_size: 2, l_k: shards.l_k(), l_v: shards.l_v() };
    let mut cache = PagedLowRankCache::new(params)?;
    // Fragment the free list through ordinary churn before the real
    // sequence allocates.
    cache.create_sequence(1)?;
    cache.create_sequence(2)?;
    for t in 0..6 {
        let id = 1 + (t % 2) as u64;
        cache.append_token(id, &vec![0.0; params.l_k], &vec![0.0; params.l_v], t)?;
    }
    cache.free_sequence(1)?;
    cache.free_sequence(2)?;

    cache.create_sequence(0)?;
    let mut k_rows = DenseMatrix::zeros(tokens, params.l_k);
    let mut v_rows = DenseMatrix::zeros(tokens, params.l_v);
    for t in 0..tokens {
        let k = synth_hidden(1, params.l_k, &mut rng);
        let v = synth_hidden(1, params.l_v, &mut rng);
        k_rows.data_mut()[t * params.l_k..(t + 1) * params.l_k].copy_from_slice(k.row(0));
        v_rows.data_mut()[t * params.l_v..(t + 1) * params.l_v].copy_from_slice(v.row(0));
        cache.append_token(0, k.row(0), v.row(0), t)?;
    }

    let capacity = params.capacity_tokens();
    let d = cfg.head_dim;
    let mut worst: f64 = 0.0;
    for r in 0..p {
        let kv_cols = kv_head_range(cfg, p, r)?.len() * d;
        let q_cols = query_head_range(cfg, p, r)?.len() * d;
        let mut bufs = ReplayBuffers::new(capacity, params.l_k, params.l_v, kv_cols, q_cols)?;
        gather_latents(&cache, 0, &mut bufs)?;
        reconstruct_k(&mut bufs, shards.k_up(r))?;
        reconstruct_v(&mut bufs, shards.v_up(r))?;

        let want_k = matmul(&k_rows, shards.k_up(r))?;
        let want_v = matmul(&v_rows, shards.v_up(r))?;
        for t in 0..tokens {
            let got_k = DenseMatrix::new(1, kv_cols, bufs.k_heads.row(t).to_vec())?;
            let got_v = DenseMatrix::new(1, kv_cols, bufs.v_heads.row(t).to_vec())?;
            let want_k_row = DenseMatrix::new(1, kv_cols, want_k.row(t).to_vec())?;
            let want_v_row = DenseMatrix::new(1, kv_cols, want_v.row(t).to_vec())?;
            worst = worst
                .max(rel_frobenius_distance(&got_k, &want_k_row))
                .max(rel_frobenius_distance(&got_v, &want_v_row));
        }
    }
    Ok(PropertyOutcome::new(
        "kvcache",
        "reconstruction-matches-direct-lowrank",
        worst <= 1e-10,
        format!("p={p}, {tokens} scattered tokens, worst rel err {worst:.3e}"),
    ))
}

/// After squeezing to a survivor subset, continued decode matches the
/// batched forward over exactly the kept rows (single layer, where that
/// oracle is exact).
fn squeeze_property(spec: &VerifySpec) -> Result<PropertyOutcome> {
    let mut cfg = spec.cfg.clone();
    cfg.num_layers = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xdead));
    let weights = synth_model_weights(&cfg, &mut rng)?;
    // Rebuild the spec's plan for the single-layer config from its
    // layer-0 ranks.
    let full_plan = spec.lossy_plan()?;
    let mut ranks = std::collections::BTreeMap::new();
    for name in crate::model::MatrixName::ALL {
        if let Ok(rank) = full_plan.rank(0, name) {
            ranks.insert(name, rank);
        }
    }
    let plan = DecompositionPlan::uniform(1, ranks);
    let dec = decompose_model(&cfg, &weights, &plan)?;
    let p = *spec.tp.iter().max().unwrap();

    let mut session = DecodeSession::new(&cfg, &dec, p, 8, 2)?;
    session.scramble_block_allocation(spec.seed)?;
    let mut inputs = synth_hidden(4, cfg.hidden_dim(), &mut rng);
    session.prefill(&inputs)?;
    for _ in 0..2 {
        let token = synth_hidden(1, cfg.hidden_dim(), &mut rng);
        session.decode_step(&token)?;
        inputs = DenseMatrix::vstack(&[&inputs, &token])?;
    }

    // Keep every other token, then decode one more.
    let keep: Vec<usize> = (0..inputs.rows()).step_by(2).collect();
    let reports = session.squeeze(&keep)?;
    let kept_ok = reports.iter().all(|r| r.kept_tokens == keep.len());

    let token = synth_hidden(1, cfg.hidden_dim(), &mut rng);
    let (out, _) = session.decode_step(&token)?;

    let mut kept_rows: Vec<&[f64]> = keep.iter().map(|&i| inputs.row(i)).collect();
    kept_rows.push(token.row(0));
    let mut flat = Vec::new();
    for r in &kept_rows {
        flat.extend_from_slice(r);
    }
    let kept_inputs = DenseMatrix::new(kept_rows.len(), cfg.hidden_dim(), flat)?;
    let mut positions: Vec<usize> = keep.clone();
    positions.push(inputs.rows());
    let want = recompute_reference(&cfg, &dec, &kept_inputs, &positions, p)?;

    let got = DenseMatrix::new(1, out.cols(), out.row(0).to_vec())?;
    let want_last = DenseMatrix::new(1, want.cols(), want.row(want.rows() - 1).to_vec())?;
    let err = rel_frobenius_distance(&got, &want_last);
    Ok(PropertyOutcome::new(
        "kvcache",
        "squeeze-then-decode-matches-kept-forward",
        kept_ok && err <= spec.tolerance,
        format!("p={p}, kept {} of {}, rel err {err:.3e}", keep.len(), inputs.rows()),
    ))
}

/// Ledger reconciliation: measured collective volumes equal the analytic
/// model exactly, per sub-layer per token, for every pipeline; and the
/// documented convention ordering holds for this model's ranks.
pub fn cost_suite(spec: &VerifySpec) -> Result<Vec<PropertyOutcome>> {
    spec.validate()?;
    let cfg = &spec.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xc057));
    let weights = synth_model_weights(cfg, &mut rng)?;
    let plan = spec.lossy_plan()?;
    let dec = decompose_model(cfg, &weights, &plan)?;
    let inputs = CostInputs::from_plan(cfg, &plan)?;

    let t = 3;
    let hidden = synth_hidden(t, cfg.hidden_dim(), &mut rng);
    let positions: Vec<usize> = (0..t).collect();

    let mut outcomes = Vec::new();
    for &p in &spec.tp {
        if p == 1 {
            continue;
        }
        let mut g = WorkerGroup::new(p)?;
        let runs: [(PipelineMode, Vec<TrafficEvent>); 3] = [
            (PipelineMode::Deinfer, {
                let (_, a) = forward_deinfer_attention(
                    cfg,
                    &dec.layers[0].attention,
                    &hidden,
                    &positions,
                    &mut g,
                    None,
                )?;
                let (_, m) = forward_deinfer_mlp(cfg, &dec.layers[0].mlp, &hidden, &mut g)?;
                let mut ev = a.events().to_vec();
                ev.extend(m.events().iter().cloned());
                ev
            }),
            (PipelineMode::Base, {
                let (_, a) = forward_base_attention(
                    cfg,
                    &dec.layers[0].attention,
                    &hidden,
                    &positions,
                    &mut g,
                )?;
                let (_, m) = forward_base_mlp(cfg, &dec.layers[0].mlp, &hidden, &mut g)?;
                let mut ev = a.events().to_vec();
                ev.extend(m.events().iter().cloned());
                ev
            }),
            (PipelineMode::DenseTp, {
                let (_, a) = forward_dense_tp_attention(
                    cfg,
                    &weights.layers[0].attention,
                    &hidden,
                    &positions,
                    &mut g,
                )?;
                let (_, m) = forward_dense_tp_mlp(cfg, &weights.layers[0].mlp, &hidden, &mut g)?;
                let mut ev = a.events().to_vec();
                ev.extend(m.events().iter().cloned());
                ev
            }),
        ];
        for (mode, events) in runs {
            let rec = compare_with_measured(&inputs, mode, &events, t as u64, 1)?;
            let name = match mode {
                PipelineMode::Deinfer => "deinfer-ledger-reconciles",
                PipelineMode::Base => "base-ledger-reconciles",
                PipelineMode::DenseTp => "dense-ledger-reconciles",
            };
            let detail = if rec.is_exact() {
                format!("p={p}, {} sub-layers exact", rec.entries.len())
            } else {
                match rec.verify() {
                    Err(Error::Reconcile(msg)) => format!("p={p}: {msg}"),
                    _ => format!("p={p}: inconsistent reconciliation state"),
                }
            };
            outcomes.push(PropertyOutcome::new("cost", name, rec.is_exact(), detail));
        }
    }

    let unopt = block_cost(&inputs, CostStatus::Unoptimized, CostConvention::PaperTable)?;
    let table = block_cost(&inputs, CostStatus::Deinfer, CostConvention::PaperTable)?;
    let measured = block_cost(&inputs, CostStatus::Deinfer, CostConvention::PipelineMeasured)?;
    outcomes.push(PropertyOutcome::new(
        "cost",
        "convention-ordering",
        measured <= table && table <= unopt,
        format!("per-token block: measured {measured} <= table {table} <= unoptimized {unopt}"),
    ));
    Ok(outcomes)
}
