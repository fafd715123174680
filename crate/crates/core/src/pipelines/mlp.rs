//! The MLP sub-layer (GLU or plain two-layer) under the three modes.

use super::{relu, silu, tags, ForwardTrace};
use crate::decomposition::FactorPair;
use crate::linalg::{matmul, matmul_flops, DenseMatrix};
use crate::model::{DecomposedMlpWeights, DenseMlpWeights, MlpVariant, ModelConfig};
use crate::parallel::{
    partition_column_shard, partition_concat_split, partition_row_parallel, PerWorker,
    ShardedMatrix, WorkerGroup,
};
use crate::{Error, Result};

fn check_hidden(cfg: &ModelConfig, hidden: &DenseMatrix) -> Result<()> {
    cfg.validate()?;
    if hidden.cols() != cfg.hidden_dim() {
        return Err(Error::Shape(format!(
            "hidden width {} does not match model hidden dim {}",
            hidden.cols(),
            cfg.hidden_dim()
        )));
    }
    Ok(())
}

fn check_gate_presence<T>(cfg: &ModelConfig, gate: &Option<T>) -> Result<()> {
    match (cfg.mlp_variant, gate.is_some()) {
        (MlpVariant::Glu, false) => Err(Error::Config("GLU config but no gate weights".into())),
        (MlpVariant::NonGlu, true) => {
            Err(Error::Config("non-GLU config carries gate weights".into()))
        }
        _ => Ok(()),
    }
}

fn check_dense_mlp(cfg: &ModelConfig, w: &DenseMlpWeights) -> Result<()> {
    check_gate_presence(cfg, &w.gate)?;
    let h = cfg.hidden_dim();
    let m = cfg.intermediate_dim;
    let mut mats = vec![("up", &w.up, h, m), ("down", &w.down, m, h)];
    if let Some(g) = &w.gate {
        mats.push(("gate", g, h, m));
    }
    for (name, mat, d_in, d_out) in mats {
        if mat.rows() != d_in || mat.cols() != d_out {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {}x{}",
                mat.rows(),
                mat.cols(),
                d_in,
                d_out
            )));
        }
    }
    Ok(())
}

fn check_pair(name: &str, pair: &FactorPair, d_in: usize, d_out: usize) -> Result<()> {
    if pair.d_in() != d_in || pair.d_out() != d_out {
        return Err(Error::Shape(format!(
            "{name} factors map {}->{}, expected {}->{}",
            pair.d_in(),
            pair.d_out(),
            d_in,
            d_out
        )));
    }
    Ok(())
}

fn check_decomposed_mlp(cfg: &ModelConfig, w: &DecomposedMlpWeights) -> Result<()> {
    check_gate_presence(cfg, &w.gate)?;
    let h = cfg.hidden_dim();
    let m = cfg.intermediate_dim;
    check_pair("up", &w.up, h, m)?;
    if let Some(g) = &w.gate {
        check_pair("gate", g, h, m)?;
    }
    check_pair("down", &w.down, m, h)
}

/// Apply the variant's nonlinearity to worker-local slices of the
/// intermediate activations. `up` and `gate` must be column-aligned.
fn activate(variant: MlpVariant, up: &DenseMatrix, gate: Option<&DenseMatrix>) -> DenseMatrix {
    let mut out = up.clone();
    match (variant, gate) {
        (MlpVariant::Glu, Some(g)) => {
            for (o, &gv) in out.data_mut().iter_mut().zip(g.data()) {
                *o *= silu(gv);
            }
        }
        (MlpVariant::NonGlu, None) => {
            for o in out.data_mut().iter_mut() {
                *o = relu(*o);
            }
        }
        // Gate presence is validated before this point.
        _ => unreachable!("gate presence mismatch slipped past validation"),
    }
    out
}

/// Classic tensor parallelism: column-sharded up (and gate), worker-local
/// activation, row-parallel down, one reduce-sum.
pub fn forward_dense_tp_mlp(
    cfg: &ModelConfig,
    weights: &DenseMlpWeights,
    hidden: &DenseMatrix,
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    check_hidden(cfg, hidden)?;
    check_dense_mlp(cfg, weights)?;
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);

    let up = partition_column_shard(&weights.up, p)?;
    let gate = weights
        .gate
        .as_ref()
        .map(|g| partition_column_shard(g, p))
        .transpose()?;
    let down = partition_row_parallel(&weights.down, p)?;

    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let up_act = matmul(hidden, up.shard(r))?;
        trace.add_matmul_flops(r, matmul_flops(hidden, up.shard(r)));
        let gate_act = match &gate {
            Some(g) => {
                trace.add_matmul_flops(r, matmul_flops(hidden, g.shard(r)));
                Some(matmul(hidden, g.shard(r))?)
            }
            None => None,
        };
        let act = activate(cfg.mlp_variant, &up_act, gate_act.as_ref());
        trace.add_matmul_flops(r, matmul_flops(&act, down.shard(r)));
        partials.push(matmul(&act, down.shard(r))?);
    }

    let out = group.reduce_sum_matrix(&PerWorker::new(partials), tags::MLP_OUTPUT)?;
    trace.capture_events(group, mark);
    Ok((out.get(0).clone(), trace))
}

/// One naively sharded factor pair (shared with the attention module's
/// structure): column-split down, row-parallel up, one full-width reduce.
fn low_rank_pair_reduce(
    input: &DenseMatrix,
    pair: &FactorPair,
    group: &mut WorkerGroup,
    tag: &str,
    trace: &mut ForwardTrace,
) -> Result<DenseMatrix> {
    let p = group.world_size();
    let down = partition_column_shard(&pair.down, p)?;
    let up = partition_row_parallel(&pair.up, p)?;
    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let latent = matmul(input, down.shard(r))?;
        trace.add_matmul_flops(r, matmul_flops(input, down.shard(r)));
        trace.add_matmul_flops(r, matmul_flops(&latent, up.shard(r)));
        partials.push(matmul(&latent, up.shard(r))?);
    }
    let out = group.reduce_sum_matrix(&PerWorker::new(partials), tag)?;
    Ok(out.get(0).clone())
}

/// Naive decomposed MLP: one reduce-sum per factor pair (three for GLU, two
/// otherwise), full `m`-wide intermediates on every worker.
pub fn forward_base_mlp(
    cfg: &ModelConfig,
    weights: &DecomposedMlpWeights,
    hidden: &DenseMatrix,
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    check_hidden(cfg, hidden)?;
    check_decomposed_mlp(cfg, weights)?;
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);

    let up_act = low_rank_pair_reduce(hidden, &weights.up, group, tags::MLP_UP, &mut trace)?;
    let gate_act = match &weights.gate {
        Some(g) => Some(low_rank_pair_reduce(hidden, g, group, tags::MLP_GATE, &mut trace)?),
        None => None,
    };
    let act = activate(cfg.mlp_variant, &up_act, gate_act.as_ref());
    let out = low_rank_pair_reduce(&act, &weights.down, group, tags::MLP_DOWN, &mut trace)?;
    trace.capture_events(group, mark);
    Ok((out, trace))
}

/// Weight shards for the rearranged low-rank MLP pipeline.
#[derive(Debug, Clone)]
pub struct DeinferMlpShards {
    world_size: usize,
    /// Up (and gate) down-projections fused into one concat-split shard.
    in_down: ShardedMatrix,
    /// Column slices of the up-projections into the intermediate dim.
    up_up: Vec<DenseMatrix>,
    gate_up: Option<Vec<DenseMatrix>>,
    /// Down projection: row-parallel down into the latent, replicated up.
    down_down: ShardedMatrix,
    down_up: DenseMatrix,
    l_up: usize,
    l_gate: usize,
}

impl DeinferMlpShards {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn l_up(&self) -> usize {
        self.l_up
    }

    pub fn l_gate(&self) -> usize {
        self.l_gate
    }

    pub fn l_down(&self) -> usize {
        self.down_up.rows()
    }

    /// Width of the fused latent moved by the all-gather.
    pub fn latent_width(&self) -> usize {
        self.l_up + self.l_gate
    }
}

/// Partition decomposed MLP weights for the deinfer pipeline.
pub fn shard_deinfer_mlp(
    cfg: &ModelConfig,
    weights: &DecomposedMlpWeights,
    p: usize,
) -> Result<DeinferMlpShards> {
    cfg.validate()?;
    check_decomposed_mlp(cfg, weights)?;
    if !cfg.intermediate_dim.is_multiple_of(p) {
        return Err(Error::Partition(format!(
            "intermediate dim {} does not divide across {} workers",
            cfg.intermediate_dim, p
        )));
    }

    let mut down_mats = vec![&weights.up.down];
    if let Some(g) = &weights.gate {
        down_mats.push(&g.down);
    }
    let in_down = partition_concat_split(&down_mats, p)?;
    let up_up = partition_column_shard(&weights.up.up, p)?;
    let up_up = (0..p).map(|r| up_up.shard(r).clone()).collect();
    let gate_up = match &weights.gate {
        Some(g) => {
            let sharded = partition_column_shard(&g.up, p)?;
            Some((0..p).map(|r| sharded.shard(r).clone()).collect())
        }
        None => None,
    };
    let down_down = partition_row_parallel(&weights.down.down, p)?;

    Ok(DeinferMlpShards {
        world_size: p,
        in_down,
        up_up,
        gate_up,
        down_down,
        down_up: weights.down.up.clone(),
        l_up: weights.up.rank,
        l_gate: weights.gate.as_ref().map_or(0, |g| g.rank),
    })
}

/// The rearranged low-rank MLP over prebuilt shards: one all-gather of the
/// fused up/gate latent, column-sharded up-projections and worker-local
/// activation, then a row-parallel down projection whose reduce-sum moves
/// `2 * l_down` per token instead of `2 * h`.
pub fn forward_deinfer_mlp_with_shards(
    cfg: &ModelConfig,
    shards: &DeinferMlpShards,
    hidden: &DenseMatrix,
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let p = group.world_size();
    if shards.world_size != p {
        return Err(Error::Partition(format!(
            "shards built for world size {}, group has {}",
            shards.world_size, p
        )));
    }
    check_hidden(cfg, hidden)?;
    if (cfg.mlp_variant == MlpVariant::Glu) != shards.gate_up.is_some() {
        return Err(Error::Config(
            "mlp shards disagree with the config about gate presence".into(),
        ));
    }
    let mark = group.ledger().len();
    let mut trace = ForwardTrace::new(p);

    let mut locals = Vec::with_capacity(p);
    for r in 0..p {
        let shard = shards.in_down.shard(r);
        trace.add_matmul_flops(r, matmul_flops(hidden, shard));
        locals.push(matmul(hidden, shard)?);
    }
    let latent = group
        .all_gather_matrix_cols(&PerWorker::new(locals), tags::MLP_IN_LATENT)?
        .get(0)
        .clone();
    let up_lat = latent.slice_cols(0..shards.l_up)?;
    let gate_lat = if shards.l_gate > 0 {
        Some(latent.slice_cols(shards.l_up..shards.l_up + shards.l_gate)?)
    } else {
        None
    };

    let mut partials = Vec::with_capacity(p);
    for r in 0..p {
        let up_act = matmul(&up_lat, &shards.up_up[r])?;
        trace.add_matmul_flops(r, matmul_flops(&up_lat, &shards.up_up[r]));
        let gate_act = match (&shards.gate_up, &gate_lat) {
            (Some(gu), Some(gl)) => {
                trace.add_matmul_flops(r, matmul_flops(gl, &gu[r]));
                Some(matmul(gl, &gu[r])?)
            }
            _ => None,
        };
        let act = activate(cfg.mlp_variant, &up_act, gate_act.as_ref());
        trace.add_matmul_flops(r, matmul_flops(&act, shards.down_down.shard(r)));
        partials.push(matmul(&act, shards.down_down.shard(r))?);
    }

    let latent_out = group.reduce_sum_matrix(&PerWorker::new(partials), tags::MLP_DOWN_LATENT)?;
    let out = matmul(latent_out.get(0), &shards.down_up)?;
    for r in 0..p {
        trace.add_matmul_flops(r, matmul_flops(latent_out.get(0), &shards.down_up));
    }
    trace.capture_events(group, mark);
    Ok((out, trace))
}

/// [`forward_deinfer_mlp_with_shards`] with shards built on the fly.
pub fn forward_deinfer_mlp(
    cfg: &ModelConfig,
    weights: &DecomposedMlpWeights,
    hidden: &DenseMatrix,
    group: &mut WorkerGroup,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let shards = shard_deinfer_mlp(cfg, weights, group.world_size())?;
    forward_deinfer_mlp_with_shards(cfg, &shards, hidden, group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose_matrix;
    use crate::linalg::rel_frobenius_distance;
    use crate::model::test_support::toy_gqa_config;
    use crate::model::{synth_hidden, synth_model_weights};
    use crate::parallel::CollectiveKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_pair(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> FactorPair {
        let scale = 1.0 / (d_in as f64).sqrt();
        let down = DenseMatrix::new(
            d_in,
            rank,
            (0..d_in * rank).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
        )
        .unwrap();
        let up = DenseMatrix::new(
            rank,
            d_out,
            (0..rank * d_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        FactorPair::new(down, up).unwrap()
    }

    fn random_decomposed(cfg: &ModelConfig, seed: u64) -> DecomposedMlpWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim();
        let m = cfg.intermediate_dim;
        DecomposedMlpWeights {
            up: seeded_pair(h, m, 8, &mut rng),
            gate: (cfg.mlp_variant == MlpVariant::Glu)
                .then(|| seeded_pair(h, m, 8, &mut rng)),
            down: seeded_pair(m, h, 8, &mut rng),
        }
    }

    /// Single-device oracle straight from the math.
    fn dense_reference(cfg: &ModelConfig, w: &DenseMlpWeights, hidden: &DenseMatrix) -> DenseMatrix {
        let up = matmul(hidden, &w.up).unwrap();
        let act = match (cfg.mlp_variant, &w.gate) {
            (MlpVariant::Glu, Some(g)) => {
                let gate = matmul(hidden, g).unwrap();
                let data = up
                    .data()
                    .iter()
                    .zip(gate.data())
                    .map(|(&u, &g)| u * silu(g))
                    .collect();
                DenseMatrix::new(up.rows(), up.cols(), data).unwrap()
            }
            (MlpVariant::NonGlu, None) => {
                let data = up.data().iter().map(|&u| relu(u)).collect();
                DenseMatrix::new(up.rows(), up.cols(), data).unwrap()
            }
            _ => panic!("gate mismatch in test fixture"),
        };
        matmul(&act, &w.down).unwrap()
    }

    #[test]
    fn dense_tp_matches_reference_for_both_variants() {
        for glu in [true, false] {
            let mut cfg = toy_gqa_config();
            if !glu {
                cfg.mlp_variant = MlpVariant::NonGlu;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let w = synth_model_weights(&cfg, &mut rng).unwrap().layers.remove(0).mlp;
            let hidden = synth_hidden(4, cfg.hidden_dim(), &mut rng);
            let want = dense_reference(&cfg, &w, &hidden);

            for p in [1, 2, 4] {
                let mut g = WorkerGroup::new(p).unwrap();
                let (out, trace) = forward_dense_tp_mlp(&cfg, &w, &hidden, &mut g).unwrap();
                assert!(
                    rel_frobenius_distance(&out, &want) < 1e-13,
                    "dense tp mlp diverged at p={p} glu={glu}"
                );
                if p > 1 {
                    assert_eq!(trace.collective_calls(CollectiveKind::ReduceSum), 1);
                    assert_eq!(
                        trace.volume(CollectiveKind::ReduceSum),
                        2 * 4 * cfg.hidden_dim() as u64
                    );
                } else {
                    assert!(trace.events().is_empty());
                }
            }
        }
    }

    #[test]
    fn base_census_one_reduce_per_pair() {
        let cfg = toy_gqa_config();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = random_decomposed(&cfg, 50);
        let hidden = synth_hidden(3, cfg.hidden_dim(), &mut rng);
        let mut g = WorkerGroup::new(2).unwrap();
        let (_, trace) = forward_base_mlp(&cfg, &w, &hidden, &mut g).unwrap();

        // GLU: up, gate, down. Up and gate reduce the full m-wide
        // intermediate, down reduces the h-wide output.
        assert_eq!(trace.collective_calls(CollectiveKind::ReduceSum), 3);
        let by_tag: std::collections::BTreeMap<&str, u64> =
            trace.events().iter().map(|e| (e.tag.as_str(), e.elements)).collect();
        let t = 3u64;
        assert_eq!(by_tag[tags::MLP_UP], 2 * t * cfg.intermediate_dim as u64);
        assert_eq!(by_tag[tags::MLP_GATE], 2 * t * cfg.intermediate_dim as u64);
        assert_eq!(by_tag[tags::MLP_DOWN], 2 * t * cfg.hidden_dim() as u64);

        let mut plain = cfg;
        plain.mlp_variant = MlpVariant::NonGlu;
        let w = random_decomposed(&plain, 51);
        let mut g = WorkerGroup::new(2).unwrap();
        let (_, trace) = forward_base_mlp(&plain, &w, &hidden, &mut g).unwrap();
        assert_eq!(trace.collective_calls(CollectiveKind::ReduceSum), 2);
    }

    #[test]
    fn deinfer_census_one_gather_one_latent_reduce() {
        let cfg = toy_gqa_config();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w = random_decomposed(&cfg, 52);
        let hidden = synth_hidden(3, cfg.hidden_dim(), &mut rng);
        let mut g = WorkerGroup::new(4).unwrap();
        let (_, trace) = forward_deinfer_mlp(&cfg, &w, &hidden, &mut g).unwrap();

        assert_eq!(trace.collective_calls(CollectiveKind::AllGather), 1);
        assert_eq!(trace.collective_calls(CollectiveKind::ReduceSum), 1);
        let t = 3u64;
        assert_eq!(trace.volume(CollectiveKind::AllGather), t * (8 + 8));
        assert_eq!(trace.volume(CollectiveKind::ReduceSum), 2 * t * 8);
        assert_eq!(trace.events()[0].tag, tags::MLP_IN_LATENT);
        assert_eq!(trace.events()[1].tag, tags::MLP_DOWN_LATENT);
    }

    #[test]
    fn lossless_factors_match_dense_for_both_variants() {
        for glu in [true, false] {
            let mut cfg = toy_gqa_config();
            if !glu {
                cfg.mlp_variant = MlpVariant::NonGlu;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(44);
            let w = synth_model_weights(&cfg, &mut rng).unwrap().layers.remove(0).mlp;
            let h = cfg.hidden_dim();
            let m = cfg.intermediate_dim;
            let full = h.min(m);
            let dec = DecomposedMlpWeights {
                up: decompose_matrix(&w.up, full).unwrap(),
                gate: w.gate.as_ref().map(|g| decompose_matrix(g, full).unwrap()),
                down: decompose_matrix(&w.down, full).unwrap(),
            };
            let hidden = synth_hidden(4, h, &mut rng);
            let want = dense_reference(&cfg, &w, &hidden);

            let mut g = WorkerGroup::new(2).unwrap();
            let (base, _) = forward_base_mlp(&cfg, &dec, &hidden, &mut g).unwrap();
            assert!(rel_frobenius_distance(&base, &want) < 1e-10, "base glu={glu}");

            let mut g = WorkerGroup::new(2).unwrap();
            let (deinfer, _) = forward_deinfer_mlp(&cfg, &dec, &hidden, &mut g).unwrap();
            assert!(rel_frobenius_distance(&deinfer, &want) < 1e-10, "deinfer glu={glu}");
        }
    }

    #[test]
    fn deinfer_single_worker_is_bitwise_base() {
        for glu in [true, false] {
            let mut cfg = toy_gqa_config();
            if !glu {
                cfg.mlp_variant = MlpVariant::NonGlu;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(45);
            let w = random_decomposed(&cfg, 53);
            let hidden = synth_hidden(4, cfg.hidden_dim(), &mut rng);

            let mut g1 = WorkerGroup::new(1).unwrap();
            let (base, _) = forward_base_mlp(&cfg, &w, &hidden, &mut g1).unwrap();
            let mut g2 = WorkerGroup::new(1).unwrap();
            let (deinfer, _) = forward_deinfer_mlp(&cfg, &w, &hidden, &mut g2).unwrap();
            assert_eq!(base.data(), deinfer.data(), "p=1 mlp pipelines must agree bitwise");
        }
    }

    #[test]
    fn deinfer_matches_base_across_world_sizes() {
        for glu in [true, false] {
            let mut cfg = toy_gqa_config();
            if !glu {
                cfg.mlp_variant = MlpVariant::NonGlu;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(46);
            let w = random_decomposed(&cfg, 54);
            let hidden = synth_hidden(5, cfg.hidden_dim(), &mut rng);

            let mut g = WorkerGroup::new(1).unwrap();
            let (want, _) = forward_base_mlp(&cfg, &w, &hidden, &mut g).unwrap();

            for p in [2, 4] {
                let mut g = WorkerGroup::new(p).unwrap();
                let (base, _) = forward_base_mlp(&cfg, &w, &hidden, &mut g).unwrap();
                let (deinfer, _) = forward_deinfer_mlp(&cfg, &w, &hidden, &mut g).unwrap();
                assert!(rel_frobenius_distance(&base, &want) < 1e-12);
                assert!(rel_frobenius_distance(&deinfer, &want) < 1e-12);
            }
        }
    }

    #[test]
    fn gate_mismatches_and_bad_widths_are_rejected() {
        let cfg = toy_gqa_config();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut w = random_decomposed(&cfg, 55);
        w.gate = None;
        let hidden = synth_hidden(2, cfg.hidden_dim(), &mut rng);
        let mut g = WorkerGroup::new(2).unwrap();
        assert!(matches!(
            forward_base_mlp(&cfg, &w, &hidden, &mut g),
            Err(Error::Config(_))
        ));

        let w = random_decomposed(&cfg, 56);
        let bad = synth_hidden(2, cfg.hidden_dim() + 3, &mut rng);
        assert!(matches!(
            forward_deinfer_mlp(&cfg, &w, &bad, &mut g),
            Err(Error::Shape(_))
        ));

        // Intermediate dim must divide for the column-sharded up projection.
        let mut narrow = cfg;
        narrow.intermediate_dim = 10;
        let w = random_decomposed(&narrow, 57);
        assert!(matches!(
            shard_deinfer_mlp(&narrow, &w, 4),
            Err(Error::Partition(_))
        ));
    }
}
