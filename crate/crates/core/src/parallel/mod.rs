//! Deterministic lockstep simulation of a tensor-parallel worker group.
//!
//! There are no threads: "workers" are indices into per-worker value
//! vectors, collectives are plain functions over those vectors, and every
//! collective acts as a barrier (the whole group participates or the call
//! fails). This makes traffic accounting exact and runs reproducible.

mod ledger;
mod shard;

pub use ledger::{CollectiveKind, TrafficEvent, TrafficLedger};
pub use shard::{
    partition_column_shard, partition_concat_split, partition_row_parallel, replicate,
    ShardScheme, ShardSpec, ShardedMatrix,
};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// One value per worker, indexed by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PerWorker<T>(Vec<T>);

impl<T> PerWorker<T> {
    pub fn new(items: Vec<T>) -> Self {
        Self(items)
    }

    pub fn from_fn(world_size: usize, f: impl FnMut(usize) -> T) -> Self {
        Self((0..world_size).map(f).collect())
    }

    pub fn try_from_fn(
        world_size: usize,
        mut f: impl FnMut(usize) -> Result<T>,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(world_size);
        for r in 0..world_size {
            items.push(f(r)?);
        }
        Ok(Self(items))
    }

    pub fn replicated(item: T, world_size: usize) -> Self
    where
        T: Clone,
    {
        Self(vec![item; world_size])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, rank: usize) -> &T {
        &self.0[rank]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// The simulated group: world size, a lockstep step counter, and the
/// traffic ledger every collective reports into.
#[derive(Debug)]
pub struct WorkerGroup {
    world_size: usize,
    step: u64,
    ledger: TrafficLedger,
}

impl WorkerGroup {
    pub fn new(world_size: usize) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::Parameter("world size must be at least 1".into()));
        }
        Ok(Self {
            world_size,
            step: 0,
            ledger: TrafficLedger::default(),
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// Number of collectives executed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    fn check_participation<T>(&self, locals: &PerWorker<T>) -> Result<()> {
        if locals.len() != self.world_size {
            return Err(Error::Collective(format!(
                "collective got {} contributions for a group of {}",
                locals.len(),
                self.world_size
            )));
        }
        Ok(())
    }

    fn record(&mut self, kind: CollectiveKind, elements: u64, tag: &str) {
        // Degenerate single-worker groups move no data.
        if self.world_size > 1 {
            self.ledger.record(TrafficEvent {
                step: self.step,
                kind,
                elements,
                tag: tag.to_string(),
            });
        }
        self.step += 1;
    }

    /// Every worker contributes an equally sized vector; every worker
    /// receives the concatenation in rank order. Costs the gathered total
    /// (`p * n_local` elements).
    pub fn all_gather(
        &mut self,
        locals: &PerWorker<Vec<f64>>,
        tag: &str,
    ) -> Result<PerWorker<Vec<f64>>> {
        self.check_participation(locals)?;
        let n_local = locals.get(0).len();
        if locals.iter().any(|v| v.len() != n_local) {
            return Err(Error::Collective(
                "all-gather contributions differ in length".into(),
            ));
        }
        let mut gathered = Vec::with_capacity(n_local * self.world_size);
        for v in locals.iter() {
            gathered.extend_from_slice(v);
        }
        self.record(CollectiveKind::AllGather, gathered.len() as u64, tag);
        Ok(PerWorker::replicated(gathered, self.world_size))
    }

    /// Element-wise sum across workers; every worker receives the identical
    /// total. Costs `2n` elements for an `n`-element contribution.
    pub fn reduce_sum(
        &mut self,
        locals: &PerWorker<Vec<f64>>,
        tag: &str,
    ) -> Result<PerWorker<Vec<f64>>> {
        self.check_participation(locals)?;
        let n = locals.get(0).len();
        if locals.iter().any(|v| v.len() != n) {
            return Err(Error::Collective(
                "reduce-sum contributions differ in length".into(),
            ));
        }
        let mut sum = vec![0.0; n];
        for v in locals.iter() {
            for (acc, x) in sum.iter_mut().zip(v) {
                *acc += x;
            }
        }
        self.record(CollectiveKind::ReduceSum, 2 * n as u64, tag);
        Ok(PerWorker::replicated(sum, self.world_size))
    }

    /// All-gather of per-worker column blocks: worker `r` contributes a
    /// `rows x c` block and everyone receives the `rows x (p*c)` matrix with
    /// blocks laid out in rank order. Built on the flat all-gather, plus a
    /// local (traffic-free) re-interleave.
    pub fn all_gather_matrix_cols(
        &mut self,
        locals: &PerWorker<DenseMatrix>,
        tag: &str,
    ) -> Result<PerWorker<DenseMatrix>> {
        self.check_participation(locals)?;
        let rows = locals.get(0).rows();
        let cols = locals.get(0).cols();
        if locals.iter().any(|m| m.rows() != rows || m.cols() != cols) {
            return Err(Error::Collective(
                "all-gather matrix blocks differ in shape".into(),
            ));
        }
        let flat = PerWorker::new(locals.iter().map(|m| m.data().to_vec()).collect());
        let gathered = self.all_gather(&flat, tag)?;
        let blob = gathered.get(0);
        let total_cols = cols * self.world_size;
        let mut data = vec![0.0; rows * total_cols];
        for r in 0..self.world_size {
            let block = &blob[r * rows * cols..(r + 1) * rows * cols];
            for i in 0..rows {
                let dst = i * total_cols + r * cols;
                data[dst..dst + cols].copy_from_slice(&block[i * cols..(i + 1) * cols]);
            }
        }
        let full = DenseMatrix::new(rows, total_cols, data)?;
        Ok(PerWorker::replicated(full, self.world_size))
    }

    /// Reduce-sum over equally shaped per-worker matrices.
    pub fn reduce_sum_matrix(
        &mut self,
        locals: &PerWorker<DenseMatrix>,
        tag: &str,
    ) -> Result<PerWorker<DenseMatrix>> {
        self.check_participation(locals)?;
        let rows = locals.get(0).rows();
        let cols = locals.get(0).cols();
        if locals.iter().any(|m| m.rows() != rows || m.cols() != cols) {
            return Err(Error::Collective(
                "reduce-sum matrix contributions differ in shape".into(),
            ));
        }
        let flat = PerWorker::new(locals.iter().map(|m| m.data().to_vec()).collect());
        let summed = self.reduce_sum(&flat, tag)?;
        let m = DenseMatrix::new(rows, cols, summed.get(0).clone())?;
        Ok(PerWorker::replicated(m, self.world_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, rel_frobenius_distance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::new(rows, cols, data).unwrap()
    }

    /// Loop oracle for all-gather: explicit rank-order concatenation.
    fn gather_oracle(locals: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for v in locals {
            out.extend_from_slice(v);
        }
        out
    }

    /// Element-wise add oracle for reduce-sum.
    fn reduce_oracle(locals: &[Vec<f64>]) -> Vec<f64> {
        let n = locals[0].len();
        (0..n).map(|i| locals.iter().map(|v| v[i]).sum()).collect()
    }

    #[test]
    fn single_worker_collectives_are_identity_with_zero_volume() {
        let mut g = WorkerGroup::new(1).unwrap();
        let data = PerWorker::new(vec![vec![1.0, 2.0, 3.0]]);
        let gathered = g.all_gather(&data, "t").unwrap();
        assert_eq!(gathered.get(0), data.get(0));
        let reduced = g.reduce_sum(&data, "t").unwrap();
        assert_eq!(reduced.get(0), data.get(0));
        assert!(g.ledger().is_empty());
        assert_eq!(g.step(), 2);
    }

    #[test]
    fn all_gather_two_workers_hand_example() {
        let mut g = WorkerGroup::new(2).unwrap();
        let data = PerWorker::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = g.all_gather(&data, "t").unwrap();
        for r in 0..2 {
            assert_eq!(out.get(r), &vec![1.0, 2.0, 3.0, 4.0]);
        }
        assert_eq!(g.ledger().total_volume(CollectiveKind::AllGather), 4);
        assert_eq!(g.ledger().call_count(CollectiveKind::AllGather), 1);
    }

    #[test]
    fn reduce_sum_matches_add_oracle_and_charges_2n() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let locals: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut g = WorkerGroup::new(4).unwrap();
        let out = g.reduce_sum(&PerWorker::new(locals.clone()), "t").unwrap();
        let want = reduce_oracle(&locals);
        for r in 0..4 {
            for (a, b) in out.get(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.ledger().total_volume(CollectiveKind::ReduceSum), 12);
    }

    #[test]
    fn all_gather_matches_loop_oracle_at_p4() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let locals: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut g = WorkerGroup::new(4).unwrap();
        let out = g.all_gather(&PerWorker::new(locals.clone()), "t").unwrap();
        assert_eq!(out.get(2), &gather_oracle(&locals));
        assert_eq!(g.ledger().total_volume(CollectiveKind::AllGather), 12);
    }

    #[test]
    fn mismatched_contributions_are_collective_errors() {
        let mut g = WorkerGroup::new(2).unwrap();
        let ragged = PerWorker::new(vec![vec![1.0], vec![1.0, 2.0]]);
        assert!(matches!(
            g.all_gather(&ragged, "t"),
            Err(Error::Collective(_))
        ));
        assert!(matches!(
            g.reduce_sum(&ragged, "t"),
            Err(Error::Collective(_))
        ));
        let wrong_count = PerWorker::new(vec![vec![1.0]]);
        assert!(g.all_gather(&wrong_count, "t").is_err());
        assert!(g.ledger().is_empty());
    }

    #[test]
    fn zero_world_size_rejected() {
        assert!(WorkerGroup::new(0).is_err());
    }

    #[test]
    fn matrix_column_gather_reassembles_column_blocks() {
        let full = seeded_matrix(3, 8, 17);
        let sharded = partition_column_shard(&full, 4).unwrap();
        let locals = PerWorker::from_fn(4, |r| sharded.shard(r).clone());
        let mut g = WorkerGroup::new(4).unwrap();
        let out = g.all_gather_matrix_cols(&locals, "t").unwrap();
        assert_eq!(out.get(1), &full);
        assert_eq!(g.ledger().total_volume(CollectiveKind::AllGather), 24);
    }

    #[test]
    fn concat_split_owner_ranges_span_matrix_boundaries() {
        let a = seeded_matrix(3, 4, 1);
        let b = seeded_matrix(3, 2, 2);
        let c = seeded_matrix(3, 2, 3);
        let sharded = partition_concat_split(&[&a, &b, &c], 2).unwrap();
        assert_eq!(sharded.spec.ranges, vec![0..4, 4..8]);
        // Worker 0 owns exactly a; worker 1 owns b and c side by side.
        assert_eq!(sharded.shard(0), &a);
        assert_eq!(sharded.shard(1), &DenseMatrix::hstack(&[&b, &c]).unwrap());
        let back = sharded.reassemble().unwrap();
        assert_eq!(back, vec![a, b, c]);
    }

    #[test]
    fn column_shard_splits_evenly_and_rejects_remainders() {
        let m = seeded_matrix(2, 8, 4);
        let sharded = partition_column_shard(&m, 4).unwrap();
        for r in 0..4 {
            assert_eq!(sharded.shard(r).cols(), 2);
        }
        assert_eq!(sharded.reassemble().unwrap(), vec![m.clone()]);
        assert!(matches!(
            partition_column_shard(&m, 3),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn row_parallel_partial_sums_reduce_to_the_dense_product() {
        let x = seeded_matrix(3, 6, 7);
        let w = seeded_matrix(6, 5, 8);
        let dense = matmul(&x, &w).unwrap();

        let p = 3;
        let w_shards = partition_row_parallel(&w, p).unwrap();
        let mut g = WorkerGroup::new(p).unwrap();
        let partials = PerWorker::try_from_fn(p, |r| {
            let x_slice = x.slice_cols(w_shards.spec.ranges[r].clone())?;
            matmul(&x_slice, w_shards.shard(r))
        })
        .unwrap();
        let out = g.reduce_sum_matrix(&partials, "t").unwrap();
        assert!(rel_frobenius_distance(out.get(0), &dense) < 1e-12);
    }

    #[test]
    fn replicated_shards_are_full_copies() {
        let m = seeded_matrix(2, 3, 10);
        let sharded = replicate(&m, 3).unwrap();
        for r in 0..3 {
            assert_eq!(sharded.shard(r), &m);
        }
        assert_eq!(sharded.reassemble().unwrap(), vec![m]);
    }

    #[test]
    fn determinism_same_inputs_same_ledger() {
        let run = || {
            let mut g = WorkerGroup::new(4).unwrap();
            let m = seeded_matrix(2, 8, 3);
            let sharded = partition_column_shard(&m, 4).unwrap();
            let locals = PerWorker::from_fn(4, |r| sharded.shard(r).clone());
            let out = g.all_gather_matrix_cols(&locals, "a").unwrap();
            let flat = PerWorker::new(out.iter().map(|m| m.data().to_vec()).collect());
            let reduced = g.reduce_sum(&flat, "b").unwrap();
            (reduced.get(0).clone(), g.ledger().clone())
        };
        let (out1, ledger1) = run();
        let (out2, ledger2) = run();
        assert_eq!(out1, out2);
        assert_eq!(ledger1, ledger2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_reassembly_round_trips(
            seed in 0u64..100_000,
            p in 1usize..=4,
            width_units in 1usize..4,
            rows in 1usize..6,
        ) {
            let cols = p * width_units;
            let m = seeded_matrix(rows, cols, seed);
            let col = partition_column_shard(&m, p).unwrap();
            prop_assert_eq!(col.reassemble().unwrap(), vec![m.clone()]);

            let t = seeded_matrix(cols, rows, seed.wrapping_add(1));
            let row = partition_row_parallel(&t, p).unwrap();
            prop_assert_eq!(row.reassemble().unwrap(), vec![t]);

            let b = seeded_matrix(rows, p * width_units, seed.wrapping_add(2));
            let cs = partition_concat_split(&[&m, &b], p).unwrap();
            prop_assert_eq!(cs.reassemble().unwrap(), vec![m, b]);
        }

        #[test]
        fn ledger_counts_one_event_per_collective(
            calls in 1usize..6,
            n in 1usize..5,
        ) {
            let mut g = WorkerGroup::new(2).unwrap();
            let data = PerWorker::new(vec![vec![1.0; n], vec![2.0; n]]);
            for i in 0..calls {
                if i % 2 == 0 {
                    g.all_gather(&data, "x").unwrap();
                } else {
                    g.reduce_sum(&data, "x").unwrap();
                }
            }
            prop_assert_eq!(g.ledger().len(), calls);
            prop_assert_eq!(g.step(), calls as u64);
        }
    }
}
