//! Parameterized generators for common chunk-level communication patterns.

use crate::region::{split_sizes, Chunk, Region, SplitError, TensorSpec};
use crate::schedule::{split_schedule, CommOp, CommSchedule, Direction, OpRef, ScheduleError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh2d {
    pub intra: usize,
    pub inter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub world_size: usize,
    pub tensor: TensorSpec,
    pub axis: usize,
    #[serde(default)]
    pub mesh: Option<Mesh2d>,
    /// Each shard transfer is pipelined as this many sub-chunks.
    #[serde(default = "one")]
    pub pipeline_stages: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("invalid template parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl TemplateParams {
    pub fn new(world_size: usize, tensor: TensorSpec, axis: usize) -> Self {
        TemplateParams {
            world_size,
            tensor,
            axis,
            mesh: None,
            pipeline_stages: 1,
        }
    }

    pub fn with_mesh(mut self, intra: usize, inter: usize) -> Self {
        self.mesh = Some(Mesh2d { intra, inter });
        self
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.pipeline_stages = stages;
        self
    }

    pub fn check(&self) -> Result<(), TemplateError> {
        self.tensor.check().map_err(TemplateError::Params)?;
        if self.world_size == 0 {
            return Err(TemplateError::Params("world_size must be positive".into()));
        }
        if self.axis >= self.tensor.shape.len() {
            return Err(TemplateError::Params(format!(
                "axis {} out of range for shape {:?}",
                self.axis, self.tensor.shape
            )));
        }
        if !self.tensor.shape[self.axis].is_multiple_of(self.world_size) {
            return Err(TemplateError::Params(format!(
                "world size {} does not divide extent {} of axis {}",
                self.world_size, self.tensor.shape[self.axis], self.axis
            )));
        }
        if let Some(m) = self.mesh {
            if m.intra * m.inter != self.world_size {
                return Err(TemplateError::Params(format!(
                    "mesh {}x{} does not factor world size {}",
                    m.intra, m.inter, self.world_size
                )));
            }
        }
        if self.pipeline_stages == 0 {
            return Err(TemplateError::Params("pipeline_stages must be >= 1".into()));
        }
        Ok(())
    }

    /// Region of shard `i` along the sharding axis.
    pub fn shard(&self, i: usize) -> Region {
        let rows = self.tensor.shape[self.axis] / self.world_size;
        let mut r = self.tensor.full_region();
        r.offsets[self.axis] = i * rows;
        r.sizes[self.axis] = rows;
        r
    }

    fn shard_chunk(&self, i: usize) -> Chunk {
        Chunk::new(format!("{}.s{}", self.tensor.tensor_id, i), self.shard(i))
    }

    fn base(&self, sharded_owners: bool) -> CommSchedule {
        let mut s = CommSchedule::empty(self.world_size);
        s.add_tensor(self.tensor.clone());
        for r in 0..self.world_size {
            let owned = if sharded_owners {
                self.shard(r)
            } else {
                self.tensor.full_region()
            };
            s.own(r, owned);
        }
        s
    }

    fn finish(&self, s: CommSchedule) -> Result<CommSchedule, TemplateError> {
        Ok(split_schedule(&s, self.pipeline_stages, self.axis)?)
    }
}

/// Ring all-gather: at step `k` rank `r` pushes shard `r-k` to `r+1`; steps
/// after the first wait for the upstream neighbour's previous step.
pub fn ring_allgather(p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
    p.check()?;
    let w = p.world_size;
    let mut s = p.base(true);
    for r in 0..w {
        for k in 0..w.saturating_sub(1) {
            let shard = (r + w - k) % w;
            let chunk = p.shard_chunk(shard);
            let mut op = CommOp::push((r + 1) % w, chunk.clone(), chunk);
            if k > 0 {
                op.deps.push(OpRef::new((r + w - 1) % w, k - 1));
            }
            s.plans[r].push(op);
        }
    }
    p.finish(s)
}

/// All-pull all-gather with a rotating peer order: the i-th pull of rank `r`
/// targets peer `(i + r) mod W`, skipping itself.
pub fn allgather_1d_swizzle(p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
    p.check()?;
    let w = p.world_size;
    let mut s = p.base(true);
    for r in 0..w {
        for i in 0..w {
            let peer = (i + r) % w;
            if peer == r {
                continue;
            }
            let chunk = p.shard_chunk(peer);
            s.plans[r].push(CommOp::pull(peer, chunk.clone(), chunk));
        }
    }
    p.finish(s)
}

/// Two-level swizzled all-gather on an `intra x inter` mesh.
///
/// Rank `r = g*intra + l` first pulls its group-mates' shards, then pulls
/// from its counterpart `l` in every other group. Counterparts forward shards
/// they gathered intra-group, so those pulls wait on the counterpart's intra
/// op. Group `g` starts each inter exchange at local offset `g`, so ranks in
/// different groups see different dependence structures.
pub fn allgather_2d_swizzle(p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
    p.check()?;
    let mesh = p
        .mesh
        .ok_or_else(|| TemplateError::Params("allgather_2d_swizzle needs a mesh".into()))?;
    let (intra, inter) = (mesh.intra, mesh.inter);
    let w = p.world_size;
    let mut s = p.base(true);
    for r in 0..w {
        let (g, l) = (r / intra, r % intra);
        for i in 1..intra {
            let mate = g * intra + (l + i) % intra;
            let chunk = p.shard_chunk(mate);
            s.plans[r].push(CommOp::pull(mate, chunk.clone(), chunk));
        }
        for j in 1..inter {
            let g2 = (g + j) % inter;
            let peer = g2 * intra + l;
            for t in 0..intra {
                let l2 = (l + g + t) % intra;
                let shard = g2 * intra + l2;
                let chunk = p.shard_chunk(shard);
                let mut op = CommOp::pull(peer, chunk.clone(), chunk);
                if l2 != l {
                    // the peer fetched this shard with its intra pull number (l2 - l) mod intra
                    let i = (l2 + intra - l) % intra;
                    op.deps.push(OpRef::new(peer, i - 1));
                }
                s.plans[r].push(op);
            }
        }
    }
    p.finish(s)
}

/// Reduce-scatter as rotated accumulate-pushes: rank `r` pushes chunk
/// `(r+i) mod W` into its home rank for `i = 1..W`.
pub fn reduce_scatter(p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
    p.check()?;
    let mut s = p.base(false);
    push_reduce_phase(p, &mut s);
    p.finish(s)
}

fn push_reduce_phase(p: &TemplateParams, s: &mut CommSchedule) {
    let w = p.world_size;
    for r in 0..w {
        for i in 1..w {
            let home = (r + i) % w;
            let chunk = p.shard_chunk(home);
            s.plans[r].push(CommOp::p2p(
                Direction::Push,
                home,
                chunk.clone(),
                chunk,
                true,
            ));
        }
    }
}

/// Partition all-reduce: reduce-scatter into home ranks, then every home
/// pushes its reduced chunk back out once all of its receipts are in.
pub fn partition_allreduce(p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
    p.check()?;
    let w = p.world_size;
    let mut s = p.base(false);
    push_reduce_phase(p, &mut s);
    for home in 0..w {
        // rank q pushed chunk `home` as its ((home - q) mod W)-th phase-one op
        let receipts: Vec<OpRef> = (0..w)
            .filter(|&q| q != home)
            .map(|q| OpRef::new(q, (home + w - q) % w - 1))
            .collect();
        for i in 1..w {
            let dst = (home + i) % w;
            let chunk = p.shard_chunk(home);
            s.plans[home].push(CommOp::push(dst, chunk.clone(), chunk).with_deps(receipts.clone()));
        }
    }
    p.finish(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    RingAllgather,
    Allgather1dSwizzle,
    Allgather2dSwizzle,
    ReduceScatter,
    PartitionAllreduce,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::RingAllgather,
        Template::Allgather1dSwizzle,
        Template::Allgather2dSwizzle,
        Template::ReduceScatter,
        Template::PartitionAllreduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::RingAllgather => "ring_allgather",
            Template::Allgather1dSwizzle => "allgather_1d_swizzle",
            Template::Allgather2dSwizzle => "allgather_2d_swizzle",
            Template::ReduceScatter => "reduce_scatter",
            Template::PartitionAllreduce => "partition_allreduce",
        }
    }

    pub fn instantiate(self, p: &TemplateParams) -> Result<CommSchedule, TemplateError> {
        match self {
            Template::RingAllgather => ring_allgather(p),
            Template::Allgather1dSwizzle => allgather_1d_swizzle(p),
            Template::Allgather2dSwizzle => allgather_2d_swizzle(p),
            Template::ReduceScatter => reduce_scatter(p),
            Template::PartitionAllreduce => partition_allreduce(p),
        }
    }

    /// Whether the result is a gather (concatenation) rather than a reduction.
    pub fn is_gather(self) -> bool {
        matches!(
            self,
            Template::RingAllgather | Template::Allgather1dSwizzle | Template::Allgather2dSwizzle
        )
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Template::ALL.iter().map(|t| t.name()).collect();
                format!(
                    "unknown template {s:?} (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// A near-square `intra x inter` factorization with `intra >= inter`.
pub fn default_mesh(world_size: usize) -> Mesh2d {
    let mut inter = (world_size as f64).sqrt() as usize;
    while inter > 1 && !world_size.is_multiple_of(inter) {
        inter -= 1;
    }
    let inter = inter.max(1);
    Mesh2d {
        intra: world_size / inter,
        inter,
    }
}

/// Split sizes used for the sharding axis; exposed for callers that chunk
/// tensors without a template.
pub fn shard_sizes(extent: usize, parts: usize) -> Result<Vec<usize>, SplitError> {
    split_sizes(extent, 0, parts, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{validate_schedule, OpKind};
    use std::collections::BTreeSet;

    fn params(w: usize, rows: usize) -> TemplateParams {
        TemplateParams::new(w, TensorSpec::new("A", vec![rows * w, 4], 2), 0)
    }

    fn peers(s: &CommSchedule, r: usize) -> Vec<usize> {
        s.plans[r]
            .iter()
            .map(|op| op.as_p2p().unwrap().peer)
            .collect()
    }

    #[test]
    fn single_rank_templates_are_empty() {
        let p = params(1, 8).with_mesh(1, 1);
        for t in Template::ALL {
            let s = t.instantiate(&p).unwrap();
            assert!(s.plans.iter().all(Vec::is_empty), "{t}");
        }
    }

    #[test]
    fn ring_w4_shape() {
        let s = ring_allgather(&params(4, 1024)).unwrap();
        assert_eq!(s.op_count(), 12);
        let first = s.plans[0][0].as_p2p().unwrap();
        assert_eq!(first.direction, Direction::Push);
        assert_eq!(first.peer, 1);
        assert_eq!(first.src_chunk.region.offsets[0], 0);
        assert!(s.plans[0][0].deps.is_empty());
        assert_eq!(s.plans[2][1].deps, vec![OpRef::new(1, 0)]);
        assert!(validate_schedule(&s).is_valid());
    }

    #[test]
    fn ring_w2_is_one_push_each() {
        let s = ring_allgather(&params(2, 8)).unwrap();
        for r in 0..2 {
            assert_eq!(s.plans[r].len(), 1);
            assert!(s.plans[r][0].deps.is_empty());
            assert_eq!(s.plans[r][0].src_chunk().region, params(2, 8).shard(r));
        }
    }

    #[test]
    fn swizzle_peer_order() {
        let s = allgather_1d_swizzle(&params(4, 8)).unwrap();
        assert_eq!(peers(&s, 2), vec![3, 0, 1]);
        assert!(s.ops().all(|(_, op)| op.deps.is_empty()));
    }

    #[test]
    fn swizzle_rotation_property_w8() {
        let s = allgather_1d_swizzle(&params(8, 2)).unwrap();
        for i in 0..7 {
            let at_i: BTreeSet<usize> = (0..8).map(|r| peers(&s, r)[i]).collect();
            assert_eq!(at_i.len(), 8, "position {i} repeats a peer");
        }
    }

    #[test]
    fn allreduce_counts() {
        let s = partition_allreduce(&params(4, 4)).unwrap();
        for r in 0..4 {
            let acc = s.plans[r]
                .iter()
                .filter(|op| op.as_p2p().unwrap().accumulate)
                .count();
            assert_eq!(acc, 3);
            assert_eq!(s.plans[r].len(), 6);
        }
        assert!(validate_schedule(&s).is_valid());
        // phase-two ops on home 0 wait for the three pushes of chunk 0
        let deps: BTreeSet<OpRef> = s.plans[0][3].deps.iter().copied().collect();
        for d in &deps {
            let tr = s.transfer(*d).unwrap();
            assert_eq!(tr.dst_rank, 0);
            assert!(tr.accumulate);
        }
        assert_eq!(deps.len(), 3);
    }

    #[test]
    fn mesh_2x1_matches_1d() {
        let p = params(2, 8).with_mesh(2, 1);
        assert_eq!(
            allgather_2d_swizzle(&p).unwrap(),
            allgather_1d_swizzle(&p).unwrap()
        );
    }

    #[test]
    fn mesh_2x2_op_mix() {
        let p = params(4, 8).with_mesh(2, 2);
        let s = allgather_2d_swizzle(&p).unwrap();
        for r in 0..4 {
            let group = r / 2;
            let intra = peers(&s, r).iter().filter(|&&q| q / 2 == group).count();
            assert_eq!(intra, 1);
            assert_eq!(s.plans[r].len() - intra, 2);
        }
        assert!(validate_schedule(&s).is_valid());
    }

    #[test]
    fn mesh_4x2_is_heterogeneous() {
        let p = params(8, 2).with_mesh(4, 2);
        let s = allgather_2d_swizzle(&p).unwrap();
        let shape =
            |r: usize| -> Vec<usize> { s.plans[r].iter().map(|op| op.deps.len()).collect() };
        let shapes: BTreeSet<Vec<usize>> = (0..8).map(shape).collect();
        assert!(shapes.len() >= 2);
        assert!(validate_schedule(&s).is_valid());
    }

    #[test]
    fn mesh_mismatch_rejected() {
        let p = params(4, 8).with_mesh(3, 1);
        assert!(matches!(
            allgather_2d_swizzle(&p),
            Err(TemplateError::Params(_))
        ));
        assert!(allgather_2d_swizzle(&params(4, 8)).is_err());
    }

    #[test]
    fn stages_split_every_transfer() {
        let s = ring_allgather(&params(4, 8).with_stages(2)).unwrap();
        assert_eq!(s.op_count(), 24);
        assert!(validate_schedule(&s).is_valid());
        assert!(s.ops().all(|(_, op)| matches!(op.kind, OpKind::P2p(_))));
    }

    #[test]
    fn names_parse() {
        for t in Template::ALL {
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
        assert!("ring".parse::<Template>().is_err());
    }
}
