//! Chunk-level communication schedules.
//!
//! A schedule is one ordered op list per rank. Ops refer to each other by
//! `(rank, index)` position; a dependency is satisfied once the referenced
//! op has completed.

use crate::region::{split_region, Chunk, Region, SplitError, TensorId, TensorSpec};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

/// Position of an op in a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpRef {
    pub rank: usize,
    pub index: usize,
}

pub type Dependency = OpRef;

impl OpRef {
    pub fn new(rank: usize, index: usize) -> Self {
        OpRef { rank, index }
    }
}

impl fmt::Display for OpRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.rank, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Push,
    Pull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    Allgather,
    ReduceScatter,
    Allreduce,
    AllToAll,
}

impl CollectiveKind {
    pub fn reduces(self) -> bool {
        matches!(
            self,
            CollectiveKind::ReduceScatter | CollectiveKind::Allreduce
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct P2p {
    pub direction: Direction,
    pub peer: usize,
    pub src_chunk: Chunk,
    pub dst_chunk: Chunk,
    /// Reduce into the destination instead of overwriting it.
    #[serde(default)]
    pub accumulate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collective {
    pub collective_type: CollectiveKind,
    pub src_chunk: Chunk,
    pub dst_chunk: Chunk,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    P2p(P2p),
    Collective(Collective),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommOp {
    #[serde(flatten)]
    pub kind: OpKind,
    #[serde(default)]
    pub deps: Vec<Dependency>,
}

impl CommOp {
    pub fn push(peer: usize, src: Chunk, dst: Chunk) -> Self {
        Self::p2p(Direction::Push, peer, src, dst, false)
    }

    pub fn pull(peer: usize, src: Chunk, dst: Chunk) -> Self {
        Self::p2p(Direction::Pull, peer, src, dst, false)
    }

    pub fn p2p(
        direction: Direction,
        peer: usize,
        src: Chunk,
        dst: Chunk,
        accumulate: bool,
    ) -> Self {
        CommOp {
            kind: OpKind::P2p(P2p {
                direction,
                peer,
                src_chunk: src,
                dst_chunk: dst,
                accumulate,
            }),
            deps: Vec::new(),
        }
    }

    pub fn collective(kind: CollectiveKind, src: Chunk, dst: Chunk, ranks: Vec<usize>) -> Self {
        CommOp {
            kind: OpKind::Collective(Collective {
                collective_type: kind,
                src_chunk: src,
                dst_chunk: dst,
                ranks,
            }),
            deps: Vec::new(),
        }
    }

    pub fn with_deps(mut self, deps: Vec<Dependency>) -> Self {
        self.deps = deps;
        self
    }

    pub fn src_chunk(&self) -> &Chunk {
        match &self.kind {
            OpKind::P2p(p) => &p.src_chunk,
            OpKind::Collective(c) => &c.src_chunk,
        }
    }

    pub fn dst_chunk(&self) -> &Chunk {
        match &self.kind {
            OpKind::P2p(p) => &p.dst_chunk,
            OpKind::Collective(c) => &c.dst_chunk,
        }
    }

    /// Whether executing this op requires a reduction (accumulate push or reducing collective).
    pub fn needs_reduce(&self) -> bool {
        match &self.kind {
            OpKind::P2p(p) => p.accumulate,
            OpKind::Collective(c) => c.collective_type.reduces(),
        }
    }

    pub fn as_p2p(&self) -> Option<&P2p> {
        match &self.kind {
            OpKind::P2p(p) => Some(p),
            OpKind::Collective(_) => None,
        }
    }
}

/// Resolved endpoints of a point-to-point transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer<'a> {
    pub src_rank: usize,
    pub dst_rank: usize,
    pub src: &'a Chunk,
    pub dst: &'a Chunk,
    pub accumulate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSchedule {
    pub world_size: usize,
    pub tensors: BTreeMap<TensorId, TensorSpec>,
    pub plans: Vec<Vec<CommOp>>,
    pub owner_regions: Vec<BTreeMap<TensorId, Vec<Region>>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("dependence cycle through {0}")]
    Cycle(OpRef),
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("cannot split collective op {0}")]
    SplitCollective(OpRef),
    #[error("split of op {at} gives unequal src/dst piece volumes")]
    SplitMismatch { at: OpRef },
    #[error("schedule json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CommSchedule {
    /// Empty schedule over `world_size` ranks.
    pub fn empty(world_size: usize) -> Self {
        CommSchedule {
            world_size,
            tensors: BTreeMap::new(),
            plans: vec![Vec::new(); world_size],
            owner_regions: vec![BTreeMap::new(); world_size],
        }
    }

    pub fn add_tensor(&mut self, spec: TensorSpec) {
        self.tensors.insert(spec.tensor_id.clone(), spec);
    }

    pub fn own(&mut self, rank: usize, region: Region) {
        self.owner_regions[rank]
            .entry(region.tensor_id.clone())
            .or_default()
            .push(region);
    }

    pub fn op(&self, at: OpRef) -> &CommOp {
        &self.plans[at.rank][at.index]
    }

    pub fn op_count(&self) -> usize {
        self.plans.iter().map(Vec::len).sum()
    }

    pub fn ops(&self) -> impl Iterator<Item = (OpRef, &CommOp)> {
        self.plans.iter().enumerate().flat_map(|(r, plan)| {
            plan.iter()
                .enumerate()
                .map(move |(i, op)| (OpRef::new(r, i), op))
        })
    }

    pub fn owned(&self, rank: usize, tensor: &str) -> &[Region] {
        self.owner_regions
            .get(rank)
            .and_then(|m| m.get(tensor))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn transfer(&self, at: OpRef) -> Option<Transfer<'_>> {
        let p = self.op(at).as_p2p()?;
        let (src_rank, dst_rank) = match p.direction {
            Direction::Push => (at.rank, p.peer),
            Direction::Pull => (p.peer, at.rank),
        };
        Some(Transfer {
            src_rank,
            dst_rank,
            src: &p.src_chunk,
            dst: &p.dst_chunk,
            accumulate: p.accumulate,
        })
    }

    /// Bytes moved by one op (the destination chunk volume).
    pub fn op_bytes(&self, at: OpRef) -> usize {
        let dst = &self.op(at).dst_chunk().region;
        let elem = self.tensors.get(&dst.tensor_id).map_or(1, |t| t.elem_bytes);
        dst.bytes(elem)
    }

    /// Ops on the ranks that must all issue the same collective, keyed by
    /// each participating op. Instances are matched by rank set and
    /// occurrence count on each rank.
    pub fn collective_instances(&self) -> Vec<Vec<OpRef>> {
        let mut seen: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
        let mut keyed: BTreeMap<(Vec<usize>, usize), Vec<OpRef>> = BTreeMap::new();
        for (at, op) in self.ops() {
            if let OpKind::Collective(c) = &op.kind {
                let mut set = c.ranks.clone();
                set.sort_unstable();
                set.dedup();
                let n = seen.entry((at.rank, set.clone())).or_insert(0);
                keyed.entry((set, *n)).or_default().push(at);
                *n += 1;
            }
        }
        keyed.into_values().collect()
    }

    /// Ordering edges `(before, after)`: explicit deps, in-plan order on each
    /// rank, and collective rendezvous.
    pub fn order_edges(&self) -> Vec<(OpRef, OpRef)> {
        let mut edges = Vec::new();
        for (at, op) in self.ops() {
            if at.index > 0 {
                edges.push((OpRef::new(at.rank, at.index - 1), at));
            }
            for &d in &op.deps {
                edges.push((d, at));
            }
        }
        for inst in self.collective_instances() {
            for &a in &inst {
                for &b in &inst {
                    if a == b {
                        continue;
                    }
                    if a.index > 0 {
                        edges.push((OpRef::new(a.rank, a.index - 1), b));
                    }
                    for &d in &self.op(a).deps {
                        edges.push((d, b));
                    }
                }
            }
        }
        edges.retain(|(a, b)| self.contains(*a) && self.contains(*b));
        edges.sort();
        edges.dedup();
        edges
    }

    pub fn contains(&self, at: OpRef) -> bool {
        at.rank < self.plans.len() && at.index < self.plans[at.rank].len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PlanCount,
    BadTensor,
    UnknownTensor,
    OutOfBounds,
    VolumeMismatch,
    BadPeer,
    RankSet,
    CollectiveMismatch,
    DanglingDependency,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub at: Option<OpRef>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.at {
            Some(at) => write!(f, "op {at}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, at: Option<OpRef>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            at,
            message: message.into(),
        });
    }
}

/// Check every structural rule of a schedule. Violations are data; an empty
/// report means the schedule is valid.
pub fn validate_schedule(s: &CommSchedule) -> ValidationReport {
    let mut report = ValidationReport::default();
    let w = s.world_size;
    if w == 0 {
        report.push(
            ViolationKind::PlanCount,
            None,
            "world_size must be positive",
        );
        return report;
    }
    if s.plans.len() != w {
        report.push(
            ViolationKind::PlanCount,
            None,
            format!("{} plans for world size {}", s.plans.len(), w),
        );
    }
    if s.owner_regions.len() != w && !s.owner_regions.is_empty() {
        report.push(
            ViolationKind::PlanCount,
            None,
            format!(
                "{} owner region maps for world size {}",
                s.owner_regions.len(),
                w
            ),
        );
    }
    for (id, spec) in &s.tensors {
        if id != &spec.tensor_id {
            report.push(
                ViolationKind::BadTensor,
                None,
                format!("tensor key {id} names spec {}", spec.tensor_id),
            );
        }
        if let Err(e) = spec.check() {
            report.push(ViolationKind::BadTensor, None, e);
        }
    }
    let check_region = |report: &mut ValidationReport, at: Option<OpRef>, r: &Region| -> bool {
        match s.tensors.get(&r.tensor_id) {
            None => {
                report.push(
                    ViolationKind::UnknownTensor,
                    at,
                    format!("unknown tensor {}", r.tensor_id),
                );
                false
            }
            Some(spec) => match r.check_against(spec) {
                Ok(()) => true,
                Err(e) => {
                    report.push(ViolationKind::OutOfBounds, at, e);
                    false
                }
            },
        }
    };
    for (rank, owned) in s.owner_regions.iter().enumerate() {
        for regions in owned.values() {
            for r in regions {
                if !check_region(&mut report, None, r) {
                    report.violations.last_mut().unwrap().message +=
                        &format!(" (owner region of rank {rank})");
                }
            }
        }
    }
    for (at, op) in s.ops() {
        let src_ok = check_region(&mut report, Some(at), &op.src_chunk().region);
        let dst_ok = check_region(&mut report, Some(at), &op.dst_chunk().region);
        match &op.kind {
            OpKind::P2p(p) => {
                if p.peer >= w || p.peer == at.rank {
                    report.push(
                        ViolationKind::BadPeer,
                        Some(at),
                        format!(
                            "peer {} invalid for rank {} in world {}",
                            p.peer, at.rank, w
                        ),
                    );
                }
                if src_ok && dst_ok {
                    let sb = s.tensors[&p.src_chunk.region.tensor_id].elem_bytes;
                    let db = s.tensors[&p.dst_chunk.region.tensor_id].elem_bytes;
                    let (svol, dvol) = (p.src_chunk.region.bytes(sb), p.dst_chunk.region.bytes(db));
                    if svol != dvol {
                        report.push(
                            ViolationKind::VolumeMismatch,
                            Some(at),
                            format!("P2P volume mismatch: src {svol} bytes, dst {dvol} bytes"),
                        );
                    }
                }
            }
            OpKind::Collective(c) => {
                let set: BTreeSet<usize> = c.ranks.iter().copied().collect();
                if !set.contains(&at.rank) {
                    report.push(
                        ViolationKind::RankSet,
                        Some(at),
                        format!(
                            "issuing rank {} not in collective ranks {:?}",
                            at.rank, c.ranks
                        ),
                    );
                }
                if set.len() != c.ranks.len() || c.ranks.iter().any(|&r| r >= w) {
                    report.push(
                        ViolationKind::RankSet,
                        Some(at),
                        format!("bad collective rank set {:?}", c.ranks),
                    );
                }
                if src_ok && dst_ok {
                    let (src, dst) = (&c.src_chunk.region, &c.dst_chunk.region);
                    let shape_ok = match c.collective_type {
                        CollectiveKind::Allgather => dst.contains(src),
                        CollectiveKind::Allreduce => src == dst,
                        CollectiveKind::ReduceScatter => src.contains(dst),
                        CollectiveKind::AllToAll => src.numel() == dst.numel(),
                    };
                    let shape_ok = shape_ok && src.tensor_id == dst.tensor_id;
                    if !shape_ok {
                        report.push(
                            ViolationKind::VolumeMismatch,
                            Some(at),
                            format!(
                                "{:?} collective src {} incompatible with dst {}",
                                c.collective_type, src, dst
                            ),
                        );
                    }
                }
            }
        }
        for &d in &op.deps {
            if !s.contains(d) {
                report.push(
                    ViolationKind::DanglingDependency,
                    Some(at),
                    format!("dependency {d} does not resolve"),
                );
            }
        }
    }
    for inst in s.collective_instances() {
        let first = s.op(inst[0]);
        let OpKind::Collective(c0) = &first.kind else {
            unreachable!()
        };
        let mut members: Vec<usize> = c0.ranks.clone();
        members.sort_unstable();
        members.dedup();
        let issuers: Vec<usize> = inst.iter().map(|a| a.rank).collect();
        let same_type = inst.iter().all(|&a| match &s.op(a).kind {
            OpKind::Collective(c) => c.collective_type == c0.collective_type,
            OpKind::P2p(_) => false,
        });
        if issuers != members || !same_type {
            report.push(
                ViolationKind::CollectiveMismatch,
                Some(inst[0]),
                format!(
                    "collective over {:?} issued by ranks {:?}; every member must issue a matching op",
                    members, issuers
                ),
            );
        }
    }
    if let Some(cycle) = find_cycle(s) {
        let path: Vec<String> = cycle.iter().map(|o| o.to_string()).collect();
        report.push(
            ViolationKind::Cycle,
            Some(cycle[0]),
            format!("dependence cycle: {}", path.join(" -> ")),
        );
    }
    report
}

/// A cycle in the ordering relation, as a closed path (first == last), if any.
pub fn find_cycle(s: &CommSchedule) -> Option<Vec<OpRef>> {
    let mut succ: BTreeMap<OpRef, Vec<OpRef>> = BTreeMap::new();
    for (a, b) in s.order_edges() {
        succ.entry(a).or_default().push(b);
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: BTreeMap<OpRef, Mark> = s.ops().map(|(at, _)| (at, Mark::New)).collect();
    let roots: Vec<OpRef> = mark.keys().copied().collect();
    for root in roots {
        if mark[&root] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path
        let mut stack: Vec<(OpRef, usize)> = vec![(root, 0)];
        mark.insert(root, Mark::Active);
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let children = succ.get(&node).map(Vec::as_slice).unwrap_or(&[]);
            if *next < children.len() {
                let child = children[*next];
                *next += 1;
                match mark[&child] {
                    Mark::New => {
                        mark.insert(child, Mark::Active);
                        stack.push((child, 0));
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|(n, _)| *n == child).unwrap();
                        let mut path: Vec<OpRef> = stack[start..].iter().map(|(n, _)| *n).collect();
                        path.push(child);
                        return Some(path);
                    }
                    Mark::Done => {}
                }
            } else {
                mark.insert(node, Mark::Done);
                stack.pop();
            }
        }
    }
    None
}

/// Topological order of all ops consistent with deps, in-plan order and
/// collective rendezvous. Ties go to the lexicographically smallest `(rank, index)`.
pub fn global_order(s: &CommSchedule) -> Result<Vec<OpRef>, ScheduleError> {
    let mut indeg: BTreeMap<OpRef, usize> = s.ops().map(|(at, _)| (at, 0)).collect();
    let mut succ: BTreeMap<OpRef, Vec<OpRef>> = BTreeMap::new();
    for (a, b) in s.order_edges() {
        *indeg.get_mut(&b).unwrap() += 1;
        succ.entry(a).or_default().push(b);
    }
    let mut ready: BinaryHeap<Reverse<OpRef>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&at, _)| Reverse(at))
        .collect();
    let mut out = Vec::with_capacity(indeg.len());
    while let Some(Reverse(at)) = ready.pop() {
        out.push(at);
        for &b in succ.get(&at).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&b).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(b));
            }
        }
    }
    if out.len() != indeg.len() {
        let stuck = indeg
            .iter()
            .find(|(at, _)| !out.contains(at))
            .map(|(&at, _)| at)
            .unwrap();
        return Err(ScheduleError::Cycle(stuck));
    }
    Ok(out)
}

/// Longest-path depth of every op in the ordering relation.
pub fn op_depths(s: &CommSchedule) -> Result<BTreeMap<OpRef, usize>, ScheduleError> {
    let order = global_order(s)?;
    let mut pred: BTreeMap<OpRef, Vec<OpRef>> = BTreeMap::new();
    for (a, b) in s.order_edges() {
        pred.entry(b).or_default().push(a);
    }
    let mut depth = BTreeMap::new();
    for at in order {
        let d = pred
            .get(&at)
            .map(|ps| ps.iter().map(|p| depth[p] + 1).max().unwrap_or(0))
            .unwrap_or(0);
        depth.insert(at, d);
    }
    Ok(depth)
}

/// Split every point-to-point transfer into `factor` pieces along `axis`.
///
/// Piece `k` of an op depends on the pieces of each dependency whose
/// destination overlaps piece `k`'s source; a dependency with no data overlap
/// is kept on all of its pieces. Collectives are not split.
pub fn split_schedule(
    s: &CommSchedule,
    factor: usize,
    axis: usize,
) -> Result<CommSchedule, ScheduleError> {
    if factor == 1 {
        return Ok(s.clone());
    }
    let mut pieces: BTreeMap<OpRef, Vec<CommOp>> = BTreeMap::new();
    for (at, op) in s.ops() {
        match &op.kind {
            OpKind::P2p(p) => {
                let src = split_region(&p.src_chunk.region, axis, factor, true)?;
                let dst = split_region(&p.dst_chunk.region, axis, factor, true)?;
                let mut out = Vec::with_capacity(factor);
                for (k, (sr, dr)) in src.into_iter().zip(dst).enumerate() {
                    if sr.numel() != dr.numel() {
                        return Err(ScheduleError::SplitMismatch { at });
                    }
                    let mut q = p.clone();
                    q.src_chunk = Chunk {
                        chunk_id: format!("{}.{}", p.src_chunk.chunk_id, k),
                        region: sr,
                        layout: p.src_chunk.layout,
                    };
                    q.dst_chunk = Chunk {
                        chunk_id: format!("{}.{}", p.dst_chunk.chunk_id, k),
                        region: dr,
                        layout: p.dst_chunk.layout,
                    };
                    out.push(CommOp {
                        kind: OpKind::P2p(q),
                        deps: Vec::new(),
                    });
                }
                pieces.insert(at, out);
            }
            OpKind::Collective(_) => {
                return Err(ScheduleError::SplitCollective(at));
            }
        }
    }
    // new index of piece k of op (r, i) is i * factor + k
    let mut out = s.clone();
    for (rank, plan) in s.plans.iter().enumerate() {
        let mut new_plan = Vec::with_capacity(plan.len() * factor);
        for (i, op) in plan.iter().enumerate() {
            let at = OpRef::new(rank, i);
            let tr = s.transfer(at).expect("p2p");
            for (k, piece) in pieces[&at].iter().enumerate() {
                let mut piece = piece.clone();
                for &d in &op.deps {
                    let dt = s.transfer(d).expect("p2p");
                    let overlapping: Vec<usize> = pieces[&d]
                        .iter()
                        .enumerate()
                        .filter(|(_, dp)| {
                            dt.dst_rank == tr.src_rank
                                && dp
                                    .dst_chunk()
                                    .region
                                    .intersects(&pieces[&at][k].src_chunk().region)
                        })
                        .map(|(j, _)| j)
                        .collect();
                    let data_dep =
                        dt.dst_rank == tr.src_rank && dt.dst.region.intersects(&tr.src.region);
                    let chosen: Vec<usize> = if data_dep {
                        overlapping
                    } else {
                        (0..factor).collect()
                    };
                    piece.deps.extend(
                        chosen
                            .into_iter()
                            .map(|j| OpRef::new(d.rank, d.index * factor + j)),
                    );
                }
                new_plan.push(piece);
            }
        }
        out.plans[rank] = new_plan;
    }
    Ok(out)
}

/// Replace every non-contiguous P2P chunk with row-wise contiguous pieces.
/// Pieces of one op inherit all of its deps; dependents wait on every piece.
pub fn make_contiguous(s: &CommSchedule) -> Result<CommSchedule, ScheduleError> {
    let mut index_map: BTreeMap<OpRef, Vec<usize>> = BTreeMap::new();
    let mut out = s.clone();
    for (rank, plan) in s.plans.iter().enumerate() {
        let mut new_plan = Vec::new();
        for (i, op) in plan.iter().enumerate() {
            let at = OpRef::new(rank, i);
            let mut idxs = Vec::new();
            match &op.kind {
                OpKind::P2p(p) => {
                    let sshape = &s.tensors[&p.src_chunk.region.tensor_id].shape;
                    let dshape = &s.tensors[&p.dst_chunk.region.tensor_id].shape;
                    let sp = crate::region::contiguous_pieces(&p.src_chunk, sshape);
                    let dp = crate::region::contiguous_pieces(&p.dst_chunk, dshape);
                    if sp.len() == 1 && dp.len() == 1 {
                        idxs.push(new_plan.len());
                        new_plan.push(op.clone());
                    } else if sp.len() == dp.len()
                        && sp
                            .iter()
                            .zip(&dp)
                            .all(|(a, b)| a.region.numel() == b.region.numel())
                    {
                        for (a, b) in sp.into_iter().zip(dp) {
                            let mut q = p.clone();
                            q.src_chunk = a;
                            q.dst_chunk = b;
                            idxs.push(new_plan.len());
                            new_plan.push(CommOp {
                                kind: OpKind::P2p(q),
                                deps: op.deps.clone(),
                            });
                        }
                    } else {
                        return Err(ScheduleError::SplitMismatch { at });
                    }
                }
                OpKind::Collective(_) => {
                    idxs.push(new_plan.len());
                    new_plan.push(op.clone());
                }
            }
            index_map.insert(at, idxs);
        }
        out.plans[rank] = new_plan;
    }
    for plan in out.plans.iter_mut() {
        for op in plan.iter_mut() {
            op.deps = op
                .deps
                .iter()
                .flat_map(|d| index_map[d].iter().map(move |&j| OpRef::new(d.rank, j)))
                .collect();
        }
    }
    Ok(out)
}
