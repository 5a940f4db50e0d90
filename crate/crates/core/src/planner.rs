//! Chunk/tile dependence analysis, minimal synchronization and tile swizzling.

use crate::kernel::{default_tile_order, TileProgram};
use crate::region::{covered_by, Region};
use crate::schedule::{op_depths, CommSchedule, OpKind, OpRef, ScheduleError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Op { rank: usize, index: usize },
    Tile { id: usize },
}

impl Node {
    pub fn op(at: OpRef) -> Self {
        Node::Op {
            rank: at.rank,
            index: at.index,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Op { rank, index } => write!(f, "op{rank}_{index}"),
            Node::Tile { id } => write!(f, "tile{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ChunkBeforeTile,
    TileBeforeChunk,
    ChunkBeforeChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub kind: EdgeKind,
}

/// Dependence structure between the ops of a schedule and the tiles that
/// run on one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepGraph {
    pub rank: usize,
    pub tile_count: usize,
    pub ops: Vec<OpRef>,
    /// Ops that deliver data into this rank.
    pub incoming: Vec<OpRef>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("unschedulable dependence: cycle through {0}")]
    Unschedulable(String),
    #[error("tile {tile} reads {region}, which is neither owned nor delivered by any op")]
    UncoveredRead { tile: usize, region: Region },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("bad intra-chunk policy {0:?}")]
    Policy(String),
}

/// Regions an op writes on `rank` (empty if it delivers nothing there).
pub fn op_writes_on(s: &CommSchedule, at: OpRef, rank: usize) -> Option<&Region> {
    let op = s.op(at);
    match &op.kind {
        OpKind::P2p(_) => {
            let t = s.transfer(at)?;
            (t.dst_rank == rank).then_some(&t.dst.region)
        }
        // a collective member op delivers into its own rank
        OpKind::Collective(c) => (at.rank == rank).then_some(&c.dst_chunk.region),
    }
}

/// Region an op reads on `rank`.
pub fn op_reads_on(s: &CommSchedule, at: OpRef, rank: usize) -> Option<&Region> {
    let op = s.op(at);
    match &op.kind {
        OpKind::P2p(_) => {
            let t = s.transfer(at)?;
            (t.src_rank == rank).then_some(&t.src.region)
        }
        OpKind::Collective(c) => (at.rank == rank).then_some(&c.src_chunk.region),
    }
}

pub fn build_depgraph(
    s: &CommSchedule,
    p: &TileProgram,
    rank: usize,
) -> Result<DepGraph, PlanError> {
    let tiles = p.tile_count();
    let mut edges = Vec::new();
    let mut ops = Vec::new();
    let mut incoming = Vec::new();
    for (at, op) in s.ops() {
        ops.push(at);
        for &d in &op.deps {
            edges.push(Edge {
                from: Node::op(d),
                to: Node::op(at),
                kind: EdgeKind::ChunkBeforeChunk,
            });
        }
        if let Some(dst) = op_writes_on(s, at, rank) {
            incoming.push(at);
            for t in p.tiles_reading(dst) {
                edges.push(Edge {
                    from: Node::op(at),
                    to: Node::Tile { id: t },
                    kind: EdgeKind::ChunkBeforeTile,
                });
            }
        }
        if let Some(src) = op_reads_on(s, at, rank) {
            for t in p.tiles_writing(src) {
                edges.push(Edge {
                    from: Node::Tile { id: t },
                    to: Node::op(at),
                    kind: EdgeKind::TileBeforeChunk,
                });
            }
        }
    }
    let g = DepGraph {
        rank,
        tile_count: tiles,
        ops,
        incoming,
        edges,
    };
    if let Some(n) = g.find_cycle() {
        return Err(PlanError::Unschedulable(n.to_string()));
    }
    Ok(g)
}

impl DepGraph {
    fn find_cycle(&self) -> Option<Node> {
        let mut succ: BTreeMap<Node, Vec<Node>> = BTreeMap::new();
        let mut indeg: BTreeMap<Node, usize> = BTreeMap::new();
        for &at in &self.ops {
            indeg.insert(Node::op(at), 0);
        }
        for t in 0..self.tile_count {
            indeg.insert(Node::Tile { id: t }, 0);
        }
        for e in &self.edges {
            succ.entry(e.from).or_default().push(e.to);
            *indeg.entry(e.to).or_default() += 1;
            indeg.entry(e.from).or_default();
        }
        let mut ready: Vec<Node> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for m in succ.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(*m);
                }
            }
        }
        (seen != indeg.len()).then(|| *indeg.iter().find(|(_, &d)| d > 0).unwrap().0)
    }

    /// Tiles on this rank that read what `op` delivers.
    pub fn consumers(&self, op: OpRef) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::ChunkBeforeTile && e.from == Node::op(op))
            .filter_map(|e| match e.to {
                Node::Tile { id } => Some(id),
                Node::Op { .. } => None,
            })
            .collect()
    }

    /// Tiles on this rank whose output `op` sends.
    pub fn producers(&self, op: OpRef) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::TileBeforeChunk && e.to == Node::op(op))
            .filter_map(|e| match e.from {
                Node::Tile { id } => Some(id),
                Node::Op { .. } => None,
            })
            .collect()
    }

    /// `(consumers, producers)` of every op with any, in one pass.
    pub fn tile_maps(&self) -> (BTreeMap<OpRef, Vec<usize>>, BTreeMap<OpRef, Vec<usize>>) {
        let mut cons: BTreeMap<OpRef, Vec<usize>> = BTreeMap::new();
        let mut prods: BTreeMap<OpRef, Vec<usize>> = BTreeMap::new();
        for e in &self.edges {
            match (e.kind, e.from, e.to) {
                (EdgeKind::ChunkBeforeTile, Node::Op { rank, index }, Node::Tile { id }) => {
                    cons.entry(OpRef::new(rank, index)).or_default().push(id)
                }
                (EdgeKind::TileBeforeChunk, Node::Tile { id }, Node::Op { rank, index }) => {
                    prods.entry(OpRef::new(rank, index)).or_default().push(id)
                }
                _ => {}
            }
        }
        (cons, prods)
    }

    pub fn to_dot(&self) -> String {
        let mut out = format!("digraph rank{} {{\n  rankdir=LR;\n", self.rank);
        for at in &self.ops {
            let _ = writeln!(
                out,
                "  {} [shape=box,label=\"op ({},{})\"];",
                Node::op(*at),
                at.rank,
                at.index
            );
        }
        for t in 0..self.tile_count {
            let _ = writeln!(out, "  tile{t} [shape=ellipse,label=\"tile {t}\"];");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::ChunkBeforeTile => "solid",
                EdgeKind::TileBeforeChunk => "dashed",
                EdgeKind::ChunkBeforeChunk => "dotted",
            };
            let _ = writeln!(out, "  {} -> {} [style={style}];", e.from, e.to);
        }
        out.push_str("}\n");
        out
    }
}

/// What a signal waits for before it fires.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Guard {
    Op { op: OpRef },
    Tiles { rank: usize, tiles: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum Location {
    /// Before position `pos` of the rank's tile order.
    BeforeTile {
        rank: usize,
        pos: usize,
    },
    /// After position `pos` of the rank's tile order.
    AfterTile {
        rank: usize,
        pos: usize,
    },
    BeforeOp {
        op: OpRef,
    },
    AfterOp {
        op: OpRef,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncKind {
    Wait,
    Signal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPoint {
    pub location: Location,
    pub kind: SyncKind,
    pub signal: usize,
    pub guard: Guard,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPlan {
    pub points: Vec<SyncPoint>,
    pub diagnostics: Vec<String>,
}

impl SyncPlan {
    pub fn waits(&self) -> impl Iterator<Item = &SyncPoint> {
        self.points.iter().filter(|p| p.kind == SyncKind::Wait)
    }
}

/// One signal per chunk crossing the compute/communication boundary, and
/// one wait in front of its first consumer (or behind its last producer).
/// Later consumers are covered by the in-order tile dispatch.
pub fn insert_min_syncs(g: &DepGraph, order: &[usize]) -> SyncPlan {
    let mut pos = vec![usize::MAX; g.tile_count];
    for (i, &t) in order.iter().enumerate() {
        pos[t] = i;
    }
    let mut plan = SyncPlan::default();
    let mut next = 0;
    let (mut cons, mut prods) = g.tile_maps();
    for &op in &g.ops {
        let consumers = cons.remove(&op).unwrap_or_default();
        if !consumers.is_empty() || g.incoming.contains(&op) {
            let sig = next;
            next += 1;
            plan.points.push(SyncPoint {
                location: Location::AfterOp { op },
                kind: SyncKind::Signal,
                signal: sig,
                guard: Guard::Op { op },
            });
            match consumers.iter().map(|&t| pos[t]).min() {
                Some(first) => plan.points.push(SyncPoint {
                    location: Location::BeforeTile {
                        rank: g.rank,
                        pos: first,
                    },
                    kind: SyncKind::Wait,
                    signal: sig,
                    guard: Guard::Op { op },
                }),
                None if g.tile_count > 0 => plan.diagnostics.push(format!(
                    "dead chunk: op {op} is consumed by no tile on rank {}",
                    g.rank
                )),
                None => {}
            }
        }
        let producers = prods.remove(&op).unwrap_or_default();
        if !producers.is_empty() {
            let last = producers.iter().map(|&t| pos[t]).max().unwrap();
            let mut tiles = producers;
            tiles.sort_unstable();
            let guard = Guard::Tiles {
                rank: g.rank,
                tiles,
            };
            let sig = next;
            next += 1;
            plan.points.push(SyncPoint {
                location: Location::AfterTile {
                    rank: g.rank,
                    pos: last,
                },
                kind: SyncKind::Signal,
                signal: sig,
                guard: guard.clone(),
            });
            plan.points.push(SyncPoint {
                location: Location::BeforeOp { op },
                kind: SyncKind::Wait,
                signal: sig,
                guard,
            });
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "policy", content = "g", rename_all = "snake_case")]
pub enum IntraPolicy {
    RowMajor,
    ColMajor,
    /// Column panels `g` tiles wide, snaking between panels.
    Grouped(usize),
}

impl IntraPolicy {
    fn key(self, a: usize, b: usize) -> (usize, usize, usize, usize) {
        match self {
            IntraPolicy::RowMajor => (a, b, 0, 0),
            IntraPolicy::ColMajor => (b, a, 0, 0),
            IntraPolicy::Grouped(g) => {
                let g = g.max(1);
                let panel = b / g;
                let band = if panel % 2 == 1 {
                    usize::MAX - a / g
                } else {
                    a / g
                };
                (panel, band, b % g, a % g)
            }
        }
    }
}

impl fmt::Display for IntraPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntraPolicy::RowMajor => f.write_str("row_major"),
            IntraPolicy::ColMajor => f.write_str("col_major"),
            IntraPolicy::Grouped(g) => write!(f, "grouped{g}"),
        }
    }
}

impl FromStr for IntraPolicy {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "row_major" => Ok(IntraPolicy::RowMajor),
            "col_major" => Ok(IntraPolicy::ColMajor),
            _ => s
                .strip_prefix("grouped")
                .map(|g| g.trim_start_matches(['(', ':']).trim_end_matches(')'))
                .and_then(|g| g.parse().ok())
                .filter(|&g: &usize| g > 0)
                .map(IntraPolicy::Grouped)
                .ok_or_else(|| PlanError::Policy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwizzledSchedule {
    pub order: Vec<usize>,
    /// Arriving chunks in the order their tile groups are emitted.
    pub chunk_order: Vec<OpRef>,
    /// Start offset of every group in `order`; group 0 holds tiles with no remote reads.
    pub group_starts: Vec<usize>,
    pub intra: IntraPolicy,
}

impl SwizzledSchedule {
    pub fn groups(&self) -> Vec<&[usize]> {
        let mut out = Vec::new();
        for (i, &s) in self.group_starts.iter().enumerate() {
            let e = self
                .group_starts
                .get(i + 1)
                .copied()
                .unwrap_or(self.order.len());
            out.push(&self.order[s..e]);
        }
        out
    }
}

type ArrivalKey = (usize, usize, usize);

fn arrival_key(depths: &BTreeMap<OpRef, usize>, at: OpRef) -> ArrivalKey {
    (depths[&at], at.rank, at.index)
}

/// Reorder a rank's tiles so they follow the arrival order of the chunks
/// they read.
///
/// A tile joins the group of the latest-arriving chunk it needs; tiles with
/// no remote reads form group 0. Inside a group, tiles feeding earlier
/// outgoing ops come first, then `intra` decides.
pub fn swizzle_to_chunk_order(
    p: &TileProgram,
    s: &CommSchedule,
    rank: usize,
    intra: IntraPolicy,
) -> Result<SwizzledSchedule, PlanError> {
    swizzle_with_depths(p, s, rank, intra, &op_depths(s)?)
}

fn swizzle_with_depths(
    p: &TileProgram,
    s: &CommSchedule,
    rank: usize,
    intra: IntraPolicy,
    depths: &BTreeMap<OpRef, usize>,
) -> Result<SwizzledSchedule, PlanError> {
    let incoming: Vec<(OpRef, &Region)> = s
        .ops()
        .filter_map(|(at, _)| op_writes_on(s, at, rank).map(|r| (at, r)))
        .collect();
    let outgoing: Vec<(OpRef, &Region)> = s
        .ops()
        .filter_map(|(at, _)| op_reads_on(s, at, rank).map(|r| (at, r)))
        .collect();
    let tiles = p.tile_count();
    let mut delivered_to: Vec<Vec<usize>> = vec![Vec::new(); tiles];
    for (i, (_, d)) in incoming.iter().enumerate() {
        for t in p.tiles_reading(d) {
            delivered_to[t].push(i);
        }
    }
    let mut feeds: Vec<Option<ArrivalKey>> = vec![None; tiles];
    for (at, src) in &outgoing {
        let k = arrival_key(depths, *at);
        for t in p.tiles_writing(src) {
            feeds[t] = Some(feeds[t].map_or(k, |f| f.min(k)));
        }
    }
    let mut keyed = Vec::with_capacity(tiles);
    for t in 0..tiles {
        for r in p.read_regions(t) {
            if !s.tensors.contains_key(&r.tensor_id) {
                continue;
            }
            let owned = s.owned(rank, &r.tensor_id);
            if owned.iter().any(|o| o.contains(&r)) {
                continue;
            }
            let mut cover: Vec<Region> = owned.to_vec();
            cover.extend(
                delivered_to[t]
                    .iter()
                    .map(|&i| incoming[i].1)
                    .filter(|d| d.intersects(&r))
                    .cloned(),
            );
            if !covered_by(&r, &cover) {
                return Err(PlanError::UncoveredRead { tile: t, region: r });
            }
        }
        let group = delivered_to[t]
            .iter()
            .map(|&i| arrival_key(depths, incoming[i].0))
            .max();
        let c = p.coords(t);
        let (a, b) = (
            c.first().copied().unwrap_or(0),
            c.get(1).copied().unwrap_or(0),
        );
        keyed.push((
            group,
            feeds[t].unwrap_or((usize::MAX, 0, 0)),
            intra.key(a, b),
            t,
        ));
    }
    // None sorts before Some: tiles without remote reads go first
    keyed.sort();
    let mut order = Vec::with_capacity(keyed.len());
    let mut group_starts = Vec::new();
    let mut chunk_order = Vec::new();
    let mut last: Option<Option<ArrivalKey>> = None;
    for (i, (g, _, _, t)) in keyed.iter().enumerate() {
        if last != Some(*g) {
            group_starts.push(i);
            if let Some((_, r, idx)) = g {
                chunk_order.push(OpRef::new(*r, *idx));
            }
            last = Some(*g);
        }
        order.push(*t);
    }
    if group_starts.first() != Some(&0) {
        // keep group 0 explicit even when it is empty
        group_starts.insert(0, 0);
    }
    Ok(SwizzledSchedule {
        order,
        chunk_order,
        group_starts,
        intra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub graph: DepGraph,
    pub swizzle: SwizzledSchedule,
    pub syncs: SyncPlan,
}

/// A schedule and kernel with every rank's dependence graph, tile order and
/// synchronization points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planned {
    pub schedule: CommSchedule,
    pub kernel: TileProgram,
    pub ranks: Vec<RankPlan>,
}

pub fn plan(s: &CommSchedule, p: &TileProgram, intra: IntraPolicy) -> Result<Planned, PlanError> {
    let depths = op_depths(s)?;
    let ranks = (0..s.world_size)
        .map(|rank| {
            let graph = build_depgraph(s, p, rank)?;
            let swizzle = swizzle_with_depths(p, s, rank, intra, &depths)?;
            let syncs = insert_min_syncs(&graph, &swizzle.order);
            Ok(RankPlan {
                graph,
                swizzle,
                syncs,
            })
        })
        .collect::<Result<Vec<_>, PlanError>>()?;
    Ok(Planned {
        schedule: s.clone(),
        kernel: p.clone(),
        ranks,
    })
}

/// Tile order used when no swizzling is requested: row-major within the policy.
pub fn unswizzled(p: &TileProgram) -> Vec<usize> {
    default_tile_order(p).order
}

/// Tiles on `rank` reading a region delivered by each op, for diagnostics.
pub fn consumers_by_op(g: &DepGraph) -> BTreeMap<OpRef, BTreeSet<usize>> {
    let mut out: BTreeMap<OpRef, BTreeSet<usize>> = BTreeMap::new();
    for e in &g.edges {
        if let (EdgeKind::ChunkBeforeTile, Node::Op { rank, index }, Node::Tile { id }) =
            (e.kind, e.from, e.to)
        {
            out.entry(OpRef::new(rank, index)).or_default().insert(id);
        }
    }
    out
}
