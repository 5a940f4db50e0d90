//! Sequential, timing-free reference execution.

use super::buffers::{read_set, BufferState, Observation, Payload, ReadKey};
use super::SimError;
use crate::kernel::TileProgram;
use crate::planner::{build_depgraph, EdgeKind, Node};
use crate::schedule::{global_order, CommSchedule, OpKind, OpRef};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

/// One step of the reference order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// An op, or every member of a collective instance at once.
    Ops(Vec<OpRef>),
    Tile {
        rank: usize,
        tile: usize,
    },
}

/// Ground truth: final buffers plus what every reader saw.
#[derive(Debug, Clone)]
pub struct Reference {
    pub state: BufferState,
    pub reads: BTreeMap<ReadKey, Observation>,
    pub steps: Vec<Step>,
    pub inputs: Option<Payload>,
}

/// Op groups that execute as one unit: single p2p ops and collective instances.
pub fn op_instances(s: &CommSchedule) -> (Vec<Vec<OpRef>>, BTreeMap<OpRef, usize>) {
    let mut insts: Vec<Vec<OpRef>> = Vec::new();
    let mut of = BTreeMap::new();
    for (at, op) in s.ops() {
        if matches!(op.kind, OpKind::P2p(_)) {
            of.insert(at, insts.len());
            insts.push(vec![at]);
        }
    }
    for inst in s.collective_instances() {
        for &at in &inst {
            of.insert(at, insts.len());
        }
        insts.push(inst);
    }
    (insts, of)
}

/// Run the schedule and the tile program on every rank without timing.
///
/// Ops and tiles run in a topological order of the op order edges plus the
/// chunk/tile dependences of every rank. Whenever an op is ready it runs
/// first (earliest in the schedule's global order); otherwise the ready
/// tile with the smallest `(rank, id)` runs.
pub fn reference_execute(
    s: &CommSchedule,
    p: &TileProgram,
    inputs: Option<&Payload>,
) -> Result<Reference, SimError> {
    let mut state = BufferState::new(s, p, inputs).map_err(SimError::Setup)?;
    let order = global_order(s).map_err(|e| SimError::Cycle(e.to_string()))?;
    let pos: BTreeMap<OpRef, usize> = order.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let (insts, inst_of) = op_instances(s);
    let tiles = p.tile_count();
    let w = s.world_size;
    // node ids: instances first, then rank * tiles + tile
    let n_inst = insts.len();
    let tile_node = |rank: usize, t: usize| n_inst + rank * tiles + t;
    let total = n_inst + w * tiles;
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); total];
    let mut indeg = vec![0usize; total];
    let mut add = |a: usize, b: usize, succ: &mut Vec<Vec<usize>>| {
        if a != b {
            succ[a].push(b);
            indeg[b] += 1;
        }
    };
    for (a, b) in s.order_edges() {
        add(inst_of[&a], inst_of[&b], &mut succ);
    }
    for rank in 0..w {
        let g = build_depgraph(s, p, rank).map_err(|e| SimError::Cycle(e.to_string()))?;
        for e in &g.edges {
            match (e.kind, e.from, e.to) {
                (EdgeKind::ChunkBeforeTile, Node::Op { rank: r, index }, Node::Tile { id }) => add(
                    inst_of[&OpRef::new(r, index)],
                    tile_node(rank, id),
                    &mut succ,
                ),
                (EdgeKind::TileBeforeChunk, Node::Tile { id }, Node::Op { rank: r, index }) => add(
                    tile_node(rank, id),
                    inst_of[&OpRef::new(r, index)],
                    &mut succ,
                ),
                _ => {}
            }
        }
    }
    let inst_key = |i: usize| insts[i].iter().map(|a| pos[a]).min().unwrap_or(usize::MAX);
    let mut ready_ops: BinaryHeap<Reverse<(usize, usize)>> = BinaryHeap::new();
    let mut ready_tiles: BinaryHeap<Reverse<usize>> = BinaryHeap::new();
    let push_ready = |n: usize,
                      ops: &mut BinaryHeap<Reverse<(usize, usize)>>,
                      ts: &mut BinaryHeap<Reverse<usize>>| {
        if n < n_inst {
            ops.push(Reverse((inst_key(n), n)));
        } else {
            ts.push(Reverse(n));
        }
    };
    for n in 0..total {
        if indeg[n] == 0 {
            push_ready(n, &mut ready_ops, &mut ready_tiles);
        }
    }
    let mut reads = BTreeMap::new();
    let mut steps = Vec::with_capacity(total);
    while let Some(n) = ready_ops
        .pop()
        .map(|Reverse((_, n))| n)
        .or_else(|| ready_tiles.pop().map(|Reverse(n)| n))
    {
        if n < n_inst {
            let members = &insts[n];
            for &at in members {
                let key = ReadKey::Op {
                    rank: at.rank,
                    index: at.index,
                };
                reads.insert(key, observe_checked(&state, s, p, key)?);
            }
            let data = state.read_op(s, members);
            state.write_op(s, members, &data);
            steps.push(Step::Ops(members.clone()));
        } else {
            let (rank, tile) = ((n - n_inst) / tiles, (n - n_inst) % tiles);
            let key = ReadKey::Tile { rank, tile };
            reads.insert(key, observe_checked(&state, s, p, key)?);
            let vals = state.tile_values(p, rank, tile);
            for (i, r) in p.write_regions(tile).iter().enumerate() {
                state.write_tile(rank, r, vals.as_ref().map(|v| v[i].as_slice()));
            }
            steps.push(Step::Tile { rank, tile });
        }
        for &m in &succ[n] {
            indeg[m] -= 1;
            if indeg[m] == 0 {
                push_ready(m, &mut ready_ops, &mut ready_tiles);
            }
        }
    }
    if steps.len() != total {
        return Err(SimError::Cycle(
            "ops and tiles depend on each other cyclically".into(),
        ));
    }
    Ok(Reference {
        state,
        reads,
        steps,
        inputs: inputs.cloned(),
    })
}

fn observe_checked(
    state: &BufferState,
    s: &CommSchedule,
    p: &TileProgram,
    key: ReadKey,
) -> Result<Observation, SimError> {
    let (rank, regions) = read_set(s, p, key);
    let obs = state.observe(rank, &regions);
    if obs.iter().any(Option::is_none) {
        let what = regions
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        return Err(SimError::InvalidRead(format!(
            "{key} reads {what} before it is valid"
        )));
    }
    Ok(obs)
}
