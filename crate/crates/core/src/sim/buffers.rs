//! Per-rank tensor buffers with cell-granular validity and write versions.

use crate::kernel::{TileKernel, TileProgram};
use crate::region::{CellGrid, Layout, Region, TensorId, TensorSpec};
use crate::schedule::{CommSchedule, OpKind, OpRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Input values: one full-shape array per rank and tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub ranks: Vec<BTreeMap<TensorId, Vec<f64>>>,
}

impl Payload {
    /// Uniform values in `[-1, 1)`.
    pub fn random(specs: &BTreeMap<TensorId, TensorSpec>, world_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks = (0..world_size)
            .map(|_| {
                specs
                    .iter()
                    .map(|(id, spec)| {
                        let v = (0..spec.numel())
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect();
                        (id.clone(), v)
                    })
                    .collect()
            })
            .collect();
        Payload { ranks }
    }
}

/// Every tensor touched by the schedule or the kernel. Shapes must agree.
pub fn tensor_universe(
    s: &CommSchedule,
    p: &TileProgram,
) -> Result<BTreeMap<TensorId, TensorSpec>, String> {
    let mut out = s.tensors.clone();
    for spec in p.tensor_specs() {
        match out.get(&spec.tensor_id) {
            Some(have) if have.shape != spec.shape => {
                return Err(format!(
                    "tensor {} has shape {:?} in the schedule but {:?} in the kernel",
                    spec.tensor_id, have.shape, spec.shape
                ))
            }
            Some(_) => {}
            None => {
                out.insert(spec.tensor_id.clone(), spec);
            }
        }
    }
    Ok(out)
}

/// Order key of one addend of an accumulated element: source rank, then
/// the op that delivered it (`None` is the local value).
type ContribKey = (usize, Option<OpRef>);

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    valid: Vec<bool>,
    version: Vec<u32>,
    data: Option<Vec<f64>>,
    pending: BTreeMap<usize, Vec<(ContribKey, f64)>>,
}

/// Who reads: a tile on some rank, or an op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReadKey {
    Tile { rank: usize, tile: usize },
    Op { rank: usize, index: usize },
}

impl std::fmt::Display for ReadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReadKey::Tile { rank, tile } => write!(f, "tile {tile} on rank {rank}"),
            ReadKey::Op { rank, index } => write!(f, "op ({rank},{index})"),
        }
    }
}

/// What one reader observed: `None` for an invalid cell, else its version.
pub type Observation = Vec<Option<u32>>;

/// Values a started op carries to its completion.
#[derive(Debug, Clone, Default)]
pub struct OpData {
    /// Per member, the source values in the source chunk's layout order.
    src: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferState {
    pub tensors: BTreeMap<TensorId, TensorSpec>,
    grids: BTreeMap<TensorId, CellGrid>,
    ranks: Vec<BTreeMap<TensorId, Slot>>,
}

impl BufferState {
    /// Initial state: tensors the schedule moves are valid only where owned;
    /// everything else is a local input and valid everywhere.
    pub fn new(
        s: &CommSchedule,
        p: &TileProgram,
        payload: Option<&Payload>,
    ) -> Result<Self, String> {
        let tensors = tensor_universe(s, p)?;
        let mut regions: BTreeMap<&str, Vec<Region>> = BTreeMap::new();
        for owned in &s.owner_regions {
            for (id, rs) in owned {
                regions.entry(id).or_default().extend(rs.iter().cloned());
            }
        }
        for (_, op) in s.ops() {
            for c in [op.src_chunk(), op.dst_chunk()] {
                regions
                    .entry(&c.region.tensor_id)
                    .or_default()
                    .push(c.region.clone());
            }
        }
        for t in 0..p.tile_count() {
            for r in p.read_regions(t).into_iter().chain(p.write_regions(t)) {
                let id = tensors
                    .get_key_value(&r.tensor_id)
                    .map(|(k, _)| k.as_str())
                    .unwrap();
                regions.entry(id).or_default().push(r);
            }
        }
        let grids: BTreeMap<TensorId, CellGrid> = tensors
            .iter()
            .map(|(id, spec)| {
                let rs = regions.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                (id.clone(), CellGrid::new(&spec.shape, rs))
            })
            .collect();
        if let Some(pl) = payload {
            if pl.ranks.len() != s.world_size {
                return Err(format!(
                    "payload has {} ranks, schedule {}",
                    pl.ranks.len(),
                    s.world_size
                ));
            }
        }
        let mut ranks = Vec::with_capacity(s.world_size);
        for r in 0..s.world_size {
            let mut m = BTreeMap::new();
            for (id, spec) in &tensors {
                let grid = &grids[id];
                let moved = s.tensors.contains_key(id);
                let mut valid = vec![!moved; grid.cell_count()];
                for region in s.owned(r, id) {
                    for c in grid.cells(region) {
                        valid[c] = true;
                    }
                }
                let data = match payload {
                    Some(pl) => {
                        let v = pl.ranks[r]
                            .get(id)
                            .ok_or_else(|| format!("payload lacks tensor {id}"))?;
                        if v.len() != spec.numel() {
                            return Err(format!(
                                "payload for {id} has {} values, need {}",
                                v.len(),
                                spec.numel()
                            ));
                        }
                        Some(v.clone())
                    }
                    None => None,
                };
                m.insert(
                    id.clone(),
                    Slot {
                        version: vec![0; valid.len()],
                        valid,
                        data,
                        pending: BTreeMap::new(),
                    },
                );
            }
            ranks.push(m);
        }
        Ok(BufferState {
            tensors,
            grids,
            ranks,
        })
    }

    pub fn world_size(&self) -> usize {
        self.ranks.len()
    }

    pub fn has_data(&self) -> bool {
        self.ranks
            .first()
            .and_then(|m| m.values().next())
            .is_some_and(|s| s.data.is_some())
    }

    /// Validity and version of every cell of `regions`, in order.
    pub fn observe(&self, rank: usize, regions: &[Region]) -> Observation {
        let mut out = Vec::new();
        for r in regions {
            let slot = &self.ranks[rank][&r.tensor_id];
            for c in self.grids[&r.tensor_id].cells(r) {
                out.push(slot.valid[c].then_some(slot.version[c]));
            }
        }
        out
    }

    fn bump(&mut self, rank: usize, r: &Region) {
        let cells = self.grids[&r.tensor_id].cells(r);
        let slot = self.ranks[rank].get_mut(&r.tensor_id).unwrap();
        for c in cells {
            slot.valid[c] = true;
            slot.version[c] += 1;
        }
    }

    fn fold(slot: &Slot, rank: usize, e: usize) -> f64 {
        let own = slot.data.as_ref().unwrap()[e];
        match slot.pending.get(&e) {
            None => own,
            Some(contribs) => {
                let mut all: Vec<(ContribKey, f64)> = Vec::with_capacity(contribs.len() + 1);
                all.push(((rank, None), own));
                all.extend(contribs.iter().copied());
                all.sort_by_key(|a| a.0);
                all.iter().skip(1).fold(all[0].1, |acc, x| acc + x.1)
            }
        }
    }

    /// Current values of a region (accumulations folded), in `layout` order.
    pub fn values(&self, rank: usize, r: &Region, layout: Layout) -> Option<Vec<f64>> {
        let slot = &self.ranks[rank][&r.tensor_id];
        slot.data.as_ref()?;
        let shape = &self.tensors[&r.tensor_id].shape;
        Some(
            r.linear_indices(shape, layout)
                .into_iter()
                .map(|e| Self::fold(slot, rank, e))
                .collect(),
        )
    }

    fn store(
        &mut self,
        rank: usize,
        r: &Region,
        layout: Layout,
        vals: Option<&[f64]>,
        keep_pending: bool,
    ) {
        self.bump(rank, r);
        let shape = self.tensors[&r.tensor_id].shape.clone();
        let slot = self.ranks[rank].get_mut(&r.tensor_id).unwrap();
        let (Some(data), Some(vals)) = (slot.data.as_mut(), vals) else {
            return;
        };
        for (e, v) in r.linear_indices(&shape, layout).into_iter().zip(vals) {
            data[e] = *v;
            if !keep_pending {
                slot.pending.remove(&e);
            }
        }
    }

    /// Tile output: replaces the local value but keeps accumulations that
    /// other ranks have already delivered into the region.
    pub fn write_tile(&mut self, rank: usize, r: &Region, vals: Option<&[f64]>) {
        self.store(rank, r, Layout::RowMajor, vals, true);
    }

    /// Overwrite by a transfer: discards pending accumulations.
    pub fn overwrite(&mut self, rank: usize, r: &Region, layout: Layout, vals: Option<&[f64]>) {
        self.store(rank, r, layout, vals, false);
    }

    pub fn accumulate(
        &mut self,
        rank: usize,
        r: &Region,
        layout: Layout,
        key: (usize, OpRef),
        vals: Option<&[f64]>,
    ) {
        self.bump(rank, r);
        let shape = self.tensors[&r.tensor_id].shape.clone();
        let slot = self.ranks[rank].get_mut(&r.tensor_id).unwrap();
        let Some(vals) = vals.filter(|_| slot.data.is_some()) else {
            return;
        };
        for (e, v) in r.linear_indices(&shape, layout).into_iter().zip(vals) {
            slot.pending
                .entry(e)
                .or_default()
                .push(((key.0, Some(key.1)), *v));
        }
    }

    /// Output values of one tile computed from the current buffers.
    pub fn tile_values(&self, p: &TileProgram, rank: usize, tile: usize) -> Option<Vec<Vec<f64>>> {
        if !self.has_data() {
            return None;
        }
        let reads = p.read_regions(tile);
        let writes = p.write_regions(tile);
        let out = match p.kernel {
            TileKernel::Gemm => {
                let a = self.values(rank, &reads[0], Layout::RowMajor)?;
                let b = self.values(rank, &reads[1], Layout::RowMajor)?;
                let (bm, k) = (reads[0].sizes[0], reads[0].sizes[1]);
                let bn = reads[1].sizes[0];
                let mut c = Vec::with_capacity(bm * bn);
                for i in 0..bm {
                    for j in 0..bn {
                        let mut acc = 0.0;
                        for kk in 0..k {
                            acc += a[i * k + kk] * b[j * k + kk];
                        }
                        c.push(acc);
                    }
                }
                vec![c]
            }
            TileKernel::Sum => {
                let mut total = 0.0;
                for r in &reads {
                    for v in self.values(rank, r, Layout::RowMajor)? {
                        total += v;
                    }
                }
                writes.iter().map(|w| vec![total; w.numel()]).collect()
            }
        };
        Some(out)
    }

    /// Source values of every member of an op instance.
    pub fn read_op(&self, s: &CommSchedule, members: &[OpRef]) -> OpData {
        let src = members
            .iter()
            .map(|&at| {
                let (rank, chunk) = match s.transfer(at) {
                    Some(t) => (t.src_rank, t.src),
                    None => (at.rank, s.op(at).src_chunk()),
                };
                self.values(rank, &chunk.region, chunk.layout)
            })
            .collect();
        OpData { src }
    }

    /// Apply a completed op instance.
    pub fn write_op(&mut self, s: &CommSchedule, members: &[OpRef], data: &OpData) {
        if let Some(t) = s.transfer(members[0]) {
            let vals = data.src.first().and_then(|v| v.as_deref());
            if t.accumulate {
                self.accumulate(
                    t.dst_rank,
                    &t.dst.region,
                    t.dst.layout,
                    (t.src_rank, members[0]),
                    vals,
                );
            } else {
                self.overwrite(t.dst_rank, &t.dst.region, t.dst.layout, vals);
            }
            return;
        }
        let OpKind::Collective(first) = &s.op(members[0]).kind else {
            unreachable!("instance members are collectives");
        };
        let kind = first.collective_type;
        let tensor = first.dst_chunk.region.tensor_id.clone();
        let shape = self.tensors[&tensor].shape.clone();
        let numel: usize = shape.iter().product();
        // dense view of each member's source, ascending rank order
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by_key(|&i| members[i].rank);
        let dense: Option<Vec<Vec<Option<f64>>>> = order
            .iter()
            .map(|&i| {
                let vals = data.src.get(i)?.as_ref()?;
                let src = s.op(members[i]).src_chunk();
                let mut d = vec![None; numel];
                for (e, v) in src
                    .region
                    .linear_indices(&shape, src.layout)
                    .into_iter()
                    .zip(vals)
                {
                    d[e] = Some(*v);
                }
                Some(d)
            })
            .collect();
        for &at in members {
            let dst = s.op(at).dst_chunk().clone();
            let vals: Option<Vec<f64>> = dense.as_ref().map(|dense| {
                dst.region
                    .linear_indices(&shape, dst.layout)
                    .into_iter()
                    .map(|e| {
                        let mut it = dense.iter().filter_map(|d| d[e]);
                        if kind.reduces() {
                            let first = it.next().unwrap_or(0.0);
                            it.fold(first, |a, b| a + b)
                        } else {
                            it.next().unwrap_or(0.0)
                        }
                    })
                    .collect()
            });
            self.overwrite(at.rank, &dst.region, dst.layout, vals.as_deref());
        }
    }

    /// Folded contents of every rank and tensor.
    pub fn snapshot(&self) -> Option<Vec<BTreeMap<TensorId, Vec<f64>>>> {
        if !self.has_data() {
            return None;
        }
        Some(
            self.ranks
                .iter()
                .enumerate()
                .map(|(rank, m)| {
                    m.iter()
                        .map(|(id, slot)| {
                            let n = slot.data.as_ref().unwrap().len();
                            (
                                id.clone(),
                                (0..n).map(|e| Self::fold(slot, rank, e)).collect(),
                            )
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Bitwise equality of folded contents (both sides need data).
    pub fn same_data(&self, other: &BufferState) -> bool {
        match (self.snapshot(), other.snapshot()) {
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter().zip(&b).all(|(x, y)| {
                        x.len() == y.len()
                            && x.iter().zip(y).all(|((i, u), (j, v))| {
                                i == j
                                    && u.len() == v.len()
                                    && u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits())
                            })
                    })
            }
            _ => false,
        }
    }

    /// Folded contents of one tensor on one rank.
    pub fn tensor(&self, rank: usize, id: &str) -> Option<Vec<f64>> {
        let spec = self.tensors.get(id)?;
        self.values(rank, &spec.full_region(), Layout::RowMajor)
    }
}

/// Regions one reader reads, with the rank they live on.
pub fn read_set(s: &CommSchedule, p: &TileProgram, key: ReadKey) -> (usize, Vec<Region>) {
    match key {
        ReadKey::Tile { rank, tile } => (rank, p.read_regions(tile)),
        ReadKey::Op { rank, index } => {
            let at = OpRef::new(rank, index);
            match s.transfer(at) {
                Some(t) => (t.src_rank, vec![t.src.region.clone()]),
                None => (rank, vec![s.op(at).src_chunk().region.clone()]),
            }
        }
    }
}
