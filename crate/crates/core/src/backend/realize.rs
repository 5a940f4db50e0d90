//! Lowering a planned schedule onto backend streams.

use super::{Assignment, BackendKind, BackendProfile};
use crate::kernel::TileProgram;
use crate::planner::{Guard, Location, Planned, SyncKind};
use crate::schedule::{global_order, CommSchedule, OpRef};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// One entry of a stream. Streams execute their items in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "item", rename_all = "snake_case")]
pub enum Item {
    Tile {
        tile: usize,
    },
    /// Block the stream until the signal has fired.
    Wait {
        signal: usize,
    },
    /// Marks where a signal is raised; it fires when its guard completes.
    Signal {
        signal: usize,
    },
    /// Issue a communication op. In the compute stream this is a co-located
    /// transfer that borrows SMs.
    Op {
        rank: usize,
        index: usize,
    },
    /// Kernel launch overhead.
    Launch,
    /// Wait for every in-flight tile and co-located transfer on the rank.
    Barrier,
}

impl Item {
    pub fn op(at: OpRef) -> Self {
        Item::Op {
            rank: at.rank,
            index: at.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStream {
    pub backend: BackendKind,
    /// SMs driving this stream (zero for the copy engine).
    pub sms: usize,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProgram {
    pub compute_sms: usize,
    pub comm_sms: usize,
    pub compute: Vec<Item>,
    pub comm: Vec<CommStream>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalDef {
    pub id: usize,
    pub guard: Guard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmAlloc {
    pub compute: usize,
    pub comm: usize,
}

impl SmAlloc {
    /// Reserve `comm` SMs out of `device` when the assignment needs them, none otherwise.
    pub fn for_assignment(device: usize, comm: usize, a: &Assignment) -> Self {
        let comm = if a.uses_specialized() { comm } else { 0 };
        SmAlloc {
            compute: device.saturating_sub(comm),
            comm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// One persistent kernel following the swizzled order.
    #[default]
    Fused,
    /// One kernel per tile group, each launched after its chunks arrive and
    /// ended by a device-wide barrier.
    Partitioned,
}

/// Everything the simulator needs: the schedule, the kernel and each
/// rank's streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProgram {
    pub schedule: CommSchedule,
    pub kernel: TileProgram,
    pub profile: BackendProfile,
    pub assignment: Assignment,
    pub mode: KernelMode,
    pub signals: Vec<SignalDef>,
    pub ranks: Vec<RankProgram>,
}

#[derive(Debug, thiserror::Error)]
pub enum RealizeError {
    #[error("infeasible assignment: {}", .0.iter().map(|(at, r)| format!("op {at}: {r}")).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<(OpRef, String)>),
    #[error("sm budget: {0}")]
    SmBudget(String),
    #[error("unrealizable: {0}")]
    Unrealizable(String),
}

impl DeviceProgram {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("device program serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Every wait as `(rank, stream, position)`; stream 0 is compute, `k+1` is comm stream `k`.
    pub fn wait_sites(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (r, rp) in self.ranks.iter().enumerate() {
            let streams = std::iter::once(&rp.compute).chain(rp.comm.iter().map(|c| &c.items));
            for (si, items) in streams.enumerate() {
                for (i, it) in items.iter().enumerate() {
                    if matches!(it, Item::Wait { .. }) {
                        out.push((r, si, i));
                    }
                }
            }
        }
        out
    }

    /// Copy of the program with one wait removed (mutation testing).
    pub fn without_wait(&self, site: (usize, usize, usize)) -> DeviceProgram {
        let mut out = self.clone();
        let (r, si, i) = site;
        let items = if si == 0 {
            &mut out.ranks[r].compute
        } else {
            &mut out.ranks[r].comm[si - 1].items
        };
        assert!(matches!(items[i], Item::Wait { .. }), "not a wait site");
        items.remove(i);
        out
    }

    pub fn wait_count(&self) -> usize {
        self.wait_sites().len()
    }
}

struct Signals {
    defs: Vec<SignalDef>,
    by_guard: BTreeMap<Guard, usize>,
}

impl Signals {
    fn get(&mut self, guard: Guard) -> usize {
        if let Some(&id) = self.by_guard.get(&guard) {
            return id;
        }
        let id = self.defs.len();
        self.defs.push(SignalDef {
            id,
            guard: guard.clone(),
        });
        self.by_guard.insert(guard, id);
        id
    }
}

/// Ops known complete once a stream has observed each op: the op itself
/// plus everything that must finish before it under stream FIFO order and
/// explicit dependencies.
struct HappensBefore {
    before: BTreeMap<OpRef, BTreeSet<OpRef>>,
}

impl HappensBefore {
    fn new(s: &CommSchedule, stream_of: &BTreeMap<OpRef, Option<(usize, BackendKind)>>) -> Self {
        let order = global_order(s).expect("validated schedule");
        let mut prev_in_stream: BTreeMap<OpRef, OpRef> = BTreeMap::new();
        let mut last: BTreeMap<(usize, BackendKind), OpRef> = BTreeMap::new();
        for (at, _) in s.ops() {
            if let Some(Some(key)) = stream_of.get(&at) {
                if let Some(&p) = last.get(key) {
                    prev_in_stream.insert(at, p);
                }
                last.insert(*key, at);
            }
        }
        let mut peers: BTreeMap<OpRef, Vec<OpRef>> = BTreeMap::new();
        for inst in s.collective_instances() {
            for &a in &inst {
                peers.insert(a, inst.clone());
            }
        }
        let mut before: BTreeMap<OpRef, BTreeSet<OpRef>> = BTreeMap::new();
        for at in order {
            let mut set = BTreeSet::new();
            let mut preds: Vec<OpRef> = Vec::new();
            let members = peers.get(&at).cloned().unwrap_or_else(|| vec![at]);
            for m in &members {
                preds.extend(s.op(*m).deps.iter().copied());
                preds.extend(prev_in_stream.get(m).copied());
            }
            for p in preds {
                if let Some(b) = before.get(&p) {
                    set.extend(b.iter().copied());
                }
                set.insert(p);
            }
            for m in members {
                if let Some(b) = before.get(&m) {
                    set.extend(b.iter().copied());
                }
            }
            before.insert(at, set);
        }
        HappensBefore { before }
    }

    fn observe(&self, covered: &mut BTreeSet<OpRef>, at: OpRef) {
        covered.insert(at);
        if let Some(b) = self.before.get(&at) {
            covered.extend(b.iter().copied());
        }
    }
}

/// Drops waits already implied by earlier waits or completed ops on the
/// same stream.
struct Coverage<'a> {
    hb: &'a HappensBefore,
    ops: BTreeSet<OpRef>,
    tiles: BTreeSet<usize>,
}

impl<'a> Coverage<'a> {
    fn new(hb: &'a HappensBefore) -> Self {
        Coverage {
            hb,
            ops: BTreeSet::new(),
            tiles: BTreeSet::new(),
        }
    }

    /// Push a wait on `guard` unless it is redundant.
    fn wait(&mut self, items: &mut Vec<Item>, signals: &mut Signals, guard: Guard) {
        let needed = match &guard {
            Guard::Op { op } => !self.ops.contains(op),
            Guard::Tiles { tiles, .. } => !tiles.iter().all(|t| self.tiles.contains(t)),
        };
        if !needed {
            return;
        }
        match &guard {
            Guard::Op { op } => self.hb.observe(&mut self.ops, *op),
            Guard::Tiles { tiles, .. } => self.tiles.extend(tiles.iter().copied()),
        }
        items.push(Item::Wait {
            signal: signals.get(guard),
        });
    }

    /// Wait on a group of guards issued together, skipping op guards that
    /// another guard in the group already implies.
    fn wait_all(&mut self, items: &mut Vec<Item>, signals: &mut Signals, group: Vec<Guard>) {
        let ops: Vec<OpRef> = group
            .iter()
            .filter_map(|g| match g {
                Guard::Op { op } => Some(*op),
                _ => None,
            })
            .collect();
        let implied = |op: &OpRef| {
            ops.iter()
                .any(|o| o != op && self.hb.before.get(o).is_some_and(|b| b.contains(op)))
        };
        for g in group {
            if matches!(&g, Guard::Op { op } if implied(op)) {
                continue;
            }
            self.wait(items, signals, g);
        }
    }
}

fn issuing_stream(a: &Assignment, at: OpRef) -> Option<(usize, BackendKind)> {
    let b = a.get(at);
    (!b.is_colocated()).then_some((at.rank, b))
}

/// Lower a planned schedule to per-rank streams.
///
/// Copy-engine and specialized-SM ops go to one FIFO stream per backend;
/// co-located ops are inlined into the compute stream just before their
/// first consumer (or after their last producer). Every dependence edge is
/// carried by a wait on a signal.
pub fn realize(
    planned: &Planned,
    assignment: &Assignment,
    sm: SmAlloc,
    profile: &BackendProfile,
    mode: KernelMode,
) -> Result<DeviceProgram, RealizeError> {
    let s = &planned.schedule;
    let illegal = assignment.illegal_ops(s, profile);
    if !illegal.is_empty() {
        return Err(RealizeError::Infeasible(illegal));
    }
    let specialized = assignment.uses_specialized();
    if specialized && sm.comm == 0 {
        return Err(RealizeError::SmBudget(
            "specialized backends need at least one comm SM".into(),
        ));
    }
    if !specialized && sm.comm > 0 {
        return Err(RealizeError::SmBudget(
            "comm SMs reserved without a specialized backend".into(),
        ));
    }
    if sm.compute == 0 {
        return Err(RealizeError::SmBudget("no SMs left for compute".into()));
    }
    let uses_colocated = assignment.iter().any(|(_, b)| b.is_colocated());
    if uses_colocated && profile.colocated_sms > sm.compute {
        return Err(RealizeError::SmBudget(format!(
            "co-located transfers borrow {} SMs but only {} compute SMs exist",
            profile.colocated_sms, sm.compute
        )));
    }
    if mode == KernelMode::Partitioned && uses_colocated {
        return Err(RealizeError::Unrealizable(
            "partitioned kernels cannot host co-located transfers".into(),
        ));
    }

    let stream_of: BTreeMap<OpRef, Option<(usize, BackendKind)>> = s
        .ops()
        .map(|(at, _)| (at, issuing_stream(assignment, at)))
        .collect();
    let hb = HappensBefore::new(s, &stream_of);
    let mut signals = Signals {
        defs: Vec::new(),
        by_guard: BTreeMap::new(),
    };
    let mut ranks = Vec::with_capacity(s.world_size);

    for (rank, rp) in planned.ranks.iter().enumerate() {
        let order = &rp.swizzle.order;
        let n = order.len();
        // sync points of this rank, keyed by tile position
        let mut waits_before: BTreeMap<usize, Vec<Guard>> = BTreeMap::new();
        let mut signals_after: BTreeMap<usize, Vec<Guard>> = BTreeMap::new();
        let mut producer_guard: BTreeMap<OpRef, Guard> = BTreeMap::new();
        for pt in &rp.syncs.points {
            match (pt.kind, pt.location) {
                (SyncKind::Wait, Location::BeforeTile { pos, .. }) => {
                    waits_before.entry(pos).or_default().push(pt.guard.clone())
                }
                (SyncKind::Signal, Location::AfterTile { pos, .. }) => {
                    signals_after.entry(pos).or_default().push(pt.guard.clone())
                }
                (SyncKind::Wait, Location::BeforeOp { op }) => {
                    producer_guard.insert(op, pt.guard.clone());
                }
                _ => {}
            }
        }
        let mut pos_of = vec![0; n];
        for (i, &t) in order.iter().enumerate() {
            pos_of[t] = i;
        }

        // co-located ops issued by this rank, placed by tile position
        let mut inline_site: BTreeMap<OpRef, usize> = BTreeMap::new();
        let (cons_map, prod_map) = rp.graph.tile_maps();
        let none = Vec::new();
        for (i, _) in s.plans[rank].iter().enumerate() {
            let at = OpRef::new(rank, i);
            if !assignment.get(at).is_colocated() {
                continue;
            }
            let consumers = cons_map.get(&at).unwrap_or(&none);
            let producers = prod_map.get(&at).unwrap_or(&none);
            let first_use = consumers.iter().map(|&t| pos_of[t]).min();
            let after_prod = producers.iter().map(|&t| pos_of[t] + 1).max();
            // without a local consumer, issue as early as adds no blocking:
            // where the stream already waits for a dep's data, else at once
            let dep_site = s
                .op(at)
                .deps
                .iter()
                .filter_map(|d| {
                    let used = cons_map
                        .get(d)
                        .and_then(|ts| ts.iter().map(|&t| pos_of[t]).min());
                    inline_site.get(d).copied().or(used)
                })
                .max()
                .unwrap_or(0);
            let mut site = first_use.unwrap_or(after_prod.unwrap_or(0).max(dep_site));
            for d in &s.op(at).deps {
                if let Some(&ds) = inline_site.get(d) {
                    site = site.max(ds);
                }
            }
            if let (Some(u), Some(p)) = (first_use, after_prod) {
                if p > u {
                    return Err(RealizeError::Unrealizable(format!(
                        "op {at} consumes tiles that also read its result"
                    )));
                }
            }
            if let Some(u) = first_use {
                if site > u {
                    return Err(RealizeError::Unrealizable(format!(
                        "op {at} must be issued after its first consumer"
                    )));
                }
            }
            inline_site.insert(at, site);
        }
        let mut inline_at: BTreeMap<usize, Vec<OpRef>> = BTreeMap::new();
        for (&at, &site) in &inline_site {
            inline_at.entry(site).or_default().push(at);
        }

        let op_guards = |at: OpRef| -> Vec<Guard> {
            let deps = s.op(at).deps.iter().map(|&d| Guard::Op { op: d });
            deps.chain(producer_guard.get(&at).cloned()).collect()
        };
        let mut compute = Vec::new();
        let mut cov = Coverage::new(&hb);
        let emit_inline =
            |compute: &mut Vec<Item>, cov: &mut Coverage, signals: &mut Signals, at: OpRef| {
                cov.wait_all(compute, signals, op_guards(at));
                compute.push(Item::op(at));
                compute.push(Item::Signal {
                    signal: signals.get(Guard::Op { op: at }),
                });
            };
        match mode {
            KernelMode::Fused => {
                for p in 0..=n {
                    for &at in inline_at.get(&p).map(Vec::as_slice).unwrap_or(&[]) {
                        emit_inline(&mut compute, &mut cov, &mut signals, at);
                    }
                    if p == n {
                        break;
                    }
                    let group = waits_before.get(&p).cloned().unwrap_or_default();
                    cov.wait_all(&mut compute, &mut signals, group);
                    compute.push(Item::Tile { tile: order[p] });
                    for g in signals_after.get(&p).into_iter().flatten() {
                        compute.push(Item::Signal {
                            signal: signals.get(g.clone()),
                        });
                    }
                }
            }
            KernelMode::Partitioned => {
                let starts = &rp.swizzle.group_starts;
                for (gi, &start) in starts.iter().enumerate() {
                    let end = starts.get(gi + 1).copied().unwrap_or(n);
                    if start == end {
                        continue;
                    }
                    let group = (start..end)
                        .flat_map(|p| waits_before.get(&p).cloned().unwrap_or_default())
                        .collect();
                    cov.wait_all(&mut compute, &mut signals, group);
                    compute.push(Item::Launch);
                    for p in start..end {
                        compute.push(Item::Tile { tile: order[p] });
                    }
                    compute.push(Item::Barrier);
                    for p in start..end {
                        for g in signals_after.get(&p).into_iter().flatten() {
                            compute.push(Item::Signal {
                                signal: signals.get(g.clone()),
                            });
                        }
                    }
                }
            }
        }

        // one FIFO stream per non-colocated backend, ops in plan order
        let mut streams: BTreeMap<BackendKind, Vec<Item>> = BTreeMap::new();
        let mut covs: BTreeMap<BackendKind, Coverage> = BTreeMap::new();
        for (i, _) in s.plans[rank].iter().enumerate() {
            let at = OpRef::new(rank, i);
            let b = assignment.get(at);
            if b.is_colocated() {
                continue;
            }
            let items = streams.entry(b).or_default();
            let cov = covs.entry(b).or_insert_with(|| Coverage::new(&hb));
            cov.wait_all(items, &mut signals, op_guards(at));
            items.push(Item::op(at));
            items.push(Item::Signal {
                signal: signals.get(Guard::Op { op: at }),
            });
            hb.observe(&mut cov.ops, at);
        }
        let n_spec = streams.keys().filter(|b| b.is_specialized()).count();
        let comm = streams
            .into_iter()
            .map(|(backend, items)| CommStream {
                backend,
                sms: if backend.is_specialized() {
                    sm.comm / n_spec.max(1)
                } else {
                    0
                },
                items,
            })
            .collect();
        ranks.push(RankProgram {
            compute_sms: sm.compute,
            comm_sms: sm.comm,
            compute,
            comm,
        });
    }
    if let Some(bad) = ranks
        .iter()
        .flat_map(|r| &r.comm)
        .find(|c| c.backend.is_specialized() && c.sms == 0)
    {
        return Err(RealizeError::SmBudget(format!(
            "{} comm SMs cannot drive the {} stream",
            sm.comm, bad.backend
        )));
    }
    Ok(DeviceProgram {
        schedule: s.clone(),
        kernel: planned.kernel.clone(),
        profile: profile.clone(),
        assignment: assignment.clone(),
        mode,
        signals: signals.defs,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{plan, IntraPolicy};
    use crate::region::TensorSpec;
    use crate::templates::{
        allgather_1d_swizzle, partition_allreduce, ring_allgather, TemplateParams,
    };

    fn ag_planned(w: usize) -> Planned {
        let p = TileProgram::gemm(128 * w * 2, 256, 64, 128, 128, 64);
        let s = allgather_1d_swizzle(&TemplateParams::new(
            w,
            TensorSpec::new("A", vec![256 * w, 64], 2),
            0,
        ))
        .unwrap();
        plan(&s, &p, IntraPolicy::RowMajor).unwrap()
    }

    #[test]
    fn copy_engine_has_one_stream_and_all_sms() {
        let pl = ag_planned(4);
        let a = Assignment::uniform(&pl.schedule, BackendKind::CopyEngine);
        let sm = SmAlloc::for_assignment(132, 16, &a);
        let dp = realize(&pl, &a, sm, &BackendProfile::h100(), KernelMode::Fused).unwrap();
        for r in &dp.ranks {
            assert_eq!(r.comm.len(), 1);
            assert_eq!(r.compute_sms, 132);
            assert_eq!(r.comm_sms, 0);
            let tiles = r
                .compute
                .iter()
                .filter(|i| matches!(i, Item::Tile { .. }))
                .count();
            assert_eq!(tiles, pl.kernel.tile_count());
        }
    }

    #[test]
    fn colocated_has_no_comm_streams() {
        let pl = ag_planned(4);
        let a = Assignment::uniform(&pl.schedule, BackendKind::LdstColocated);
        let dp = realize(
            &pl,
            &a,
            SmAlloc::for_assignment(132, 16, &a),
            &BackendProfile::h100(),
            KernelMode::Fused,
        )
        .unwrap();
        for (r, rp) in dp.ranks.iter().enumerate() {
            assert!(rp.comm.is_empty());
            let ops = rp
                .compute
                .iter()
                .filter(|i| matches!(i, Item::Op { .. }))
                .count();
            assert_eq!(ops, pl.schedule.plans[r].len());
        }
    }

    #[test]
    fn mixed_backends_split_streams() {
        let p = TileProgram::gemm(512, 256, 64, 128, 128, 64);
        let s = partition_allreduce(&TemplateParams::new(
            4,
            TensorSpec::new("C", vec![512, 256], 2),
            0,
        ))
        .unwrap();
        let pl = plan(&s, &p, IntraPolicy::RowMajor).unwrap();
        let a = Assignment::by_class(&s, BackendKind::CopyEngine, BackendKind::LdstSpecialized);
        let sm = SmAlloc::for_assignment(132, 16, &a);
        let dp = realize(&pl, &a, sm, &BackendProfile::h100(), KernelMode::Fused).unwrap();
        for r in &dp.ranks {
            assert_eq!(r.comm.len(), 2);
            assert_eq!(r.compute_sms, 116);
            let ldst = r
                .comm
                .iter()
                .find(|c| c.backend == BackendKind::LdstSpecialized)
                .unwrap();
            assert_eq!(ldst.sms, 16);
        }
    }

    #[test]
    fn infeasible_assignment_lists_ops() {
        let p = TileProgram::gemm(512, 256, 64, 128, 128, 64);
        let s = partition_allreduce(&TemplateParams::new(
            2,
            TensorSpec::new("C", vec![512, 256], 2),
            0,
        ))
        .unwrap();
        let pl = plan(&s, &p, IntraPolicy::RowMajor).unwrap();
        let a = Assignment::uniform(&s, BackendKind::CopyEngine);
        let e = realize(
            &pl,
            &a,
            SmAlloc {
                compute: 132,
                comm: 0,
            },
            &BackendProfile::h100(),
            KernelMode::Fused,
        )
        .unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("op (0,0)") && msg.contains("op (1,0)"),
            "{msg}"
        );
    }

    #[test]
    fn every_dependence_edge_has_a_wait() {
        let p = TileProgram::gemm(1024, 256, 64, 128, 128, 64);
        let s = ring_allgather(&TemplateParams::new(
            4,
            TensorSpec::new("A", vec![1024, 64], 2),
            0,
        ))
        .unwrap();
        let pl = plan(&s, &p, IntraPolicy::RowMajor).unwrap();
        let a = Assignment::uniform(&s, BackendKind::CopyEngine);
        let dp = realize(
            &pl,
            &a,
            SmAlloc {
                compute: 132,
                comm: 0,
            },
            &BackendProfile::h100(),
            KernelMode::Fused,
        )
        .unwrap();
        // each rank receives three shards consumed by distinct tile groups
        for rp in &dp.ranks {
            let waits = rp
                .compute
                .iter()
                .filter(|i| matches!(i, Item::Wait { .. }))
                .count();
            assert_eq!(waits, 3);
            // ring deps live in the comm stream
            let comm_waits = rp.comm[0]
                .items
                .iter()
                .filter(|i| matches!(i, Item::Wait { .. }))
                .count();
            assert_eq!(comm_waits, 2);
        }
        let json = dp.to_json();
        assert_eq!(DeviceProgram::from_json(&json).unwrap(), dp);
    }

    #[test]
    fn partitioned_mode_layout() {
        let pl = ag_planned(2);
        let a = Assignment::uniform(&pl.schedule, BackendKind::CopyEngine);
        let dp = realize(
            &pl,
            &a,
            SmAlloc {
                compute: 132,
                comm: 0,
            },
            &BackendProfile::h100(),
            KernelMode::Partitioned,
        )
        .unwrap();
        let c = &dp.ranks[0].compute;
        assert_eq!(c.iter().filter(|i| **i == Item::Launch).count(), 2);
        assert_eq!(c.iter().filter(|i| **i == Item::Barrier).count(), 2);
    }
}
