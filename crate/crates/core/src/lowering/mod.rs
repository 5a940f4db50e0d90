//! Frontends from partition-style and loop-style distributed IRs to
//! communication schedules.

mod affine;
mod loops;

pub use affine::{Expr, ExprError};
pub use loops::{
    loop_ir_steps, lower_loop_ir, CommIntent, IntentKind, LoopIR, LoopNode, RegionExpr,
};

use crate::region::{Chunk, Region, TensorId, TensorSpec};
use crate::schedule::{CollectiveKind, CommOp, CommSchedule, Direction, OpKind, OpRef};
use crate::templates::{
    allgather_1d_swizzle, partition_allreduce, reduce_scatter, TemplateError, TemplateParams,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshAxis {
    pub name: String,
    pub size: usize,
}

/// Logical device mesh; ranks are numbered row-major over the axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    pub axes: Vec<MeshAxis>,
}

impl Mesh {
    pub fn line(name: &str, size: usize) -> Self {
        Mesh {
            axes: vec![MeshAxis {
                name: name.into(),
                size,
            }],
        }
    }

    pub fn world_size(&self) -> usize {
        self.axes.iter().map(|a| a.size).product()
    }

    pub fn axis(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    /// Rank sets that vary only along `axis`, each ordered by that coordinate.
    pub fn groups(&self, axis: usize) -> Vec<Vec<usize>> {
        let stride: usize = self.axes[axis + 1..].iter().map(|a| a.size).product();
        let size = self.axes[axis].size;
        let mut out = Vec::new();
        for r in 0..self.world_size() {
            if (r / stride).is_multiple_of(size) {
                out.push((0..size).map(|i| r + i * stride).collect());
            }
        }
        out
    }
}

/// How a tensor is laid out across one mesh axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    Replicated,
    /// Tensor axis `axis` (a logical axis name) split across `mesh_axis`.
    Sharded {
        axis: String,
        mesh_axis: String,
    },
    /// Every rank of `mesh_axis` holds a partial sum of the full tensor.
    PartialSum {
        mesh_axis: String,
    },
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Replicated => write!(f, "replicated"),
            Placement::Sharded { axis, mesh_axis } => write!(f, "sharded({axis} over {mesh_axis})"),
            Placement::PartialSum { mesh_axis } => write!(f, "partial_sum({mesh_axis})"),
        }
    }
}

/// Tensors with a produced placement and the placement their consumer needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIR {
    pub mesh: Mesh,
    pub tensors: Vec<TensorSpec>,
    /// Logical axis names per tensor.
    pub axis_info: BTreeMap<TensorId, Vec<String>>,
    pub placement: BTreeMap<TensorId, Placement>,
    pub required: BTreeMap<TensorId, Placement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Push,
    Pull,
    LocalCopy,
    Collective(CollectiveKind),
}

/// One communication step before op numbering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub kind: StepKind,
    pub region: Region,
    /// Issuing rank of a point-to-point step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    /// Members of a collective step, in shard order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<usize>,
    /// Tensor axis a collective shards along.
    #[serde(default)]
    pub axis: usize,
    #[serde(default)]
    pub accumulate: bool,
    /// Indices of earlier steps this one waits for.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deps: Vec<usize>,
}

impl Step {
    fn collective(kind: CollectiveKind, region: Region, ranks: Vec<usize>, axis: usize) -> Self {
        Step {
            kind: StepKind::Collective(kind),
            region,
            rank: None,
            peer: None,
            ranks,
            axis,
            accumulate: false,
            deps: Vec::new(),
        }
    }
}

/// Steps plus the tensors and initial ownership they act on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepList {
    pub world_size: usize,
    pub tensors: Vec<TensorSpec>,
    pub owners: Vec<BTreeMap<TensorId, Vec<Region>>>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoweringPath {
    Direct,
    Template,
    Synth,
}

impl fmt::Display for LoweringPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoweringPath::Direct => "direct",
            LoweringPath::Template => "template",
            LoweringPath::Synth => "synth",
        })
    }
}

impl FromStr for LoweringPath {
    type Err = LoweringError;
    fn from_str(s: &str) -> Result<Self, LoweringError> {
        match s {
            "direct" => Ok(LoweringPath::Direct),
            "template" => Ok(LoweringPath::Template),
            "synth" => Ok(LoweringPath::Synth),
            _ => Err(LoweringError::Ir(format!(
                "unknown path `{s}` (direct, template, synth)"
            ))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoweringError {
    #[error("malformed IR: {0}")]
    Ir(String),
    #[error("no lowering rule for {tensor}: {from} -> {to}")]
    NoRule {
        tensor: TensorId,
        from: Placement,
        to: Placement,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("loop bound `{0}` is not static")]
    DynamicBound(String),
    #[error("{0} lowering is unimplemented")]
    Unimplemented(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("IR json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PartitionIR {
    pub fn from_json(text: &str) -> Result<Self, LoweringError> {
        Ok(serde_json::from_str(text)?)
    }

    fn spec(&self, id: &str) -> Result<&TensorSpec, LoweringError> {
        self.tensors
            .iter()
            .find(|t| t.tensor_id == id)
            .ok_or_else(|| LoweringError::Ir(format!("unknown tensor {id}")))
    }

    pub fn check(&self) -> Result<(), LoweringError> {
        if self.mesh.axes.is_empty() || self.mesh.axes.iter().any(|a| a.size == 0) {
            return Err(LoweringError::Ir(
                "mesh needs at least one non-empty axis".into(),
            ));
        }
        for t in &self.tensors {
            t.check().map_err(LoweringError::Ir)?;
            let names = self
                .axis_info
                .get(&t.tensor_id)
                .ok_or_else(|| LoweringError::Ir(format!("no axis_info for {}", t.tensor_id)))?;
            if names.len() != t.shape.len() {
                return Err(LoweringError::Ir(format!(
                    "{} has {} axes but {} axis names",
                    t.tensor_id,
                    t.shape.len(),
                    names.len()
                )));
            }
        }
        for (id, p) in self.placement.iter().chain(&self.required) {
            self.spec(id)?;
            match p {
                Placement::Replicated => {}
                Placement::Sharded { axis, mesh_axis } => {
                    self.mesh_axis(mesh_axis)?;
                    self.tensor_axis(id, axis)?;
                }
                Placement::PartialSum { mesh_axis } => {
                    self.mesh_axis(mesh_axis)?;
                }
            }
        }
        Ok(())
    }

    fn mesh_axis(&self, name: &str) -> Result<usize, LoweringError> {
        self.mesh
            .axis(name)
            .ok_or_else(|| LoweringError::Ir(format!("unknown mesh axis {name}")))
    }

    fn tensor_axis(&self, id: &str, name: &str) -> Result<usize, LoweringError> {
        self.axis_info
            .get(id)
            .and_then(|names| names.iter().position(|n| n == name))
            .ok_or_else(|| LoweringError::Ir(format!("{id} has no axis {name}")))
    }

    fn placement_of(&self, id: &str) -> &Placement {
        self.placement.get(id).unwrap_or(&Placement::Replicated)
    }

    /// Regions rank `r` holds valid data for under `p`.
    fn owned(&self, t: &TensorSpec, p: &Placement, r: usize) -> Result<Region, LoweringError> {
        match p {
            Placement::Replicated | Placement::PartialSum { .. } => Ok(t.full_region()),
            Placement::Sharded { axis, mesh_axis } => {
                let ax = self.tensor_axis(&t.tensor_id, axis)?;
                let m = self.mesh_axis(mesh_axis)?;
                let group = self
                    .mesh
                    .groups(m)
                    .into_iter()
                    .find(|g| g.contains(&r))
                    .expect("rank in a group");
                let idx = group
                    .iter()
                    .position(|&q| q == r)
                    .expect("rank in its group");
                shard_region(t, ax, group.len(), idx)
            }
        }
    }

    /// Steps for every tensor in tensor order, with the initial ownership
    /// the produced placements imply.
    pub fn to_steps(&self) -> Result<StepList, LoweringError> {
        self.check()?;
        let w = self.mesh.world_size();
        let mut owners = vec![BTreeMap::new(); w];
        let mut steps = Vec::new();
        for t in &self.tensors {
            let from = self.placement_of(&t.tensor_id);
            for (r, o) in owners.iter_mut().enumerate() {
                o.insert(t.tensor_id.clone(), vec![self.owned(t, from, r)?]);
            }
            if let Some(to) = self.required.get(&t.tensor_id) {
                steps.extend(parse_partition_to_steps(t, from, to, self)?);
            }
        }
        Ok(StepList {
            world_size: w,
            tensors: self.tensors.clone(),
            owners,
            steps,
        })
    }
}

fn shard_region(
    t: &TensorSpec,
    axis: usize,
    parts: usize,
    i: usize,
) -> Result<Region, LoweringError> {
    if !t.shape[axis].is_multiple_of(parts) {
        return Err(LoweringError::Ir(format!(
            "{} axis {} (extent {}) does not divide into {} shards",
            t.tensor_id, axis, t.shape[axis], parts
        )));
    }
    let rows = t.shape[axis] / parts;
    let mut r = t.full_region();
    r.offsets[axis] = i * rows;
    r.sizes[axis] = rows;
    Ok(r)
}

/// Steps that turn placement `from` into `to` for one tensor: gather a
/// sharded tensor, all-reduce or reduce-scatter a partial sum. Matching
/// placements and replicated sources need nothing.
pub fn parse_partition_to_steps(
    tensor: &TensorSpec,
    from: &Placement,
    to: &Placement,
    ir: &PartitionIR,
) -> Result<Vec<Step>, LoweringError> {
    let no_rule = || LoweringError::NoRule {
        tensor: tensor.tensor_id.clone(),
        from: from.clone(),
        to: to.clone(),
    };
    let id = &tensor.tensor_id;
    let per_group =
        |kind: CollectiveKind, mesh_axis: &str, axis: usize| -> Result<Vec<Step>, LoweringError> {
            let m = ir.mesh_axis(mesh_axis)?;
            Ok(ir
                .mesh
                .groups(m)
                .into_iter()
                .map(|g| Step::collective(kind, tensor.full_region(), g, axis))
                .collect())
        };
    match (from, to) {
        _ if from == to => Ok(Vec::new()),
        (Placement::Replicated, _) => Ok(Vec::new()),
        (Placement::Sharded { axis, mesh_axis }, Placement::Replicated) => per_group(
            CollectiveKind::Allgather,
            mesh_axis,
            ir.tensor_axis(id, axis)?,
        ),
        (Placement::PartialSum { mesh_axis }, Placement::Replicated) => {
            per_group(CollectiveKind::Allreduce, mesh_axis, 0)
        }
        (
            Placement::PartialSum { mesh_axis },
            Placement::Sharded {
                axis,
                mesh_axis: m2,
            },
        ) if mesh_axis == m2 => per_group(
            CollectiveKind::ReduceScatter,
            mesh_axis,
            ir.tensor_axis(id, axis)?,
        ),
        _ => Err(no_rule()),
    }
}

/// Number the steps into per-rank plans.
///
/// `direct` keeps each collective step as one op per member; `template`
/// expands it into point-to-point plans from the template generators.
/// Point-to-point steps are emitted as-is on both paths. Local copies whose
/// source and destination coincide are dropped; steps waiting on them wait
/// on their deps instead.
pub fn emit_steps(list: &StepList, path: LoweringPath) -> Result<CommSchedule, LoweringError> {
    if path == LoweringPath::Synth {
        return Err(LoweringError::Unimplemented("synth".into()));
    }
    let w = list.world_size;
    if w == 0 || list.owners.len() != w {
        return Err(LoweringError::Ir(format!(
            "{} owner maps for world size {w}",
            list.owners.len()
        )));
    }
    let mut s = CommSchedule::empty(w);
    for t in &list.tensors {
        s.add_tensor(t.clone());
    }
    s.owner_regions = list.owners.clone();
    let specs: BTreeMap<&str, &TensorSpec> = list
        .tensors
        .iter()
        .map(|t| (t.tensor_id.as_str(), t))
        .collect();
    // pass 1 places every op in step order, so plan order follows step order
    // even when a dep points at a later step (as loop-carried deps may)
    let mut emitted: Vec<Option<Vec<OpRef>>> = Vec::with_capacity(list.steps.len());
    for (i, step) in list.steps.iter().enumerate() {
        if let Some(&d) = step.deps.iter().find(|&&d| d >= list.steps.len() || d == i) {
            return Err(LoweringError::Ir(format!("step {i} has invalid dep {d}")));
        }
        let spec = *specs.get(step.region.tensor_id.as_str()).ok_or_else(|| {
            LoweringError::Ir(format!(
                "step {i} names unknown tensor {}",
                step.region.tensor_id
            ))
        })?;
        let ops = match step.kind {
            StepKind::LocalCopy => None,
            StepKind::Push | StepKind::Pull => {
                let (rank, peer) = match (step.rank, step.peer) {
                    (Some(r), Some(p)) if r < w && p < w => (r, p),
                    _ => {
                        return Err(LoweringError::Ir(format!(
                            "step {i} needs rank and peer below {w}"
                        )))
                    }
                };
                let dir = if step.kind == StepKind::Push {
                    Direction::Push
                } else {
                    Direction::Pull
                };
                let chunk = region_chunk(&step.region);
                s.plans[rank].push(CommOp::p2p(
                    dir,
                    peer,
                    chunk.clone(),
                    chunk,
                    step.accumulate,
                ));
                Some(vec![OpRef::new(rank, s.plans[rank].len() - 1)])
            }
            StepKind::Collective(kind) => {
                if step.ranks.is_empty() || step.ranks.iter().any(|&r| r >= w) {
                    return Err(LoweringError::Ir(format!(
                        "step {i} has an invalid rank set"
                    )));
                }
                if step.region != spec.full_region() {
                    return Err(LoweringError::Ir(format!(
                        "collective step {i} must cover all of {}",
                        spec.tensor_id
                    )));
                }
                Some(match path {
                    LoweringPath::Direct => emit_direct(&mut s, spec, step, kind)?,
                    _ => emit_template(&mut s, spec, step, kind)?,
                })
            }
        };
        emitted.push(ops);
    }

    // pass 2 attaches step deps; a dropped step stands for its own deps
    let mut through: Vec<Option<Vec<OpRef>>> = vec![None; list.steps.len()];
    for (i, step) in list.steps.iter().enumerate() {
        let Some(ops) = &emitted[i] else { continue };
        let mut deps = BTreeSet::new();
        for &d in &step.deps {
            deps.extend(resolve_dep(
                list,
                &emitted,
                &mut through,
                d,
                &mut Vec::new(),
            )?);
        }
        for at in ops {
            s.plans[at.rank][at.index].deps.extend(deps.iter().copied());
        }
    }
    Ok(s)
}

fn resolve_dep(
    list: &StepList,
    emitted: &[Option<Vec<OpRef>>],
    through: &mut [Option<Vec<OpRef>>],
    d: usize,
    stack: &mut Vec<usize>,
) -> Result<Vec<OpRef>, LoweringError> {
    if let Some(ops) = &emitted[d] {
        return Ok(ops.clone());
    }
    if let Some(ops) = &through[d] {
        return Ok(ops.clone());
    }
    if stack.contains(&d) {
        return Err(LoweringError::Ir(format!(
            "dropped local copies depend on each other: {stack:?}"
        )));
    }
    stack.push(d);
    let mut out = BTreeSet::new();
    for &e in &list.steps[d].deps {
        out.extend(resolve_dep(list, emitted, through, e, stack)?);
    }
    stack.pop();
    let out: Vec<OpRef> = out.into_iter().collect();
    through[d] = Some(out.clone());
    Ok(out)
}

fn region_chunk(r: &Region) -> Chunk {
    let at: Vec<String> = r.offsets.iter().map(|o| o.to_string()).collect();
    let sz: Vec<String> = r.sizes.iter().map(|o| o.to_string()).collect();
    Chunk::new(
        format!("{}[{}+{}]", r.tensor_id, at.join(","), sz.join(",")),
        r.clone(),
    )
}

fn emit_direct(
    s: &mut CommSchedule,
    spec: &TensorSpec,
    step: &Step,
    kind: CollectiveKind,
) -> Result<Vec<OpRef>, LoweringError> {
    let n = step.ranks.len();
    let full = Chunk::new(spec.tensor_id.clone(), spec.full_region());
    let mut out = Vec::with_capacity(n);
    for (idx, &r) in step.ranks.iter().enumerate() {
        let shard = || -> Result<Chunk, LoweringError> {
            Ok(Chunk::new(
                format!("{}.s{idx}", spec.tensor_id),
                shard_region(spec, step.axis, n, idx)?,
            ))
        };
        let (src, dst) = match kind {
            CollectiveKind::Allgather => (shard()?, full.clone()),
            CollectiveKind::ReduceScatter => (full.clone(), shard()?),
            CollectiveKind::Allreduce => (full.clone(), full.clone()),
            CollectiveKind::AllToAll => {
                return Err(LoweringError::Unimplemented(
                    "all_to_all step emission".into(),
                ))
            }
        };
        s.plans[r].push(CommOp::collective(kind, src, dst, step.ranks.clone()));
        out.push(OpRef::new(r, s.plans[r].len() - 1));
    }
    Ok(out)
}

/// Instantiate the template over the step's ranks and splice it into `s`
/// with rank `i` of the template mapped to `step.ranks[i]`.
fn emit_template(
    s: &mut CommSchedule,
    spec: &TensorSpec,
    step: &Step,
    kind: CollectiveKind,
) -> Result<Vec<OpRef>, LoweringError> {
    let params = TemplateParams::new(step.ranks.len(), spec.clone(), step.axis);
    let t = match kind {
        CollectiveKind::Allgather => allgather_1d_swizzle(&params)?,
        CollectiveKind::ReduceScatter => reduce_scatter(&params)?,
        CollectiveKind::Allreduce => partition_allreduce(&params)?,
        CollectiveKind::AllToAll => {
            return Err(LoweringError::Unimplemented("all_to_all template".into()))
        }
    };
    let map = &step.ranks;
    let base: Vec<usize> = map.iter().map(|&r| s.plans[r].len()).collect();
    let mut out = Vec::new();
    for (tr, plan) in t.plans.iter().enumerate() {
        for op in plan {
            let mut op = op.clone();
            if let OpKind::P2p(p) = &mut op.kind {
                p.peer = map[p.peer];
            }
            for d in &mut op.deps {
                *d = OpRef::new(map[d.rank], base[d.rank] + d.index);
            }
            s.plans[map[tr]].push(op);
            out.push(OpRef::new(map[tr], s.plans[map[tr]].len() - 1));
        }
    }
    Ok(out)
}

/// Partition IR straight to a schedule.
pub fn lower_partition_ir(
    ir: &PartitionIR,
    path: LoweringPath,
) -> Result<CommSchedule, LoweringError> {
    emit_steps(&ir.to_steps()?, path)
}

/// Per-rank data movement of a schedule without chunk names:
/// `(src_rank, dst_rank, dst region, accumulate)` in plan order.
pub fn transfer_view(s: &CommSchedule) -> Vec<Vec<(usize, usize, Region, bool)>> {
    (0..s.world_size)
        .map(|r| {
            (0..s.plans[r].len())
                .filter_map(|i| s.transfer(OpRef::new(r, i)))
                .map(|t| (t.src_rank, t.dst_rank, t.dst.region.clone(), t.accumulate))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::validate_schedule;

    fn ir(w: usize, from: Placement, to: Placement) -> PartitionIR {
        PartitionIR {
            mesh: Mesh::line("x", w),
            tensors: vec![TensorSpec::new("C", vec![8 * w, 4], 4)],
            axis_info: [("C".to_string(), vec!["m".to_string(), "n".to_string()])].into(),
            placement: [("C".to_string(), from)].into(),
            required: [("C".to_string(), to)].into(),
        }
    }

    fn sharded() -> Placement {
        Placement::Sharded {
            axis: "m".into(),
            mesh_axis: "x".into(),
        }
    }

    fn partial() -> Placement {
        Placement::PartialSum {
            mesh_axis: "x".into(),
        }
    }

    #[test]
    fn rule_table() {
        let kinds = |from, to| -> Vec<StepKind> {
            ir(4, from, to)
                .to_steps()
                .unwrap()
                .steps
                .iter()
                .map(|s| s.kind)
                .collect()
        };
        assert_eq!(
            kinds(sharded(), Placement::Replicated),
            vec![StepKind::Collective(CollectiveKind::Allgather)]
        );
        assert_eq!(
            kinds(partial(), Placement::Replicated),
            vec![StepKind::Collective(CollectiveKind::Allreduce)]
        );
        assert_eq!(
            kinds(partial(), sharded()),
            vec![StepKind::Collective(CollectiveKind::ReduceScatter)]
        );
        assert_eq!(kinds(Placement::Replicated, Placement::Replicated), vec![]);
        assert!(matches!(
            ir(4, sharded(), partial()).to_steps(),
            Err(LoweringError::NoRule { .. })
        ));
    }

    #[test]
    fn template_path_matches_template_module() {
        let s = lower_partition_ir(
            &ir(4, sharded(), Placement::Replicated),
            LoweringPath::Template,
        )
        .unwrap();
        let t = allgather_1d_swizzle(&TemplateParams::new(
            4,
            TensorSpec::new("C", vec![32, 4], 4),
            0,
        ))
        .unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn direct_path_is_one_collective_per_rank() {
        let s = lower_partition_ir(
            &ir(4, sharded(), Placement::Replicated),
            LoweringPath::Direct,
        )
        .unwrap();
        assert!(validate_schedule(&s).is_valid());
        for plan in &s.plans {
            assert_eq!(plan.len(), 1);
            assert!(matches!(plan[0].kind, OpKind::Collective(_)));
        }
    }

    #[test]
    fn synth_is_a_stub() {
        let e = lower_partition_ir(
            &ir(2, sharded(), Placement::Replicated),
            LoweringPath::Synth,
        )
        .unwrap_err();
        assert_eq!(e.to_string(), "synth lowering is unimplemented");
    }

    #[test]
    fn empty_steps_give_empty_schedule() {
        let s = lower_partition_ir(&ir(4, partial(), partial()), LoweringPath::Template).unwrap();
        assert_eq!(s.op_count(), 0);
        assert!(validate_schedule(&s).is_valid());
    }

    #[test]
    fn mesh_groups() {
        let m = Mesh {
            axes: vec![
                MeshAxis {
                    name: "a".into(),
                    size: 2,
                },
                MeshAxis {
                    name: "b".into(),
                    size: 3,
                },
            ],
        };
        assert_eq!(m.groups(0), vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
        assert_eq!(m.groups(1), vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn sub_mesh_template_is_valid() {
        let mut p = ir(2, sharded(), Placement::Replicated);
        p.mesh.axes.insert(
            0,
            MeshAxis {
                name: "dp".into(),
                size: 2,
            },
        );
        let s = lower_partition_ir(&p, LoweringPath::Template).unwrap();
        assert_eq!(s.world_size, 4);
        assert!(
            validate_schedule(&s).is_valid(),
            "{:?}",
            validate_schedule(&s)
        );
        assert_eq!(s.op_count(), 4);
    }
}
