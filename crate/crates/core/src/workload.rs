//! Ready-made fused GEMM plus collective fixtures.

use crate::backend::{
    realize, Assignment, BackendProfile, DeviceProgram, KernelMode, RealizeError, SmAlloc,
};
use crate::kernel::TileProgram;
use crate::planner::{plan, IntraPolicy, PlanError, Planned};
use crate::region::TensorSpec;
use crate::schedule::CommSchedule;
use crate::templates::{default_mesh, Template, TemplateError, TemplateParams};
use serde::{Deserialize, Serialize};

/// GEMM problem and tile sizes: `C[m, n] = A[m, k] * B[n, k]^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        GemmShape {
            m,
            n,
            k,
            bm: 128,
            bn: 128,
            bk: 64,
        }
    }

    pub fn tiles(mut self, bm: usize, bn: usize, bk: usize) -> Self {
        self.bm = bm;
        self.bn = bn;
        self.bk = bk;
        self
    }

    pub fn kernel(&self) -> TileProgram {
        TileProgram::gemm(self.m, self.n, self.k, self.bm, self.bn, self.bk)
    }
}

/// A schedule plus the kernel it overlaps with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub schedule: CommSchedule,
    pub kernel: TileProgram,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Realize(#[from] RealizeError),
}

fn params(t: Template, w: usize, tensor: TensorSpec, split: usize) -> TemplateParams {
    let mut p = TemplateParams::new(w, tensor, 0).with_stages(split);
    if t == Template::Allgather2dSwizzle {
        let mesh = default_mesh(w);
        p = p.with_mesh(mesh.intra, mesh.inter);
    }
    p
}

/// Gather templates move `A` (rows sharded across ranks) before the GEMM
/// reads it; reduce templates combine the partial `C` each rank computes.
pub fn template_workload(
    t: Template,
    w: usize,
    shape: GemmShape,
    split: usize,
) -> Result<Workload, WorkloadError> {
    let kernel = shape.kernel();
    let tensor = if t.is_gather() {
        TensorSpec::new("A", vec![shape.m, shape.k], kernel.elem_bytes)
    } else {
        TensorSpec::new("C", vec![shape.m, shape.n], kernel.elem_bytes)
    };
    let schedule = t.instantiate(&params(t, w, tensor, split))?;
    let kind = if t.is_gather() { "ag_gemm" } else { "gemm" };
    Ok(Workload {
        name: format!("{kind}_{t}_w{w}_s{split}"),
        schedule,
        kernel,
    })
}

/// AllGather followed by GEMM (`A` gathered along M).
pub fn ag_gemm(w: usize, shape: GemmShape, split: usize) -> Result<Workload, WorkloadError> {
    template_workload(Template::Allgather1dSwizzle, w, shape, split)
}

/// GEMM followed by reduce-scatter of `C`.
pub fn gemm_rs(w: usize, shape: GemmShape, split: usize) -> Result<Workload, WorkloadError> {
    template_workload(Template::ReduceScatter, w, shape, split)
}

/// GEMM followed by all-reduce of `C`.
pub fn gemm_ar(w: usize, shape: GemmShape, split: usize) -> Result<Workload, WorkloadError> {
    template_workload(Template::PartitionAllreduce, w, shape, split)
}

/// A transfer-only workload over a `rows x cols` tensor.
pub fn comm_only(
    t: Template,
    w: usize,
    rows: usize,
    cols: usize,
    split: usize,
) -> Result<Workload, WorkloadError> {
    let schedule = t.instantiate(&params(
        t,
        w,
        TensorSpec::new("X", vec![rows, cols], 2),
        split,
    ))?;
    Ok(Workload {
        name: format!("comm_{t}_w{w}_s{split}"),
        schedule,
        kernel: TileProgram::empty(),
    })
}

impl Workload {
    pub fn plan(&self, intra: IntraPolicy) -> Result<Planned, PlanError> {
        plan(&self.schedule, &self.kernel, intra)
    }

    /// Plan and realize with `comm_sms` reserved when a specialized backend is used.
    pub fn program(
        &self,
        assignment: &Assignment,
        device_sms: usize,
        comm_sms: usize,
        profile: &BackendProfile,
        mode: KernelMode,
    ) -> Result<DeviceProgram, WorkloadError> {
        let planned = self.plan(IntraPolicy::RowMajor)?;
        let sm = SmAlloc::for_assignment(device_sms, comm_sms, assignment);
        Ok(realize(&planned, assignment, sm, profile, mode)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::validate_schedule;

    #[test]
    fn fixtures_are_valid() {
        let shape = GemmShape::new(256, 128, 64).tiles(32, 32, 32);
        for t in Template::ALL {
            for w in [1, 2, 4, 8] {
                let wl = template_workload(t, w, shape, 2).unwrap();
                assert!(validate_schedule(&wl.schedule).is_valid(), "{}", wl.name);
                wl.plan(IntraPolicy::RowMajor).unwrap();
            }
        }
        let c = comm_only(Template::RingAllgather, 4, 64, 64, 1).unwrap();
        assert_eq!(c.kernel.tile_count(), 0);
    }
}
